"""Procedural articulated body model.

A gender-neutral 24-joint skeleton with SMPL topology, a linear shape
space over joint positions and capsule radii, capsule surface samples used
as the model "vertices", and the 18 annotation keypoints.

Body frame: +x is the body's left, +y up, +z forward; the root (pelvis)
sits at the origin of the neutral template.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .rotations import rodrigues

JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)
PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21])

# 14 body keypoints plus 4 head/facial components.
KEYPOINT_NAMES = (
    "hip", "rhip", "lhip", "rknee", "lknee", "rankl", "lankl", "neck",
    "rsho", "lsho", "relb", "lelb", "rwri", "lwri", "head", "nose", "reye", "leye",
)
TORSO_KEYPOINTS = ("hip", "rhip", "lhip", "neck", "rsho", "lsho")
LEG_KEYPOINTS = ("rknee", "lknee", "rankl", "lankl")

N_JOINTS = 24
N_POSE = 72

TEMPLATE_FORMAT = "pedfit-template/1"


@dataclass(frozen=True, eq=False)
class SkeletonTemplate:
    """Neutral skeleton, shape space and keypoint mapping.

    Bone ``c - 1`` runs from ``parents[c]`` to joint ``c`` and moves with the
    frame of ``parents[c]``.
    """

    parents: np.ndarray
    joints: np.ndarray  # (24, 3) m
    shape_basis: np.ndarray  # (B, 24, 3) m per unit coefficient
    radii: np.ndarray  # (23,) m
    radius_basis: np.ndarray  # (B, 23)
    keypoint_names: tuple
    keypoint_joints: np.ndarray  # (18,)
    keypoint_offsets: np.ndarray  # (18, 3), local frame of the mapped joint
    forward_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    up_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    samples_per_bone: int = 16

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        if parents.shape != (N_JOINTS,):
            raise ValueError(f"expected {N_JOINTS} joints, got {parents.shape}")
        if parents[0] != -1 or np.any(parents[1:] < 0):
            raise ValueError("exactly one root (joint 0) is required")
        if np.any(parents[1:] >= np.arange(1, N_JOINTS)):
            raise ValueError("parents must precede children (tree in topological order)")
        kp = np.asarray(self.keypoint_joints, dtype=np.int64)
        if len(self.keypoint_names) != len(KEYPOINT_NAMES) or len(set(self.keypoint_names)) != len(KEYPOINT_NAMES):
            raise ValueError("keypoint map must cover the 18 annotation keypoints exactly once")
        if self.samples_per_bone < 1:
            raise ValueError("samples_per_bone must be positive")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "keypoint_joints", kp)
        for name in ("joints", "shape_basis", "radii", "radius_basis", "keypoint_offsets",
                     "forward_axis", "up_axis"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.shape_basis.shape[1:] != (N_JOINTS, 3) or self.radius_basis.shape != (len(self.shape_basis), N_JOINTS - 1):
            raise ValueError("shape basis tables have inconsistent dimensions")
        object.__setattr__(self, "_surface", _surface_layout(self))
        anc = np.zeros((N_JOINTS, N_JOINTS), dtype=bool)
        for k in range(N_JOINTS):
            j = k
            while j >= 0:
                anc[j, k] = True
                j = parents[j]
        object.__setattr__(self, "ancestors", anc)

    @property
    def n_shape(self):
        return self.shape_basis.shape[0]

    @property
    def n_params(self):
        return N_POSE + self.n_shape + 3

    def keypoint_index(self, names):
        return np.array([self.keypoint_names.index(n) for n in names], dtype=np.int64)

    def with_samples(self, samples_per_bone):
        return SkeletonTemplate(
            self.parents, self.joints, self.shape_basis, self.radii, self.radius_basis,
            self.keypoint_names, self.keypoint_joints, self.keypoint_offsets,
            self.forward_axis, self.up_axis, samples_per_bone,
        )


@dataclass
class BodyParams:
    """Decision variables: axis-angle pose (72), shape coefficients, translation (m)."""

    pose: np.ndarray
    shape: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(-1)
        self.shape = np.asarray(self.shape, dtype=float).reshape(-1)
        self.translation = np.asarray(self.translation, dtype=float).reshape(-1)
        if self.pose.shape != (N_POSE,):
            raise ValueError(f"pose must have {N_POSE} entries, got {self.pose.size}")
        if self.translation.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        if not (np.all(np.isfinite(self.pose)) and np.all(np.isfinite(self.shape))
                and np.all(np.isfinite(self.translation))):
            raise ValueError("body parameters must be finite")

    @classmethod
    def zeros(cls, n_shape=10):
        return cls(np.zeros(N_POSE), np.zeros(n_shape), np.zeros(3))

    def to_vector(self):
        return np.concatenate([self.pose, self.shape, self.translation])

    @classmethod
    def from_vector(cls, x, n_shape):
        x = np.asarray(x, dtype=float)
        return cls(x[:N_POSE], x[N_POSE:N_POSE + n_shape], x[N_POSE + n_shape:])

    def copy(self):
        return BodyParams(self.pose.copy(), self.shape.copy(), self.translation.copy())


@dataclass
class PosedBody:
    """Output of :func:`forward_kinematics` (global frame, metres).

    ``rotations``/``axes`` carry the kinematic state needed to back-propagate
    gradients (see :func:`backprop`).
    """

    joint_positions: np.ndarray
    surface_points: np.ndarray
    surface_normals: np.ndarray
    keypoints3d: np.ndarray
    rotations: np.ndarray
    axes: np.ndarray
    radii: np.ndarray


def _bone_frames(joints, parents):
    """Unit vectors (u, v) orthogonal to each template bone direction."""
    u = np.empty((N_JOINTS - 1, 3))
    v = np.empty((N_JOINTS - 1, 3))
    for c in range(1, N_JOINTS):
        d = joints[c] - joints[parents[c]]
        d = d / np.linalg.norm(d)
        ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        a = np.cross(d, ref)
        a /= np.linalg.norm(a)
        u[c - 1] = a
        v[c - 1] = np.cross(d, a)
    return u, v


def _surface_layout(t):
    """Fixed sampling pattern per bone: staggered rings on the cylinder side
    plus golden-angle points on the two hemispherical end caps."""
    s = t.samples_per_bone
    n_cap = int(round(0.15 * s)) if s >= 6 else 0
    n_side = s - 2 * n_cap
    n_ring = max(1, int(round(np.sqrt(n_side))))
    n_az = -(-n_side // n_ring)
    frac, phi, axial = [], [], []
    for i in range(n_side):
        ring = i % n_ring
        k = i // n_ring
        frac.append((ring + 0.5) / n_ring)
        phi.append(2.0 * np.pi * (k + 0.5 * (ring % 2)) / n_az)
        axial.append(0.0)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for end, sign in ((1.0, 1.0), (0.0, -1.0)):
        for i in range(n_cap):
            frac.append(end)
            phi.append(i * golden + (0.5 * golden if sign < 0 else 0.0))
            axial.append(sign * (i + 0.5) / n_cap)
    frac, phi, axial = np.array(frac), np.array(phi), np.array(axial)
    u, v = _bone_frames(t.joints, t.parents)
    dirs = t.joints[1:] - t.joints[t.parents[1:]]
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    bone = np.repeat(np.arange(1, N_JOINTS), s)  # child joint of each sample
    frac_all = np.tile(frac, N_JOINTS - 1)
    phi_all = np.tile(phi, N_JOINTS - 1)
    ax_all = np.tile(axial, N_JOINTS - 1)
    radial = np.sqrt(1.0 - ax_all ** 2)
    normals = (radial * np.cos(phi_all))[:, None] * u[bone - 1] + (radial * np.sin(phi_all))[:, None] * v[bone - 1]
    normals += ax_all[:, None] * dirs[bone - 1]
    attach = t.parents[bone]
    return {"bone": bone, "frac": frac_all, "normals": normals, "attach": attach}


def shape_skeleton(template, shape):
    """Shaped joint table (24, 3) and bone radii (23,), radii clamped >= 1 mm."""
    shape = np.asarray(shape, dtype=float).reshape(-1)
    if shape.shape[0] != template.n_shape:
        raise ValueError(f"shape has {shape.shape[0]} coefficients, template expects {template.n_shape}")
    joints = template.joints + np.tensordot(shape, template.shape_basis, axes=1)
    radii = np.maximum(template.radii + shape @ template.radius_basis, 1e-3)
    return joints, radii


def _rest_offsets(template, joints):
    off = joints - joints[template.parents]
    off[0] = joints[0]
    return off


def forward_kinematics(template, params):
    joints, radii = shape_skeleton(template, params.shape)
    G, p, W = kernels.posed_chain(params.pose.reshape(N_JOINTS, 3), _rest_offsets(template, joints),
                                  template.parents, params.translation)
    lay = template._surface
    bone, att = lay["bone"], lay["attach"]
    local = lay["frac"][:, None] * (joints[bone] - joints[att]) + radii[bone - 1][:, None] * lay["normals"]
    Ga = G[att]
    surface = p[att] + np.einsum("nab,nb->na", Ga, local)
    normals = np.einsum("nab,nb->na", Ga, lay["normals"])
    kj = template.keypoint_joints
    keypoints = p[kj] + np.einsum("nab,nb->na", G[kj], template.keypoint_offsets)
    return PosedBody(p, surface, normals, keypoints, G, W, radii)


def keypoints_from_body(body, template):
    """The 18 annotation keypoints of a posed body, in ``KEYPOINT_NAMES`` order."""
    kj = template.keypoint_joints
    return body.joint_positions[kj] + np.einsum("nab,nb->na", body.rotations[kj], template.keypoint_offsets)


def backprop(template, body, keypoint_grad=None, surface_grad=None, surface_index=None):
    """Gradient of a scalar w.r.t. the parameter vector [pose | shape | translation].

    ``keypoint_grad`` is dE/d(keypoints3d) (18, 3); ``surface_grad`` is
    dE/d(surface_points[surface_index]).
    """
    lay = template._surface
    xs, gs, att = [], [], []
    if keypoint_grad is not None:
        xs.append(body.keypoints3d)
        gs.append(keypoint_grad)
        att.append(template.keypoint_joints)
    if surface_grad is not None:
        idx = np.arange(len(body.surface_points)) if surface_index is None else np.asarray(surface_index)
        xs.append(body.surface_points[idx])
        gs.append(surface_grad)
        att.append(lay["attach"][idx])
    out = np.zeros(template.n_params)
    if not xs:
        return out
    x = np.concatenate(xs)
    g = np.concatenate(gs)
    a = np.concatenate(att).astype(np.int64)
    gpose, force = kernels.chain_gradient(a, x, g, body.joint_positions, body.axes, template.parents)
    out[:N_POSE] = gpose.reshape(-1)
    out[N_POSE + template.n_shape:] = force[0]
    # shape: joint displacement along the chain plus local capsule terms
    G = body.rotations
    par = template.parents
    dS = template.shape_basis - template.shape_basis[:, par, :]
    dS[:, 0, :] = template.shape_basis[:, 0, :]
    Gpar = np.concatenate([np.eye(3)[None], G[par[1:]]])
    local_force = np.einsum("kab,ka->kb", Gpar, force)  # G_parent^T F_subtree
    gshape = np.einsum("bkc,kc->b", dS, local_force)
    if surface_grad is not None:
        bone = lay["bone"][idx]
        pa = lay["attach"][idx]
        gl = np.einsum("nab,na->nb", G[pa], surface_grad)  # G^T g in rest frame
        dJ = template.shape_basis[:, bone, :] - template.shape_basis[:, pa, :]  # (B, n, 3)
        gshape += np.einsum("n,bnc,nc->b", lay["frac"][idx], dJ, gl)
        active = body.radii[bone - 1] > 1e-3
        gshape += template.radius_basis[:, bone - 1] @ (np.einsum("nc,nc->n", lay["normals"][idx], gl) * active)
    out[N_POSE:N_POSE + template.n_shape] = gshape
    return out


# ---------------------------------------------------------------------------
# Procedural template
# ---------------------------------------------------------------------------

def _limb(start, length, angle_deg, z=0.0, side=1.0):
    a = np.radians(angle_deg)
    return start + length * np.array([side * np.sin(a), -np.cos(a), z])


@lru_cache(maxsize=None)
def _default_template(samples_per_bone):
    J = np.zeros((N_JOINTS, 3))
    J[0] = [0.0, 0.0, 0.0]
    J[3] = [0.0, 0.11, -0.025]
    J[6] = [0.0, 0.22, -0.02]
    J[9] = [0.0, 0.34, -0.01]
    J[12] = [0.0, 0.53, -0.01]
    J[15] = [0.0, 0.66, 0.02]
    for side, (hip, knee, ankle, foot, collar, sho, elb, wri, hand) in (
        (1.0, (1, 4, 7, 10, 13, 16, 18, 20, 22)),
        (-1.0, (2, 5, 8, 11, 14, 17, 19, 21, 23)),
    ):
        J[hip] = [side * 0.085, -0.075, -0.01]
        J[knee] = [side * 0.095, -0.48, 0.0]
        J[ankle] = [side * 0.10, -0.88, -0.035]
        J[foot] = [side * 0.11, -0.94, 0.09]
        J[collar] = [side * 0.07, 0.45, -0.01]
        J[sho] = [side * 0.18, 0.44, -0.02]
        J[elb] = _limb(J[sho], 0.27, 15.0, side=side)
        J[wri] = _limb(J[elb], 0.25, 10.0, side=side)
        J[hand] = _limb(J[wri], 0.08, 10.0, side=side)

    radii = np.empty(N_JOINTS - 1)
    by_child = {
        1: 0.09, 2: 0.09, 3: 0.13, 4: 0.075, 5: 0.075, 6: 0.13, 7: 0.055, 8: 0.055, 9: 0.13,
        10: 0.045, 11: 0.045, 12: 0.07, 13: 0.06, 14: 0.06, 15: 0.10, 16: 0.055, 17: 0.055,
        18: 0.045, 19: 0.045, 20: 0.037, 21: 0.037, 22: 0.035, 23: 0.035,
    }
    for c, r in by_child.items():
        radii[c - 1] = r

    legs = {1: [4, 7, 10], 2: [5, 8, 11]}
    arms = {16: [18, 20, 22], 17: [19, 21, 23]}
    upper = [6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23]
    limbs = np.array([c for c in range(1, N_JOINTS) if c not in (3, 6, 9, 12, 15)])
    torso_bones = np.array([3, 6, 9, 1, 2])

    B = 10
    S = np.zeros((B, N_JOINTS, 3))
    RB = np.zeros((B, N_JOINTS - 1))
    # 0: overall stature
    S[0] = 0.04 * J
    RB[0] = 0.04 * radii
    # 1: leg length
    for hip, chain in legs.items():
        for k in chain:
            S[1, k] = 0.05 * (J[k] - J[hip])
    # 2: torso length; spine joints stretch, shoulder girdle rides on spine3
    for k in upper:
        S[2, k, 1] = 0.06 * (J[k, 1] if k in (6, 9, 12, 15) else J[9, 1])
    # 3: arm length
    for sho, chain in arms.items():
        for k in chain:
            S[3, k] = 0.06 * (J[k] - J[sho])
    # 4: shoulder width
    for k in (13, 16, 18, 20, 22):
        S[4, k, 0] = 0.02
    for k in (14, 17, 19, 21, 23):
        S[4, k, 0] = -0.02
    # 5: hip width
    for k in (1, 4, 7, 10):
        S[5, k, 0] = 0.015
    for k in (2, 5, 8, 11):
        S[5, k, 0] = -0.015
    # 6: torso girth
    RB[6, torso_bones - 1] = 0.015
    # 7: limb girth
    RB[7, limbs - 1] = 0.008
    # 8: head size
    S[8, 15, 1] = 0.01
    RB[8, 14] = 0.01
    # 9: neck length
    S[9, 12, 1] = 0.01
    S[9, 15, 1] = 0.015

    jmap = {"hip": 0, "rhip": 2, "lhip": 1, "rknee": 5, "lknee": 4, "rankl": 8, "lankl": 7, "neck": 12,
            "rsho": 17, "lsho": 16, "relb": 19, "lelb": 18, "rwri": 21, "lwri": 20, "head": 15,
            "nose": 15, "reye": 15, "leye": 15}
    offsets = {"nose": [0.0, -0.02, 0.10], "reye": [-0.035, 0.02, 0.09], "leye": [0.035, 0.02, 0.09]}
    kj = np.array([jmap[n] for n in KEYPOINT_NAMES])
    ko = np.array([offsets.get(n, [0.0, 0.0, 0.0]) for n in KEYPOINT_NAMES], dtype=float)
    return SkeletonTemplate(PARENTS.copy(), J, S, radii, RB, KEYPOINT_NAMES, kj, ko,
                            samples_per_bone=samples_per_bone)


def default_template(samples_per_bone=16):
    """The built-in neutral template (cached)."""
    return _default_template(int(samples_per_bone))


def bone_lengths(template, shape):
    joints, _ = shape_skeleton(template, shape)
    return np.linalg.norm(joints[1:] - joints[template.parents[1:]], axis=1)


def capsules(template, params, body=None):
    """Posed capsule end points (23, 3) x2 and radii (23,)."""
    if body is None:
        body = forward_kinematics(template, params)
    _, radii = shape_skeleton(template, params.shape)
    a = body.joint_positions[template.parents[1:]]
    b = body.joint_positions[1:]
    return a, b, radii


def rotate_params(template, params, R, s):
    """Apply a rigid motion (R, s) about the global origin through root pose/translation."""
    from .rotations import matrix_to_axis_angle

    joints, _ = shape_skeleton(template, params.shape)
    pose = params.pose.copy()
    root = rodrigues(pose[:3])
    pose[:3] = matrix_to_axis_angle(R @ root)
    root_pos = params.translation + joints[0]
    new_root = R @ root_pos + s
    return BodyParams(pose, params.shape.copy(), new_root - joints[0])


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def template_to_dict(t):
    return {
        "format": TEMPLATE_FORMAT,
        "joint_names": list(JOINT_NAMES),
        "parents": t.parents.tolist(),
        "joints": t.joints.tolist(),
        "shape_basis": t.shape_basis.tolist(),
        "radii": t.radii.tolist(),
        "radius_basis": t.radius_basis.tolist(),
        "keypoints": [
            {"name": n, "joint": int(j), "offset": o.tolist()}
            for n, j, o in zip(t.keypoint_names, t.keypoint_joints, t.keypoint_offsets)
        ],
        "forward_axis": t.forward_axis.tolist(),
        "up_axis": t.up_axis.tolist(),
        "samples_per_bone": int(t.samples_per_bone),
    }


def template_from_dict(d):
    if d.get("format") != TEMPLATE_FORMAT:
        raise ValueError(f"unsupported template format {d.get('format')!r}")
    kps = d["keypoints"]
    return SkeletonTemplate(
        np.array(d["parents"]), np.array(d["joints"]), np.array(d["shape_basis"]),
        np.array(d["radii"]), np.array(d["radius_basis"]),
        tuple(k["name"] for k in kps), np.array([k["joint"] for k in kps]),
        np.array([k["offset"] for k in kps], dtype=float),
        np.array(d["forward_axis"]), np.array(d["up_axis"]), int(d["samples_per_bone"]),
    )


def save_template(t, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(template_to_dict(t), f, indent=1)
    os.replace(tmp, path)


def load_template(path):
    with open(path) as f:
        return template_from_dict(json.load(f))


def _shape_joint_derivatives(template, body):
    """d p_k / d shape as (24, B, 3)."""
    G = body.rotations
    par = template.parents
    S = template.shape_basis
    D = np.empty((N_JOINTS, template.n_shape, 3))
    D[0] = S[:, 0, :]
    for k in range(1, N_JOINTS):
        D[k] = D[par[k]] + (S[:, k, :] - S[:, par[k], :]) @ G[par[k]].T
    return D


def _pose_columns(template, body, x, attach):
    """d x / d pose (n, 3, 72) for points moving with the frames ``attach``."""
    W = body.axes  # (24, 3, 3); column a is the world axis of pose[j, a]
    d = x[:, None, :] - body.joint_positions[None, :, :]  # (n, 24, 3)
    cols = np.cross(np.transpose(W, (0, 2, 1))[None, :, :, :], d[:, :, None, :])  # (n, 24, 3a, 3)
    cols *= template.ancestors[:, attach].T[:, :, None, None]
    return np.transpose(cols, (0, 3, 1, 2)).reshape(len(x), 3, N_POSE)


def jacobians(template, body, surface_index=None):
    """Analytic d(point)/d(params) for the keypoints (18, 3, P) and, when
    ``surface_index`` is given, for those surface samples (m, 3, P)."""
    P = template.n_params
    B = template.n_shape
    D = _shape_joint_derivatives(template, body)
    kj = template.keypoint_joints
    Jk = np.zeros((len(kj), 3, P))
    Jk[:, :, :N_POSE] = _pose_columns(template, body, body.keypoints3d, kj)
    Jk[:, :, N_POSE:N_POSE + B] = np.transpose(D[kj], (0, 2, 1))
    Jk[:, :, N_POSE + B:] = np.eye(3)
    if surface_index is None:
        return Jk, None
    idx = np.asarray(surface_index)
    lay = template._surface
    bone, att = lay["bone"][idx], lay["attach"][idx]
    x = body.surface_points[idx]
    Js = np.zeros((len(idx), 3, P))
    Js[:, :, :N_POSE] = _pose_columns(template, body, x, att)
    S = template.shape_basis
    active = (body.radii[bone - 1] > 1e-3).astype(float)
    local = (lay["frac"][idx][None, :, None] * (S[:, bone, :] - S[:, att, :])
             + (template.radius_basis[:, bone - 1] * active)[:, :, None] * lay["normals"][idx][None])  # (B, m, 3)
    dshape = D[att] + np.einsum("mac,bmc->mba", body.rotations[att], local)
    Js[:, :, N_POSE:N_POSE + B] = np.transpose(dshape, (0, 2, 1))
    Js[:, :, N_POSE + B:] = np.eye(3)
    return Jk, Js
