"""Per-frame energy terms and their gradients w.r.t. the parameter vector.

Every public term returns ``(value, grad)`` where ``grad`` has the layout of
``BodyParams.to_vector()``: [pose (72) | shape (B) | translation (3)].
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import kernels
from .body_model import N_POSE, KEYPOINT_NAMES, backprop, forward_kinematics, jacobians
from .pointcloud import LabeledCloud, centroid
from .priors import nll, nll_curvature
from .rotations import left_jacobian, rodrigues
from .stereo import project, projection_jacobian

# annotated occlusion degree -> E_J weight
OCCLUSION_WEIGHTS = {2: 1.0, 1: 0.5, 0: 0.0}
SIDES = ("left", "right")


@dataclass
class FrameObservation:
    """One tracked instance in one stereo frame.

    Visibility uses the annotation degrees 2 (visible), 1 (occluded, position
    guessed) and 0 (absent).
    """

    joints2d_left: np.ndarray
    joints2d_right: np.ndarray
    visibility_left: np.ndarray
    visibility_right: np.ndarray
    masks: dict = field(default_factory=dict)  # side -> (V, 2) polygon
    cloud: LabeledCloud = None
    heading: np.ndarray | None = None
    timestamp: float = 0.0
    track_id: object = 0
    frame_id: int = 0

    def __post_init__(self):
        n = len(KEYPOINT_NAMES)
        for side in SIDES:
            uv = np.asarray(getattr(self, f"joints2d_{side}"), dtype=float)
            vis = np.asarray(getattr(self, f"visibility_{side}"), dtype=np.int64)
            if uv.shape != (n, 2) or vis.shape != (n,):
                raise ValueError(f"{side} image needs {n} keypoints with visibility flags")
            if np.any((vis < 0) | (vis > 2)):
                raise ValueError("visibility degrees must be 0, 1 or 2")
            if np.any(~np.isfinite(uv[vis > 0])):
                raise ValueError("visible keypoints need finite pixel coordinates")
            setattr(self, f"joints2d_{side}", uv)
            setattr(self, f"visibility_{side}", vis)
        if self.cloud is None:
            self.cloud = LabeledCloud(np.zeros((0, 3)), self.track_id, self.timestamp)
        if self.heading is not None:
            d = np.asarray(self.heading, dtype=float)
            if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-6:
                raise ValueError("heading must be a unit 3-vector")
            self.heading = d

    def joints2d(self, side):
        return getattr(self, f"joints2d_{side}")

    def visibility(self, side):
        return getattr(self, f"visibility_{side}")

    def keypoint_weights(self, side):
        vis = self.visibility(side)
        return np.select([vis == 2, vis == 1], [OCCLUSION_WEIGHTS[2], OCCLUSION_WEIGHTS[1]], 0.0)


@dataclass
class EnergyWeights:
    """Term weights. The defaults were tuned on synthetic scenes; their overall
    scale matters only through its balance against the ADMM penalty rho."""

    w_J: float = 0.02
    w_3d: float = 20.0
    w_P: float = 0.02
    w_T: float = 0.2
    w_D: float = 0.2
    w_tp: float = 0.0002
    gm_sigma: float = 100.0  # px
    use_left: bool = True
    use_right: bool = True
    heading_mode: str = "always"  # or "init": E_D only in the first solver stage

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("w_") or f.name == "gm_sigma":
                v = float(getattr(self, f.name))
                if not (np.isfinite(v) and v >= 0):
                    raise ValueError(f"{f.name} must be a finite nonnegative number")
                setattr(self, f.name, v)
        if not self.gm_sigma > 0:
            raise ValueError("gm_sigma must be positive")
        if self.heading_mode not in ("always", "init"):
            raise ValueError("heading_mode must be 'always' or 'init'")

    def scaled(self, factor):
        out = EnergyWeights(**{f.name: getattr(self, f.name) for f in fields(self)})
        for name in ("w_J", "w_3d", "w_P", "w_T", "w_D", "w_tp"):
            setattr(out, name, getattr(out, name) * factor)
        return out


def geman_mcclure(r2, sigma):
    """rho and d rho / d(r^2) for squared residuals ``r2``."""
    s2 = sigma * sigma
    den = s2 + r2
    return r2 * s2 / den, (s2 / den) ** 2


# ---------------------------------------------------------------------------
# Gradients w.r.t. posed quantities; shared by the public terms and e_total
# ---------------------------------------------------------------------------

def _reproj_point_grad(keypoints, obs, rig, side, sigma, subset=None, gn=None):
    """Value and d/d(keypoints3d) of the robust reprojection error in one image.

    If ``gn`` is a list, (index, weight, projection Jacobian) triples for the
    Gauss-Newton curvature are appended to it.
    """
    w = obs.keypoint_weights(side)
    if subset is not None:
        mask = np.zeros_like(w)
        mask[subset] = 1.0
        w = w * mask
    grad = np.zeros_like(keypoints)
    active = np.flatnonzero(w > 0)
    if len(active) == 0:
        return 0.0, grad
    X = keypoints[active]
    uv, front = project(rig, X, side)
    e = uv - obs.joints2d(side)[active]
    r2 = np.sum(e * e, axis=1)
    rho, drho = geman_mcclure(r2, sigma)
    # behind the camera: saturated penalty, no gradient
    rho = np.where(front, rho, sigma * sigma)
    drho = np.where(front, drho, 0.0)
    wa = w[active]
    J = projection_jacobian(rig, X, side)
    grad[active] = np.einsum("n,nab,na->nb", 2.0 * wa * drho, J, e)
    if gn is not None:
        gn.append((active, 2.0 * wa * drho, J))
    return float(wa @ rho), grad


def lidar_correspondences(body, points, sensor_origin=None):
    """Nearest sensor-facing surface sample for each LiDAR point (all samples
    are candidates when ``sensor_origin`` is None)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    o = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, dtype=float)
    idx, _ = kernels.nearest_facing(pts, body.surface_points, body.surface_normals, o, sensor_origin is not None)
    return idx


def _lidar_surface_grad(body, points, sensor_origin, correspondences):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0, np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    idx = lidar_correspondences(body, pts, sensor_origin) if correspondences is None else np.asarray(correspondences)
    diff = body.surface_points[idx] - pts
    n = len(pts)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n, idx


def _heading_root_grad(pose, d, template, want_jacobian=False):
    R = rodrigues(pose[:3])
    f = R @ template.forward_axis
    r = f - d
    g = 2.0 * r
    out = (float(r @ r), left_jacobian(pose[:3]).T @ np.cross(f, g))
    if want_jacobian:
        # d f / d root = -[f]x J_l
        fx = np.array([[0.0, -f[2], f[1]], [f[2], 0.0, -f[0]], [-f[1], f[0], 0.0]])
        return out + (-fx @ left_jacobian(pose[:3]),)
    return out


def _temporal_delta(params, params_prev, prior, dt):
    if not dt > 0:
        raise ValueError("dt must be positive")
    if prior.dim != 3 + N_POSE:
        raise ValueError(f"temporal prior must be {3 + N_POSE}-dimensional, got {prior.dim}")
    scale = (prior.frame_interval / dt) if prior.frame_interval else 1.0
    dx = np.concatenate([params.translation - params_prev.translation, params.pose - params_prev.pose])
    return dx * scale, scale


# ---------------------------------------------------------------------------
# Public terms
# ---------------------------------------------------------------------------

def e_reproj(params, obs, rig, side, template, sigma=100.0, body=None, subset=None):
    """Occlusion-weighted Geman-McClure reprojection error in one image."""
    body = forward_kinematics(template, params) if body is None else body
    val, g = _reproj_point_grad(body.keypoints3d, obs, rig, side, sigma, subset)
    if val == 0.0 and not np.any(g):
        return 0.0, np.zeros(template.n_params)
    return val, backprop(template, body, keypoint_grad=g)


def e_translation(params, t0, template=None):
    n_params = N_POSE + len(params.shape) + 3
    r = params.translation - np.asarray(t0, dtype=float)
    grad = np.zeros(n_params)
    grad[-3:] = 2.0 * r
    return float(r @ r), grad


def e_heading(params, d, template):
    """Squared distance between the body's forward direction and ``d``."""
    val, groot = _heading_root_grad(params.pose, np.asarray(d, dtype=float), template)
    grad = np.zeros(template.n_params)
    grad[:3] = groot
    return val, grad


def e_lidar(params, cloud, template, sensor_origin=None, correspondences=None, body=None):
    """Mean squared distance from LiDAR points to their nearest sensor-facing
    surface samples. Pass ``correspondences`` to hold the matching fixed."""
    pts = cloud.points if isinstance(cloud, LabeledCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0, np.zeros(template.n_params)
    body = forward_kinematics(template, params) if body is None else body
    val, g, idx = _lidar_surface_grad(body, pts, sensor_origin, correspondences)
    return val, backprop(template, body, surface_grad=g, surface_index=idx)


def e_pose_prior(params, prior, template=None):
    """Mixture NLL of the 69 body-pose angles plus ||shape||^2."""
    n_params = N_POSE + len(params.shape) + 3
    grad = np.zeros(n_params)
    val = float(params.shape @ params.shape)
    grad[N_POSE:N_POSE + len(params.shape)] = 2.0 * params.shape
    if prior is not None:
        if prior.dim != N_POSE - 3:
            raise ValueError(f"pose prior must be {N_POSE - 3}-dimensional, got {prior.dim}")
        v, g = nll(prior, params.pose[3:])
        val += v
        grad[3:N_POSE] = g
    return val, grad


def e_temporal(params, params_prev, prior, dt, template=None):
    """Mixture NLL of the rate-normalised (translation, pose) difference."""
    dx, scale = _temporal_delta(params, params_prev, prior, dt)
    val, g = nll(prior, dx)
    n_params = N_POSE + len(params.shape) + 3
    grad = np.zeros(n_params)
    grad[-3:] = scale * g[:3]
    grad[:N_POSE] = scale * g[3:]
    return val, grad


TERMS = ("J_left", "J_right", "3d", "P", "T", "D", "tp")


def e_total(params, obs, rig, priors, weights, template, params_prev=None, dt=None, *,
            correspondences=None, keypoint_subset=None, active=None, body=None, hessian=False):
    """Weighted sum of the per-frame terms.

    ``active`` optionally restricts the sum to a subset of ``TERMS``;
    ``keypoint_subset`` restricts E_J to those keypoint indices. Returns
    ``(value, grad, per_term_values)`` where the per-term values are
    unweighted; with ``hessian=True`` a Gauss-Newton curvature matrix is
    appended to the tuple.
    """
    active = set(TERMS) if active is None else set(active)
    body = forward_kinematics(template, params) if body is None else body
    n = template.n_params
    B = template.n_shape
    grad = np.zeros(n)
    H = np.zeros((n, n)) if hessian else None
    gn = [] if hessian else None
    terms = {}
    total = 0.0
    kp_grad = np.zeros_like(body.keypoints3d)
    for side, key, use in (("left", "J_left", weights.use_left), ("right", "J_right", weights.use_right)):
        if use and key in active and weights.w_J > 0:
            v, g = _reproj_point_grad(body.keypoints3d, obs, rig, side, weights.gm_sigma, keypoint_subset, gn)
            terms[key] = v
            total += weights.w_J * v
            kp_grad += weights.w_J * g
    surf_grad, surf_idx = None, None
    if "3d" in active and weights.w_3d > 0 and len(obs.cloud):
        v, g, surf_idx = _lidar_surface_grad(body, obs.cloud.points, rig.lidar_origin, correspondences)
        terms["3d"] = v
        total += weights.w_3d * v
        surf_grad = weights.w_3d * g
    if terms:
        grad += backprop(template, body, keypoint_grad=kp_grad, surface_grad=surf_grad, surface_index=surf_idx)
        if hessian:
            Jk, Js = jacobians(template, body, surf_idx)
            for idx, c, Jp in gn:
                A = np.einsum("nab,nbp->nap", Jp, Jk[idx])
                H += weights.w_J * np.einsum("n,nap,naq->pq", c, A, A)
            if Js is not None:
                Jf = Js.reshape(-1, n)
                H += (2.0 * weights.w_3d / len(Js)) * (Jf.T @ Jf)
    if "P" in active and weights.w_P > 0:
        pose_prior = priors.pose if priors is not None else None
        v, g = e_pose_prior(params, pose_prior)
        terms["P"] = v
        total += weights.w_P * v
        grad += weights.w_P * g
        if hessian:
            H[N_POSE:N_POSE + B, N_POSE:N_POSE + B] += 2.0 * weights.w_P * np.eye(B)
            if pose_prior is not None:
                H[3:N_POSE, 3:N_POSE] += weights.w_P * nll_curvature(pose_prior, params.pose[3:])
    if "T" in active and weights.w_T > 0 and len(obs.cloud):
        v, g = e_translation(params, centroid(obs.cloud))
        terms["T"] = v
        total += weights.w_T * v
        grad += weights.w_T * g
        if hessian:
            H[n - 3:, n - 3:] += 2.0 * weights.w_T * np.eye(3)
    if "D" in active and weights.w_D > 0 and obs.heading is not None:
        v, groot, A = _heading_root_grad(params.pose, obs.heading, template, want_jacobian=True)
        terms["D"] = v
        total += weights.w_D * v
        grad[:3] += weights.w_D * groot
        if hessian:
            H[:3, :3] += 2.0 * weights.w_D * (A.T @ A)
    if ("tp" in active and weights.w_tp > 0 and params_prev is not None
            and priors is not None and priors.temporal is not None):
        v, g = e_temporal(params, params_prev, priors.temporal, dt)
        terms["tp"] = v
        total += weights.w_tp * v
        grad += weights.w_tp * g
        if hessian:
            dx, scale = _temporal_delta(params, params_prev, priors.temporal, dt)
            C = weights.w_tp * scale * scale * nll_curvature(priors.temporal, dx)
            order = np.r_[n - 3:n, 0:N_POSE]  # delta layout: translation then pose
            H[np.ix_(order, order)] += C
    if hessian:
        return float(total), grad, terms, H
    return float(total), grad, terms
