"""Synthetic scenes with known ground truth.

Generates parametric walking sequences, renders noisy stereo keypoint
annotations and segmentation hulls, and ray-casts LiDAR returns against
the body capsules (and optional box occluders).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import ConvexHull

from . import kernels
from .body_model import (
    LEG_KEYPOINTS, N_JOINTS, N_POSE, BodyParams, capsules, default_template, forward_kinematics,
)
from .energies import FrameObservation
from .pointcloud import LabeledCloud
from .priors import Priors, fit_gmm, pose_deltas
from .rotations import matrix_to_axis_angle, rodrigues, yaw_to
from .stereo import StereoRig, project

PELVIS_HEIGHT = 0.98  # m above the ground plane for the default template
MOCAP_INTERVAL = 1.0 / 30.0  # s, frame interval of the prior training corpus


# ---------------------------------------------------------------------------
# Gait
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _GaitStyle:
    cadence: float  # gait cycles per second
    phase: float
    hip: float
    knee: float
    arm: float
    elbow: float
    sway: float  # rad
    bob: float  # m
    offsets: np.ndarray  # (24, 3) static per-joint bias
    wobble_amp: np.ndarray  # (24, 3)
    wobble_freq: np.ndarray
    wobble_phase: np.ndarray


def _style(rng, speed):
    s = min(speed / 1.4, 1.5)
    return _GaitStyle(
        cadence=rng.uniform(0.8, 1.0) * (0.6 + 0.4 * s),
        phase=rng.uniform(0, 2 * np.pi),
        hip=s * rng.uniform(0.3, 0.45),
        knee=s * rng.uniform(0.4, 0.7),
        arm=s * rng.uniform(0.15, 0.35),
        elbow=rng.uniform(0.1, 0.35),
        sway=s * rng.uniform(0.03, 0.08),
        bob=s * rng.uniform(0.01, 0.025),
        offsets=rng.normal(0.0, 0.04, (N_JOINTS, 3)),
        wobble_amp=rng.uniform(0.0, 0.03, (N_JOINTS, 3)),
        wobble_freq=rng.uniform(0.2, 1.5, (N_JOINTS, 3)),
        wobble_phase=rng.uniform(0, 2 * np.pi, (N_JOINTS, 3)),
    )


def _gait_pose(style, t):
    """Body pose (joints 1..23) at time ``t``; the root is set by the caller."""
    ph = 2 * np.pi * style.cadence * t + style.phase
    a = np.zeros((N_JOINTS, 3))
    # rotation about body +x (left): negative swings a limb forward
    a[1, 0] = -style.hip * np.sin(ph)
    a[2, 0] = style.hip * np.sin(ph)
    a[4, 0] = style.knee * 0.5 * (1 - np.cos(ph + 0.6))
    a[5, 0] = style.knee * 0.5 * (1 - np.cos(ph + np.pi + 0.6))
    a[7, 0] = -0.15 * np.sin(ph + 0.3)
    a[8, 0] = 0.15 * np.sin(ph + 0.3)
    a[3, 1] = 0.05 * np.sin(ph)
    a[9, 1] = -0.08 * np.sin(ph)
    a[16, 0] = style.arm * np.sin(ph)
    a[17, 0] = -style.arm * np.sin(ph)
    a[18, 0] = -style.elbow - 0.1 * style.arm * (1 + np.sin(ph))
    a[19, 0] = -style.elbow - 0.1 * style.arm * (1 - np.sin(ph))
    wob = style.wobble_amp * np.sin(2 * np.pi * style.wobble_freq * t + style.wobble_phase)
    a += style.offsets + wob
    return a


def gen_walk_sequence(template, n_frames, speed=1.4, heading=(1.0, 0.0, 0.0), start=(0.0, PELVIS_HEIGHT, 20.0),
                      seed=0, frame_interval=0.1, shape=None):
    """Walking sequence: list of BodyParams and timestamps (s).

    The horizontal translation moves at constant velocity ``speed * heading``
    from ``start``, with a small vertical pelvis bob; the root faces
    ``heading`` with a small gait sway. Both vanish at speed 0.
    """
    if speed < 0:
        raise ValueError("speed must be nonnegative")
    if n_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    h = np.asarray(heading, dtype=float)
    h = h - template.up_axis * (h @ template.up_axis)
    h /= np.linalg.norm(h)
    if shape is None:
        shape = rng.normal(0.0, 0.5, template.n_shape)
    shape = np.asarray(shape, dtype=float)
    style = _style(rng, speed)
    root = yaw_to(template.forward_axis, h, template.up_axis)
    start = np.asarray(start, dtype=float)
    R0 = rodrigues(root)
    ts = np.arange(n_frames) * frame_interval
    seq = []
    for t in ts:
        a = _gait_pose(style, t)
        ph = 2 * np.pi * style.cadence * t + style.phase
        # pelvis yaw/roll sway at the stride rate, vertical bob at the step rate
        sway = np.array([0.0, style.sway * np.sin(ph), 0.5 * style.sway * np.sin(ph + 0.5)])
        a[0] = matrix_to_axis_angle(R0 @ rodrigues(sway))
        bob = style.bob * np.cos(2 * ph)
        seq.append(BodyParams(a.reshape(-1), shape.copy(), start + speed * h * t + bob * template.up_axis))
    return seq, ts


# ---------------------------------------------------------------------------
# Stereo annotations
# ---------------------------------------------------------------------------

def _occluded_names(occlusion):
    if occlusion is None or occlusion == "none":
        return ()
    if occlusion == "legs":
        return LEG_KEYPOINTS
    if isinstance(occlusion, str):
        raise ValueError(f"unknown occlusion spec {occlusion!r}")
    return tuple(occlusion)


def body_hull(template, params, rig, side, samples_per_bone=48):
    """Convex hull (CCW vertex list, px) of the projected body capsules."""
    dense = forward_kinematics(template.with_samples(samples_per_bone), params)
    pts = np.concatenate([dense.surface_points, dense.joint_positions])
    uv, front = project(rig, pts, side)
    uv = uv[front]
    if len(uv) < 3:
        return np.zeros((0, 2))
    hull = ConvexHull(uv)
    return uv[hull.vertices]


def render_observation(params, template, rig, noise_px=0.0, occlusion=None, seed=0, timestamp=0.0,
                       track_id=0, frame_id=0, cloud=None, occluders=()):
    """Noisy stereo keypoint annotation of a posed body.

    A keypoint is occluded in a view if it is named by ``occlusion`` or the
    sight line from that camera hits one of ``occluders``. Occluded keypoints
    keep a guessed position (3x the noise) with degree 1; keypoints that
    leave the image get degree 0.
    """
    body = forward_kinematics(template, params)
    named = np.zeros(len(body.keypoints3d), dtype=bool)
    named[template.keypoint_index(_occluded_names(occlusion))] = True
    rng = np.random.default_rng(seed)
    out = {}
    w, h = rig.image_size
    for side in ("left", "right"):
        uv, front = project(rig, body.keypoints3d, side)
        if not np.all(front):
            raise ValueError("body is behind the camera")
        occluded = named.copy()
        if occluders:
            c = rig.camera_center(side)
            occluded |= _ray_boxes(c, body.keypoints3d - c, occluders) < 1.0
        sd = np.full(len(uv), float(noise_px))
        sd[occluded] *= 3.0
        uv = uv + rng.normal(0.0, 1.0, uv.shape) * sd[:, None]
        vis = np.full(len(uv), 2, dtype=np.int64)
        vis[occluded] = 1
        outside = (uv[:, 0] < 0) | (uv[:, 0] >= w) | (uv[:, 1] < 0) | (uv[:, 1] >= h)
        vis[outside] = 0
        uv[outside] = 0.0
        out[side] = (uv, vis)
    masks = {side: body_hull(template, params, rig, side) for side in ("left", "right")}
    if cloud is None:
        cloud = LabeledCloud(np.zeros((0, 3)), track_id, timestamp)
    return FrameObservation(out["left"][0], out["right"][0], out["left"][1], out["right"][1], masks,
                            cloud, None, float(timestamp), track_id, frame_id)


# ---------------------------------------------------------------------------
# LiDAR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box occluder (global frame, m)."""

    lo: tuple
    hi: tuple


def _ray_boxes(origin, dirs, boxes):
    t_hit = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for b in boxes:
        lo = (np.asarray(b.lo) - origin) * inv
        hi = (np.asarray(b.hi) - origin) * inv
        tmin = np.nanmax(np.minimum(lo, hi), axis=1)
        tmax = np.nanmin(np.maximum(lo, hi), axis=1)
        hit = (tmax >= np.maximum(tmin, 0.0))
        t_hit = np.where(hit, np.minimum(t_hit, np.maximum(tmin, 0.0)), t_hit)
    return t_hit


def _angles(v, up_index=1):
    horiz = np.hypot(v[..., 0], v[..., 2])
    return np.arctan2(v[..., 0], v[..., 2]), np.arctan2(v[..., up_index], horiz)


def simulate_lidar(params, template, sensor_origin, angular_resolution=0.2, dropout=0.0, seed=0,
                   occluders=(), timestamp=0.0, track_id=0):
    """Ray-cast returns from ``sensor_origin`` on an absolute azimuth/elevation
    grid (degrees) against the body capsules; first hits only."""
    if not angular_resolution > 0:
        raise ValueError("angular resolution must be positive")
    o = np.asarray(sensor_origin, dtype=float)
    a, b, r = capsules(template, params)
    # angular bounding box of the capsules, padded by their radii
    ends = np.concatenate([a, b]) - o
    rr = np.concatenate([r, r])
    az, el = _angles(ends)
    pad = np.arcsin(np.clip(rr / np.linalg.norm(ends, axis=1), 0, 1))
    res = np.radians(angular_resolution)
    az_idx = np.arange(np.floor((az - pad).min() / res), np.ceil((az + pad).max() / res) + 1)
    el_idx = np.arange(np.floor((el - pad).min() / res), np.ceil((el + pad).max() / res) + 1)
    AZ, EL = np.meshgrid(az_idx * res, el_idx * res, indexing="ij")
    AZ, EL = AZ.ravel(), EL.ravel()
    dirs = np.stack([np.cos(EL) * np.sin(AZ), np.sin(EL), np.cos(EL) * np.cos(AZ)], axis=1)
    t, _ = kernels.ray_capsules(o, dirs, a, b, r)
    if occluders:
        t = np.where(_ray_boxes(o, dirs, occluders) < t, np.inf, t)
    rng = np.random.default_rng(seed)
    keep = np.isfinite(t) & (rng.random(len(t)) >= dropout)
    pts = o + dirs[keep] * t[keep][:, None]
    return LabeledCloud(pts, track_id, timestamp)


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    n_frames: int = 5
    distance: float = 20.0  # m along the optical axis
    lateral: float = 0.0  # m, start offset along global x
    speed: float = 1.4
    heading: tuple = (1.0, 0.0, 0.0)
    frame_interval: float = 0.1
    noise_px: float = 0.0
    occlusion: object = None  # None, "legs" or keypoint names
    angular_resolution: float = 0.2
    dropout: float = 0.0
    occluder: bool = False  # parked-car box between sensor and pedestrian
    occluder_offset: float | None = None  # m along global x from the start to the car's near end; None centres it
    shape: tuple | None = None

    def __post_init__(self):
        if not 1.0 <= self.distance <= 100.0:
            raise ValueError("distance must lie in [1, 100] m")
        if self.n_frames < 1:
            raise ValueError("n_frames must be positive")


@dataclass
class Scene:
    gt: list  # BodyParams per frame
    timestamps: np.ndarray
    frames: list  # FrameObservation per frame
    spec: SceneSpec = field(default_factory=SceneSpec)


def car_box(distance, lateral=0.0, offset=None):
    """A 5 m parked car ~3 m in front of the pedestrian, tall enough to hide
    the lower legs. It is centred on ``lateral`` or, given ``offset``, starts
    ``offset`` m further along +x, so a pedestrian walking that way passes
    behind it."""
    z = distance - 3.0
    x0 = lateral - 2.5 if offset is None else lateral + offset
    return Box((x0, 0.0, z - 0.9), (x0 + 5.0, 0.9, z + 0.9))


def make_scene(spec, template=None, rig=None, seed=0, track_id=0):
    template = default_template() if template is None else template
    rig = StereoRig.default() if rig is None else rig
    rng = np.random.default_rng(seed)
    sub = rng.integers(0, 2**31, size=3 * spec.n_frames + 1)
    start = (spec.lateral, PELVIS_HEIGHT, spec.distance)
    gt, ts = gen_walk_sequence(template, spec.n_frames, spec.speed, spec.heading, start, int(sub[0]),
                               spec.frame_interval, spec.shape)
    boxes = (car_box(spec.distance, spec.lateral, spec.occluder_offset),) if spec.occluder else ()
    frames = []
    for k, (p, t) in enumerate(zip(gt, ts)):
        cloud = simulate_lidar(p, template, rig.lidar_origin, spec.angular_resolution, spec.dropout,
                               int(sub[1 + 3 * k]), boxes, float(t), track_id)
        frames.append(render_observation(p, template, rig, spec.noise_px, spec.occlusion, int(sub[2 + 3 * k]),
                                         float(t), track_id, k, cloud, boxes))
    return Scene(gt, ts, frames, spec)


# ---------------------------------------------------------------------------
# Prior training corpus
# ---------------------------------------------------------------------------

def motion_corpus(template, n_sequences=1000, n_frames=12, seed=0, frame_interval=MOCAP_INTERVAL):
    """Varied walking sequences sampled at the mocap-like interval."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sequences):
        ang = rng.uniform(0, 2 * np.pi)
        heading = (np.cos(ang), 0.0, np.sin(ang))
        speed = rng.uniform(0.0, 2.0)
        seq, ts = gen_walk_sequence(template, n_frames, speed, heading, (0.0, PELVIS_HEIGHT, 0.0),
                                    int(rng.integers(2**31)), frame_interval)
        out.append((seq, ts))
    return out


def train_priors(corpus, pose_components=8, temporal_components=10, seed=0, target_interval=MOCAP_INTERVAL):
    poses = np.concatenate([[p.pose[3:] for p in seq] for seq, _ in corpus])
    deltas = np.concatenate([pose_deltas(seq, ts, target_interval) for seq, ts in corpus])
    pose = fit_gmm(poses, pose_components, seed=seed)
    temporal = fit_gmm(deltas, temporal_components, seed=seed, frame_interval=target_interval)
    return Priors(pose, temporal)


@lru_cache(maxsize=4)
def default_priors(seed=0):
    """Priors trained on the synthetic walking corpus of the default template (cached)."""
    return train_priors(motion_corpus(default_template(), seed=seed), seed=seed)
