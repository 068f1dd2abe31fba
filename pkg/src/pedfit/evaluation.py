"""MPJPE metrics, the three non-fitting baselines and the energy-term ablation."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .body_model import KEYPOINT_NAMES, TORSO_KEYPOINTS, BodyParams, forward_kinematics
from .energies import EnergyWeights, FrameObservation
from .pointcloud import LabeledCloud
from .solver import FitError, SolverConfig, _free_root, _minimize, estimate_headings, fit_frame, fit_sequence
from .stereo import backproject, depth_from_disparity, project, triangulate

# evaluation joints, in the column order of the result tables
TABLE_JOINTS = ("rknee", "lknee", "rankl", "lankl", "rsho", "lsho", "relb", "lelb",
                "rwri", "lwri", "head", "neck", "hip")
_TABLE_IDX = np.array([KEYPOINT_NAMES.index(n) for n in TABLE_JOINTS])

ABLATION_TERMS = ("E_J_l", "E_J_r", "E_T", "E_3D", "E_tp")
# rows of the energy-term ablation, in table order
ABLATION_ROWS = (
    frozenset({"E_J_l", "E_J_r"}),
    frozenset({"E_J_l", "E_J_r", "E_T"}),
    frozenset({"E_J_l", "E_J_r", "E_T", "E_tp"}),
    frozenset({"E_J_l", "E_J_r", "E_T", "E_3D"}),
    frozenset({"E_J_l", "E_T", "E_3D", "E_tp"}),
    frozenset({"E_J_l", "E_J_r", "E_T", "E_3D", "E_tp"}),
)


class MetricError(ValueError):
    pass


@dataclass
class JointSeries:
    """Per-frame 3D joints (m, global frame) with per-joint validity."""

    positions: np.ndarray  # (F, J, 3)
    valid: np.ndarray  # (F, J) bool
    names: tuple = TABLE_JOINTS

    def __post_init__(self):
        self.names = tuple(self.names)
        self.positions = np.asarray(self.positions, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        F = len(self.positions)
        J = len(self.names)
        if self.positions.shape != (F, J, 3) or self.valid.shape != (F, J):
            raise ValueError(f"expected positions (F, {J}, 3) and validity (F, {J})")
        if len(set(self.names)) != J:
            raise ValueError("duplicate joint names")
        if np.any(~np.isfinite(self.positions[self.valid])):
            raise ValueError("valid joints must be finite")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_keypoints(cls, keypoints, valid=None):
        """Select the table joints from (F, 18, 3) annotation-ordered keypoints."""
        kp = np.asarray(keypoints, dtype=float)
        v = np.ones(kp.shape[:2], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        pos = kp[:, _TABLE_IDX]
        ok = v[:, _TABLE_IDX]
        return cls(np.where(ok[..., None], pos, 0.0), ok)

    @classmethod
    def from_params(cls, params, template, valid=None):
        kp = np.array([forward_kinematics(template, p).keypoints3d for p in params])
        return cls.from_keypoints(kp, valid)

    def concat(self, other):
        if other.names != self.names:
            raise ValueError("joint sets differ")
        return JointSeries(np.concatenate([self.positions, other.positions]),
                           np.concatenate([self.valid, other.valid]), self.names)


def labelled(frames):
    """(F, 18) mask of keypoints annotated (degree >= 1) in at least one image."""
    return np.array([(f.visibility_left > 0) | (f.visibility_right > 0) for f in frames])


@dataclass
class Mpjpe:
    names: tuple
    per_joint: np.ndarray  # mm, nan where a joint never counted
    counts: np.ndarray  # frames in which each joint was valid in both series
    mean: float  # mm, count-weighted

    def as_dict(self):
        out = {n: float(v) for n, v in zip(self.names, self.per_joint)}
        out["mean"] = self.mean
        return out


def _aggregate(names, err, mask):
    counts = mask.sum(axis=0)
    if counts.sum() == 0:
        raise MetricError("no overlapping valid joints")
    sums = np.where(mask, err, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    mean = float(sums.sum() / counts.sum())
    return Mpjpe(names, 1000.0 * per, counts, 1000.0 * mean)


def _check_pair(pred, gt):
    if pred.names != gt.names:
        raise MetricError(f"joint sets differ: {pred.names} vs {gt.names}")
    if len(pred) != len(gt):
        raise MetricError(f"frame counts differ: {len(pred)} vs {len(gt)}")


def mpjpe_global(pred, gt):
    """Per-joint and weighted mean error (mm) with no registration."""
    _check_pair(pred, gt)
    mask = pred.valid & gt.valid
    err = np.linalg.norm(pred.positions - gt.positions, axis=-1)
    return _aggregate(gt.names, err, mask)


def similarity_align(X, Y):
    """Least-squares (s, R, t) with det R = +1 minimising ||Y - (s R X + t)||."""
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var = np.sum(Xc * Xc) / len(X)
    U, S, Vt = np.linalg.svd(Yc.T @ Xc / len(X))
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[-1] = -1.0
    R = U @ np.diag(D) @ Vt
    s = float(np.sum(S * D) / var) if var > 0 else 1.0
    return s, R, my - s * R @ mx


def mpjpe_relative(pred, gt):
    """Error (mm) after a per-frame similarity registration of pred onto gt.

    Frames with fewer than three mutually valid joints are skipped with a
    warning.
    """
    _check_pair(pred, gt)
    mask = pred.valid & gt.valid
    err = np.zeros(mask.shape)
    skipped = []
    for f in range(len(gt)):
        m = mask[f]
        if np.count_nonzero(m) < 3:
            if np.any(m):
                skipped.append(f)
            mask[f] = False
            continue
        s, R, t = similarity_align(pred.positions[f, m], gt.positions[f, m])
        aligned = s * pred.positions[f] @ R.T + t
        err[f] = np.linalg.norm(aligned - gt.positions[f], axis=-1)
    if skipped:
        warnings.warn(f"skipped {len(skipped)} frame(s) with fewer than 3 valid joints: {skipped}",
                      RuntimeWarning, stacklevel=2)
    return _aggregate(gt.names, err, mask)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _triangulated_keypoints(obs, rig):
    vl, vr = obs.visibility_left > 0, obs.visibility_right > 0
    ok = vl & vr & (obs.joints2d_left[:, 0] > obs.joints2d_right[:, 0])
    pts = np.zeros((len(ok), 3))
    if np.any(ok):
        pts[ok] = triangulate(rig, obs.joints2d_left[ok], obs.joints2d_right[ok])
    return pts, ok


def baseline_triangulation(frames, rig):
    """Triangulate every keypoint labelled in both images."""
    out = [_triangulated_keypoints(f, rig) for f in frames]
    return JointSeries.from_keypoints(np.array([o[0] for o in out]), np.array([o[1] for o in out]))


def synthetic_disparities(gt_params, template, rig, noise_px=1.5, seed=0):
    """(F, 18) true keypoint disparities plus Gaussian noise, standing in for a
    stereo matcher's disparity map."""
    rng = np.random.default_rng(seed)
    out = []
    for p in gt_params:
        kp = forward_kinematics(template, p).keypoints3d
        d = rig.focal * rig.baseline / rig.camera_points(kp, "left")[:, 2]
        out.append(d + rng.normal(0.0, noise_px, d.shape))
    return np.array(out)


def baseline_left_disp(frames, rig, disparities):
    """Back-project left keypoints at their disparity depth; keypoints not
    labelled in the left image (or with nonpositive disparity) fall back to
    triangulation."""
    disp = np.asarray(disparities, dtype=float)
    if disp.shape != (len(frames), len(KEYPOINT_NAMES)):
        raise ValueError("need one disparity per frame and keypoint")
    pos, valid = [], []
    for f, d in zip(frames, disp):
        pts, ok = _triangulated_keypoints(f, rig)
        use = (f.visibility_left > 0) & (d > 0)
        if np.any(use):
            pts[use] = backproject(rig, f.joints2d_left[use], depth_from_disparity(rig, d[use]))
        pos.append(pts)
        valid.append(ok | use)
    return JointSeries.from_keypoints(np.array(pos), np.array(valid))


def mean_disparity(obs, disparity):
    """Mean disparity over keypoints labelled in the left image (None if none are)."""
    use = (obs.visibility_left > 0) & np.isfinite(disparity)
    return float(np.mean(disparity[use])) if np.any(use) else None


def _monocular_view(obs):
    n = len(KEYPOINT_NAMES)
    return FrameObservation(obs.joints2d_left, np.zeros((n, 2)), obs.visibility_left, np.zeros(n, dtype=int),
                            {}, LabeledCloud(np.zeros((0, 3))), None, obs.timestamp, obs.track_id, obs.frame_id)


def monocular_fit(obs, rig, priors, template, w_P=1.0, config=None):
    """Left-image-only fit under E_J and E_P.

    Depth is guessed from the torso's pixel length (neck to hip) relative to
    the template's, then root yaw is chosen from four restarts on the torso
    keypoints before the full fit.
    """
    mono = _monocular_view(obs)
    weights = EnergyWeights(w_J=1.0, w_3d=0.0, w_P=w_P, w_T=0.0, w_D=0.0, w_tp=0.0, use_right=False)
    config = SolverConfig() if config is None else config
    idx = template.keypoint_index(("neck", "hip"))
    if np.any(mono.visibility_left[idx] == 0):
        raise FitError("monocular fit needs the neck and hip keypoints")
    uv = mono.joints2d_left[idx]
    body0 = forward_kinematics(template, BodyParams.zeros(template.n_shape))
    length3d = np.linalg.norm(body0.keypoints3d[idx[0]] - body0.keypoints3d[idx[1]])
    length2d = max(float(np.linalg.norm(uv[0] - uv[1])), 1.0)
    depth = rig.focal * length3d / length2d
    base = BodyParams.zeros(template.n_shape)
    base.translation = backproject(rig, uv[1], depth) - body0.keypoints3d[idx[1]]
    torso = template.keypoint_index(TORSO_KEYPOINTS)
    best = None
    for yaw in (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi):
        p = base.copy()
        p.pose[:3] = template.up_axis * yaw
        out, e, _ = _minimize(p, mono, rig, priors, weights, template, config, _free_root(template),
                              active=("J_left",), subset=torso)
        if best is None or e < best[1]:
            best = (out, e)
    fitted, _ = fit_frame(mono, rig, priors, weights, best[0], template, stages=(2,), config=config)
    return fitted


def baseline_monofit_disp(frames, rig, priors, template, disparities, w_P=1.0, config=None):
    """Monocular fits placed rigidly at the depth implied by the mean disparity.

    The fitted body is translated along the viewing ray through its visible
    keypoints' centroid so that the centroid's depth equals focal * baseline /
    mean disparity; the left-image projection of that centroid is unchanged.
    """
    disp = np.asarray(disparities, dtype=float)
    pos, valid = [], []
    for f, d in zip(frames, disp):
        md = mean_disparity(f, d)
        try:
            if md is None or md <= 0:
                raise FitError("no usable disparity")
            p = monocular_fit(f, rig, priors, template, w_P, config)
        except FitError:
            pos.append(np.zeros((len(KEYPOINT_NAMES), 3)))
            valid.append(np.zeros(len(KEYPOINT_NAMES), dtype=bool))
            continue
        kp = forward_kinematics(template, p).keypoints3d
        use = f.visibility_left > 0
        xc = rig.camera_points(kp, "left")
        c = xc[use].mean(axis=0)
        shift = (depth_from_disparity(rig, md) / c[2] - 1.0) * c
        pos.append(rig.cam_to_global.apply(xc + shift))
        valid.append(np.ones(len(KEYPOINT_NAMES), dtype=bool))
    return JointSeries.from_keypoints(np.array(pos), np.array(valid))


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def ablation_weights(base, mask):
    """Copy of ``base`` with the terms outside ``mask`` switched off."""
    mask = frozenset(mask)
    unknown = mask - set(ABLATION_TERMS)
    if unknown:
        raise ValueError(f"unknown ablation terms: {sorted(unknown)}")
    if not mask & {"E_J_l", "E_J_r"}:
        raise ValueError("an ablation row needs at least one reprojection term")
    w = base.scaled(1.0)
    w.use_left = "E_J_l" in mask
    w.use_right = "E_J_r" in mask
    if "E_T" not in mask:
        w.w_T = 0.0
    if "E_3D" not in mask:
        w.w_3d = 0.0
    if "E_tp" not in mask:
        w.w_tp = 0.0
    return w


def _without_lidar(frames):
    # rows with no LiDAR term do not see the points at all (not even for the
    # initial translation); the heading stays, it is part of preprocessing
    out = []
    for f in frames:
        g = FrameObservation(f.joints2d_left, f.joints2d_right, f.visibility_left, f.visibility_right,
                             f.masks, LabeledCloud(np.zeros((0, 3)), f.track_id, f.timestamp), f.heading,
                             f.timestamp, f.track_id, f.frame_id)
        out.append(g)
    return out


def fit_masked(frames, rig, priors, template, base_weights, mask, admm=None, config=None):
    """Sequence fit using only the terms in ``mask``; returns FitResult."""
    weights = ablation_weights(base_weights, mask)
    frames = estimate_headings([_copy_obs(f) for f in frames], template.up_axis)
    if not frozenset(mask) & {"E_T", "E_3D"}:
        frames = _without_lidar(frames)
    return fit_sequence(frames, rig, priors, weights, template, admm=admm, config=config, auto_heading=False)


def _copy_obs(f):
    return FrameObservation(f.joints2d_left, f.joints2d_right, f.visibility_left, f.visibility_right, f.masks,
                            f.cloud, f.heading, f.timestamp, f.track_id, f.frame_id)


@dataclass
class AblationRow:
    mask: frozenset
    relative: Mpjpe
    global_: Mpjpe


def run_ablation(frames, rig, priors, template, gt, base_weights, masks=ABLATION_ROWS, admm=None, config=None):
    """Fit the sequence once per term mask and score it against ``gt``.

    ``frames`` may be one sequence or a list of sequences (``gt`` then a
    matching list of JointSeries); errors pool over all frames.
    """
    masks = [frozenset(m) for m in masks]
    if not masks:
        raise ValueError("no ablation rows given")
    for m in masks:
        ablation_weights(base_weights, m)  # validate every row up front
    seqs = [frames] if frames and isinstance(frames[0], FrameObservation) else list(frames)
    gts = [gt] if isinstance(gt, JointSeries) else list(gt)
    if len(seqs) != len(gts):
        raise ValueError("one ground-truth series per sequence")
    rows = []
    for m in masks:
        pred = None
        for seq in seqs:
            res = fit_masked(seq, rig, priors, template, base_weights, m, admm, config)
            s = JointSeries.from_params(res.params, template)
            pred = s if pred is None else pred.concat(s)
        truth = gts[0]
        for g in gts[1:]:
            truth = truth.concat(g)
        rows.append(AblationRow(m, mpjpe_relative(pred, truth), mpjpe_global(pred, truth)))
    return rows


ABLATION_COLUMNS = ("row",) + ABLATION_TERMS + TABLE_JOINTS + ("mean", "global")
METRIC_COLUMNS = ("frame_set",) + TABLE_JOINTS + ("mean",)


def _fmt(v):
    return "" if not np.isfinite(v) else f"{v:.3f}"


def ablation_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for i, r in enumerate(rows, 1):
        w.writerow([i] + [int(t in r.mask) for t in ABLATION_TERMS]
                   + [_fmt(v) for v in r.relative.per_joint] + [_fmt(r.relative.mean), _fmt(r.global_.mean)])
    return buf.getvalue()


def metrics_csv(results):
    """``results`` maps a label (e.g. "global", "relative") to an Mpjpe."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for label, m in results.items():
        w.writerow([label] + [_fmt(v) for v in m.per_joint] + [_fmt(m.mean)])
    return buf.getvalue()


def project_series(series, rig, side="left"):
    """(F, J, 2) pixel coordinates of a series (overlay helper)."""
    uv, _ = project(rig, series.positions, side)
    return uv
