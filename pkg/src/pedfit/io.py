"""File formats: annotations, motion sequences, joint series, results and run configuration.

All files are UTF-8 JSON (or JSON lines). Floats are written with Python's
shortest round-trip repr, so a load/save cycle is bit-exact. Every writer
goes through :func:`atomic_write` (temp file + rename).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .body_model import KEYPOINT_NAMES, BodyParams
from .energies import EnergyWeights, FrameObservation
from .evaluation import JointSeries
from .pointcloud import LabeledCloud, read_cloud
from .solver import AdmmConfig, SolverConfig
from .stereo import load_rig

ANNOTATION_FORMAT = "pedfit-annotation/1"
MOTION_FORMAT = "pedfit-motion/1"
JOINTS_FORMAT = "pedfit-joints/1"
RESULTS_FORMAT = "pedfit-results/1"
N_KEYPOINTS = len(KEYPOINT_NAMES)


class SchemaError(ValueError):
    pass


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _jsonl(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def _segments_cross(p, q, r, s):
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    return orient(p, q, r) * orient(p, q, s) < 0 and orient(r, s, p) * orient(r, s, q) < 0


def polygon_is_simple(poly):
    """True when no two non-adjacent edges properly cross."""
    P = np.asarray(poly, dtype=float).reshape(-1, 2)
    n = len(P)
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(P[i], P[(i + 1) % n], P[j], P[(j + 1) % n]):
                return False
    return True


def _side_record(obs, side):
    uv = obs.joints2d(side)
    vis = obs.visibility(side)
    poly = np.asarray(obs.masks.get(side, np.zeros((0, 2))), dtype=float).reshape(-1, 2)
    return {
        "keypoints": [[float(u), float(v), int(d)] for (u, v), d in zip(uv, vis)],
        "polygon": poly.tolist(),
    }


def annotation_record(obs, cloud_ref):
    return {
        "format": ANNOTATION_FORMAT,
        "frame_id": int(obs.frame_id),
        "track_id": obs.track_id,
        "timestamp": float(obs.timestamp),
        "left": _side_record(obs, "left"),
        "right": _side_record(obs, "right"),
        "cloud": cloud_ref,
    }


def _parse_side(rec, side, where):
    s = rec.get(side)
    if not isinstance(s, dict):
        raise SchemaError(f"{where}: missing '{side}' object")
    extra = set(s) - {"keypoints", "polygon"}
    if extra:
        raise SchemaError(f"{where}: unknown field(s) in '{side}': {sorted(extra)}")
    kps = s.get("keypoints")
    if not isinstance(kps, list) or len(kps) != N_KEYPOINTS:
        n = len(kps) if isinstance(kps, list) else "no"
        raise SchemaError(f"{where}: '{side}.keypoints' needs {N_KEYPOINTS} entries, got {n}")
    try:
        arr = np.array(kps, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: '{side}.keypoints' entries must be [x, y, visibility]") from None
    if arr.shape != (N_KEYPOINTS, 3):
        raise SchemaError(f"{where}: '{side}.keypoints' entries must be [x, y, visibility]")
    vis = arr[:, 2]
    if np.any(~np.isin(vis, (0, 1, 2))):
        raise SchemaError(f"{where}: '{side}' visibility degrees must be 0, 1 or 2")
    poly = np.array(s.get("polygon", []), dtype=float).reshape(-1, 2) if s.get("polygon") else np.zeros((0, 2))
    if len(poly) and (len(poly) < 3 or not polygon_is_simple(poly)):
        raise SchemaError(f"{where}: '{side}.polygon' must be a simple polygon with >= 3 vertices")
    return arr[:, :2], vis.astype(np.int64), poly


_RECORD_FIELDS = {"format", "frame_id", "track_id", "timestamp", "left", "right", "cloud"}


def parse_annotation(rec, where, cloud_dir=None):
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: record must be a JSON object")
    if rec.get("format", ANNOTATION_FORMAT) != ANNOTATION_FORMAT:
        raise SchemaError(f"{where}: unsupported format {rec.get('format')!r}")
    extra = set(rec) - _RECORD_FIELDS
    if extra:
        raise SchemaError(f"{where}: unknown field(s) {sorted(extra)}")
    for key in ("frame_id", "track_id", "timestamp"):
        if key not in rec:
            raise SchemaError(f"{where}: missing '{key}'")
    if not isinstance(rec["track_id"], (int, str)) or isinstance(rec["track_id"], bool):
        raise SchemaError(f"{where}: 'track_id' must be an integer or string")
    try:
        ts = float(rec["timestamp"])
        frame_id = int(rec["frame_id"])
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: bad 'timestamp' or 'frame_id'") from None
    uv_l, vis_l, poly_l = _parse_side(rec, "left", where)
    uv_r, vis_r, poly_r = _parse_side(rec, "right", where)
    cloud = LabeledCloud(np.zeros((0, 3)), rec["track_id"], ts)
    ref = rec.get("cloud")
    if ref is not None:
        path = Path(ref) if cloud_dir is None else Path(cloud_dir) / ref
        if not path.exists():
            raise SchemaError(f"{where}: cloud file not found: {path}")
        cloud = LabeledCloud(read_cloud(str(path)), rec["track_id"], ts)
    masks = {k: v for k, v in (("left", poly_l), ("right", poly_r)) if len(v)}
    try:
        return FrameObservation(uv_l, uv_r, vis_l, vis_r, masks, cloud, None, ts, rec["track_id"], frame_id)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def load_annotations(path, cloud_dir=None):
    """Observations grouped by track id (first-appearance order).

    Within a track, records must appear in strictly increasing timestamp
    order; anything else is reported with its line number.
    """
    groups = {}
    for lineno, rec in _jsonl(path):
        obs = parse_annotation(rec, f"{path}:{lineno}", cloud_dir)
        frames = groups.setdefault(obs.track_id, [])
        if frames and not obs.timestamp > frames[-1].timestamp:
            raise SchemaError(f"{path}:{lineno}: timestamp {obs.timestamp!r} does not increase "
                              f"within track {obs.track_id!r}")
        frames.append(obs)
    return groups


def load_sequence(annotation_path, cloud_dir, rig_path):
    """(track id -> time-ordered FrameObservation list, StereoRig)."""
    rig = load_rig(rig_path)
    return load_annotations(annotation_path, cloud_dir), rig


def save_annotations(frames, path, cloud_refs):
    atomic_write(path, "".join(_dumps(annotation_record(f, r)) + "\n" for f, r in zip(frames, cloud_refs)))


# ---------------------------------------------------------------------------
# Motion sequences (ground truth and prior training data)
# ---------------------------------------------------------------------------

def motion_record(params, timestamp, sequence=0, frame_id=0):
    return {
        "format": MOTION_FORMAT,
        "sequence": sequence,
        "frame_id": int(frame_id),
        "timestamp": float(timestamp),
        "pose": params.pose.tolist(),
        "shape": params.shape.tolist(),
        "translation": params.translation.tolist(),
    }


def save_motion(sequences, path):
    """``sequences``: list of (sequence id, BodyParams list, timestamps)."""
    lines = []
    for sid, params, ts in sequences:
        lines += [_dumps(motion_record(p, t, sid, k)) + "\n" for k, (p, t) in enumerate(zip(params, ts))]
    atomic_write(path, "".join(lines))


def load_motion(path):
    """List of (sequence id, BodyParams list, timestamps) in file order."""
    seqs = {}
    for lineno, rec in _jsonl(path):
        where = f"{path}:{lineno}"
        if not isinstance(rec, dict) or rec.get("format") != MOTION_FORMAT:
            raise SchemaError(f"{where}: not a {MOTION_FORMAT} record")
        try:
            p = BodyParams(np.array(rec["pose"], dtype=float), np.array(rec["shape"], dtype=float),
                           np.array(rec["translation"], dtype=float))
            ts = float(rec["timestamp"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from None
        seqs.setdefault(rec.get("sequence", 0), ([], []))
        seqs[rec.get("sequence", 0)][0].append(p)
        seqs[rec.get("sequence", 0)][1].append(ts)
    return [(sid, ps, np.array(ts)) for sid, (ps, ts) in seqs.items()]


# ---------------------------------------------------------------------------
# Joint series
# ---------------------------------------------------------------------------

def joints_to_dict(series, frame_ids=None):
    frame_ids = list(range(len(series))) if frame_ids is None else list(frame_ids)
    return {
        "format": JOINTS_FORMAT,
        "names": list(series.names),
        "frames": [{"frame_id": int(fid), "positions": pos.tolist(), "valid": v.tolist()}
                   for fid, pos, v in zip(frame_ids, series.positions, series.valid)],
    }


def save_joints(series, path, frame_ids=None):
    atomic_write(path, json.dumps(joints_to_dict(series, frame_ids), indent=1) + "\n")


def load_joints(path):
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    if d.get("format") != JOINTS_FORMAT:
        raise SchemaError(f"{path}: not a {JOINTS_FORMAT} file")
    names = tuple(d["names"])
    frames = d["frames"]
    pos = np.array([fr["positions"] for fr in frames], dtype=float).reshape(len(frames), len(names), 3)
    valid = np.array([fr["valid"] for fr in frames], dtype=bool).reshape(len(frames), len(names))
    return JointSeries(pos, valid, names)


# ---------------------------------------------------------------------------
# Fit results
# ---------------------------------------------------------------------------

def results_lines(track_id, frames, result, keypoints, overlays):
    """JSON lines: one sequence summary then one record per frame.

    Wall time is deliberately left out so that reruns are byte-identical.
    """
    head = {"format": RESULTS_FORMAT, "type": "sequence", "track_id": track_id, "status": result.status,
            "converged": bool(result.converged), "admm_iterations": int(result.admm_iterations),
            "inner_iterations": [int(i) for i in result.inner_iterations]}
    if result.admm is not None:
        head["consensus_shape"] = result.admm.consensus.tolist()
        head["primal_residuals"] = list(map(float, result.admm.primal_history))
        head["dual_residuals"] = list(map(float, result.admm.dual_history))
    out = [_dumps(head) + "\n"]
    for f, p, e, kp, ov in zip(frames, result.params, result.energies, keypoints, overlays):
        rec = motion_record(p, f.timestamp, track_id, f.frame_id)
        rec.update(format=RESULTS_FORMAT, type="frame", track_id=track_id, energies=e,
                   keypoints3d=np.asarray(kp).tolist(),
                   overlay={side: np.asarray(uv).tolist() for side, uv in ov.items()})
        rec.pop("sequence")
        out.append(_dumps(rec) + "\n")
    return out


def load_results(path):
    """(sequence summaries, frame records) from a results file."""
    heads, frames = [], []
    for lineno, rec in _jsonl(path):
        if rec.get("format") != RESULTS_FORMAT:
            raise SchemaError(f"{path}:{lineno}: not a {RESULTS_FORMAT} record")
        (heads if rec.get("type") == "sequence" else frames).append(rec)
    return heads, frames


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    n_frames: int = 5
    distance: float = 20.0
    lateral: float = 0.0
    speed: float = 1.4
    heading: list = field(default_factory=lambda: [1.0, 0.0, 0.0])
    frame_interval: float = 0.1
    noise_px: float = 0.0
    occlusion: object = None
    angular_resolution: float = 0.2
    dropout: float = 0.0
    occluder: bool = False
    occluder_offset: float | None = None
    n_scenes: int = 1


@dataclass
class PriorConfig:
    pose: str | None = None  # GMM file; None -> train on the synthetic corpus
    temporal: str | None = None
    pose_components: int = 8
    temporal_components: int = 10


@dataclass
class RunConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    priors: PriorConfig = field(default_factory=PriorConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig: str | None = None  # calibration file; None -> built-in default rig
    seed: int = 0
    samples_per_bone: int = 64
    disparity_noise_px: float = 1.5
    ablation_rows: list | None = None  # lists of term names; None -> the standard six rows


_SECTIONS = {"weights": EnergyWeights, "admm": AdmmConfig, "solver": SolverConfig,
             "priors": PriorConfig, "scene": SceneConfig}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise SchemaError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise SchemaError(f"{where}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from None


def config_from_dict(d, where="config"):
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: expected an object")
    unknown = set(d) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise SchemaError(f"{where}: unknown key(s) {sorted(unknown)}")
    kw = {}
    for key, value in d.items():
        if key in _SECTIONS:
            kw[key] = _build(_SECTIONS[key], value, f"{where}.{key}")
        else:
            kw[key] = value
    cfg = RunConfig(**kw)
    if not isinstance(cfg.seed, int) or cfg.samples_per_bone < 1 or cfg.disparity_noise_px < 0:
        raise SchemaError(f"{where}: seed must be an integer, samples_per_bone >= 1, disparity_noise_px >= 0")
    return cfg


def load_config(path):
    if not Path(path).is_file():
        raise SchemaError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from None
    cfg = config_from_dict(d, str(path))
    # relative paths inside the config resolve against its directory
    base = Path(path).parent
    if cfg.rig is not None:
        cfg.rig = str(base / cfg.rig)
    for attr in ("pose", "temporal"):
        v = getattr(cfg.priors, attr)
        if v is not None:
            setattr(cfg.priors, attr, str(base / v))
    return cfg


def config_to_dict(cfg):
    return asdict(cfg)
