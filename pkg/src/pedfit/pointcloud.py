"""LiDAR instance labeling, trajectories and nearest-neighbour queries."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .stereo import project

STATIONARY_DISPLACEMENT = 0.05  # m per sample interval


@dataclass
class LabeledCloud:
    points: np.ndarray  # (N, 3) m, global frame
    instance_id: object = None
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud contains non-finite points")

    def __len__(self):
        return len(self.points)


@dataclass
class Trajectory:
    timestamps: np.ndarray
    centroids: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.centroids = np.asarray(self.centroids, dtype=float).reshape(-1, 3)
        if len(self.timestamps) != len(self.centroids):
            raise ValueError("one centroid per timestamp")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_clouds(cls, clouds):
        return cls([c.timestamp for c in clouds], [centroid(c) for c in clouds])


def points_in_polygon(points, polygon):
    """Even-odd rule containment for (N, 2) points against a simple polygon."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    poly = np.asarray(polygon, dtype=float).reshape(-1, 2)
    if len(poly) < 3:
        return np.zeros(len(pts), dtype=bool)
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x0, y0 = poly[:, 0][None, :], poly[:, 1][None, :]
    x1, y1 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    straddles = (y0 > y) != (y1 > y)
    dy = np.where(y1 == y0, 1.0, y1 - y0)
    x_cross = x0 + (y - y0) * (x1 - x0) / dy
    return (np.count_nonzero(straddles & (x < x_cross), axis=1) % 2) == 1


def centroid(cloud):
    pts = cloud.points if isinstance(cloud, LabeledCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("centroid of an empty cloud")
    return pts.mean(axis=0)


def label_points(points, masks, rig, timestamp=0.0):
    """Assign raw LiDAR points (global frame) to instances via their left masks.

    ``masks`` maps instance id -> left-image polygon. A point belongs to an
    instance iff its left projection falls inside that polygon; points in
    several masks go to the instance whose provisional centroid (mean of the
    points inside its mask) is nearest; ties resolve to the first id in
    ``masks`` order. Points in no mask are dropped.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    ids = list(masks)
    if len(pts) == 0 or not ids:
        return {i: LabeledCloud(np.zeros((0, 3)), i, timestamp) for i in ids}
    uv, front = project(rig, pts, "left")
    inside = np.stack([points_in_polygon(uv, masks[i]) & front for i in ids], axis=1)
    owner = np.full(len(pts), -1)
    single = inside.sum(axis=1) == 1
    owner[single] = np.argmax(inside[single], axis=1)
    multi = np.flatnonzero(inside.sum(axis=1) > 1)
    if len(multi):
        cents = np.array([pts[inside[:, k]].mean(axis=0) for k in range(len(ids))])
        for n in multi:
            cand = np.flatnonzero(inside[n])
            d = np.sum((cents[cand] - pts[n]) ** 2, axis=1)
            owner[n] = cand[int(np.argmin(d))]
    return {i: LabeledCloud(pts[owner == k], i, timestamp) for k, i in enumerate(ids)}


def _smooth(c):
    """Centred 3-sample moving average; the end samples are kept as-is so the
    window stays symmetric (a one-sided window would bias the end headings)."""
    out = c.copy()
    if len(c) >= 3:
        out[1:-1] = (c[:-2] + c[1:-1] + c[2:]) / 3.0
    return out


def heading_direction(traj, frame_index, up=(0.0, 1.0, 0.0)):
    """Horizontal unit heading at ``frame_index``.

    Centroids are smoothed over a 3-frame window, then differenced (centred
    in the interior, one-sided at the ends). Returns ``(direction, False)``
    or ``(None, True)`` when the per-interval horizontal displacement is
    below 5 cm. Pedestrians are assumed never to walk backwards, so the
    direction is never negated.
    """
    n = len(traj.timestamps)
    if n < 2:
        raise ValueError("heading needs at least two trajectory samples")
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)
    c = _smooth(traj.centroids)
    i = int(frame_index)
    lo, hi = max(0, i - 1), min(n - 1, i + 1)
    if lo == hi:
        raise ValueError("frame index out of range")
    delta = c[hi] - c[lo]
    delta = delta - up * (delta @ up)
    norm = np.linalg.norm(delta)
    if norm / (hi - lo) < STATIONARY_DISPLACEMENT:
        return None, True
    return delta / norm, False


def nearest_model_point(query, surface):
    """Index and squared distance of the surface point nearest to ``query``."""
    surface = np.asarray(surface, dtype=float).reshape(-1, 3)
    if len(surface) == 0:
        raise ValueError("empty surface point set")
    q = np.asarray(query, dtype=float).reshape(-1, 3)
    idx, d2 = kernels.nearest_facing(q, surface, surface, np.zeros(3), False)
    if np.ndim(query) == 1:
        return int(idx[0]), float(d2[0])
    return idx, d2


# ---------------------------------------------------------------------------
# IO: ASCII PLY (x y z per vertex) or CSV (x,y,z per row), metres
# ---------------------------------------------------------------------------

def read_cloud(path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        with open(path) as f:
            if f.readline().strip() != "ply":
                raise ValueError(f"{path}: not a PLY file")
            n = None
            props = []
            for line in f:
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "format" and tok[1] != "ascii":
                    raise ValueError(f"{path}: only ASCII PLY is supported")
                if tok[:2] == ["element", "vertex"]:
                    n = int(tok[2])
                elif tok[0] == "property" and n is not None:
                    props.append(tok[-1])
                elif tok[0] == "end_header":
                    break
            if n is None or props[:3] != ["x", "y", "z"]:
                raise ValueError(f"{path}: expected vertex element with x, y, z properties")
            rows = [f.readline().split() for _ in range(n)]
        data = np.array([[float(v) for v in r[:3]] for r in rows], dtype=float).reshape(-1, 3)
        return data
    if ext == ".csv":
        rows = []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if lineno == 1 and parts[0].strip().lower() == "x":
                    continue
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected x,y,z")
                rows.append([float(p) for p in parts])
        return np.array(rows, dtype=float).reshape(-1, 3)
    raise ValueError(f"{path}: unknown point cloud extension {ext!r}")


def write_cloud(points, path):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    ext = os.path.splitext(path)[1].lower()
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        if ext == ".ply":
            f.write(f"ply\nformat ascii 1.0\nelement vertex {len(pts)}\n")
            f.write("property double x\nproperty double y\nproperty double z\nend_header\n")
        elif ext == ".csv":
            f.write("x,y,z\n")
        else:
            raise ValueError(f"{path}: unknown point cloud extension {ext!r}")
        sep = " " if ext == ".ply" else ","
        for p in pts:
            f.write(sep.join(repr(float(v)) for v in p) + "\n")
    os.replace(tmp, path)
