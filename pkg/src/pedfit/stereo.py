"""Rectified stereo pair with a LiDAR extrinsic.

Camera frame convention: x right, y down, z along the optical axis. The
right camera sits ``baseline`` metres along the left camera's +x axis.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

RIG_FORMAT = "pedfit-rig/1"


@dataclass(frozen=True, eq=False)
class Rigid:
    """x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rigid transform needs a 3x3 rotation and a 3-vector")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det = +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, x):
        return np.asarray(x, dtype=float) @ self.rotation.T + self.translation

    def inverse(self):
        return Rigid(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """self after other."""
        return Rigid(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass(frozen=True, eq=False)
class StereoRig:
    focal: float  # px
    principal_point: tuple  # (cx, cy) px, shared by both rectified images
    baseline: float  # m
    image_size: tuple  # (width, height) px
    cam_to_global: Rigid
    lidar_to_cam: Rigid

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")

    @classmethod
    def default(cls):
        """Level rig 1.6 m above the ground, looking along global +z (global y is up)."""
        return cls(
            focal=1000.0,
            principal_point=(960.0, 600.0),
            baseline=0.5,
            image_size=(1920, 1200),
            cam_to_global=Rigid(np.diag([-1.0, -1.0, 1.0]), np.array([0.0, 1.6, 0.0])),
            lidar_to_cam=Rigid(np.eye(3), np.array([0.0, -0.3, 0.0])),
        )

    @property
    def global_to_cam(self):
        return self.cam_to_global.inverse()

    @property
    def lidar_to_global(self):
        return self.cam_to_global.compose(self.lidar_to_cam)

    @property
    def lidar_origin(self):
        """LiDAR sensor centre in the global frame."""
        return self.lidar_to_global.translation.copy()

    def camera_center(self, side="left"):
        """Optical centre of the chosen camera in the global frame."""
        offset = {"left": 0.0, "right": self.baseline}
        if side not in offset:
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
        return self.cam_to_global.apply(np.array([offset[side], 0.0, 0.0]))

    def camera_points(self, points, side="left"):
        """Global points expressed in the chosen camera's frame."""
        xc = self.global_to_cam.apply(points)
        if side == "right":
            xc = xc - np.array([self.baseline, 0.0, 0.0])
        elif side != "left":
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
        return xc


def project(rig, points, side="left"):
    """Pinhole projection of global point(s).

    Returns (pixels, in_front); ``in_front`` is False where depth <= 0 (the
    pixel value is then meaningless).
    """
    pts = np.asarray(points, dtype=float)
    xc = rig.camera_points(pts, side)
    z = xc[..., 2]
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    cx, cy = rig.principal_point
    uv = np.stack([rig.focal * xc[..., 0] / zs + cx, rig.focal * xc[..., 1] / zs + cy], axis=-1)
    return uv, in_front


def projection_jacobian(rig, points, side="left"):
    """d(pixel)/d(global point), shape (..., 2, 3)."""
    xc = rig.camera_points(np.asarray(points, dtype=float), side)
    z = xc[..., 2]
    zs = np.where(z > 0, z, 1.0)
    f = rig.focal
    J = np.zeros(xc.shape[:-1] + (2, 3))
    J[..., 0, 0] = f / zs
    J[..., 0, 2] = -f * xc[..., 0] / zs ** 2
    J[..., 1, 1] = f / zs
    J[..., 1, 2] = -f * xc[..., 1] / zs ** 2
    return J @ rig.global_to_cam.rotation


def depth_from_disparity(rig, disparity):
    d = np.asarray(disparity, dtype=float)
    if np.any(~(d > 0)):
        raise ValueError("disparity must be positive")
    return rig.focal * rig.baseline / d


def backproject(rig, pixels, depth):
    """Global point(s) at camera depth ``depth`` along the left-image ray."""
    px = np.asarray(pixels, dtype=float)
    z = np.asarray(depth, dtype=float)
    cx, cy = rig.principal_point
    xc = np.stack([(px[..., 0] - cx) * z / rig.focal, (px[..., 1] - cy) * z / rig.focal, z * np.ones_like(px[..., 0])], axis=-1)
    return rig.cam_to_global.apply(xc)


def triangulate(rig, left_px, right_px):
    """Rectified triangulation; rows are averaged (least squares for a rectified pair)."""
    lp = np.asarray(left_px, dtype=float)
    rp = np.asarray(right_px, dtype=float)
    disparity = lp[..., 0] - rp[..., 0]
    if np.any(~(disparity > 0)):
        raise ValueError("nonpositive disparity: cannot triangulate")
    z = depth_from_disparity(rig, disparity)
    row = 0.5 * (lp[..., 1] + rp[..., 1])
    return backproject(rig, np.stack([lp[..., 0], row], axis=-1), z)


def rig_to_dict(rig):
    return {
        "format": RIG_FORMAT,
        "focal_px": rig.focal,
        "principal_point_px": list(rig.principal_point),
        "baseline_m": rig.baseline,
        "image_size_px": list(rig.image_size),
        "cam_to_global": {"rotation": rig.cam_to_global.rotation.tolist(),
                          "translation_m": rig.cam_to_global.translation.tolist()},
        "lidar_to_cam": {"rotation": rig.lidar_to_cam.rotation.tolist(),
                         "translation_m": rig.lidar_to_cam.translation.tolist()},
    }


def rig_from_dict(d):
    if d.get("format") != RIG_FORMAT:
        raise ValueError(f"unsupported rig format {d.get('format')!r}")
    return StereoRig(
        focal=float(d["focal_px"]),
        principal_point=tuple(float(v) for v in d["principal_point_px"]),
        baseline=float(d["baseline_m"]),
        image_size=tuple(int(v) for v in d["image_size_px"]),
        cam_to_global=Rigid(np.array(d["cam_to_global"]["rotation"]), np.array(d["cam_to_global"]["translation_m"])),
        lidar_to_cam=Rigid(np.array(d["lidar_to_cam"]["rotation"]), np.array(d["lidar_to_cam"]["translation_m"])),
    )


def load_rig(path):
    with open(path) as f:
        return rig_from_dict(json.load(f))


def save_rig(rig, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(rig_to_dict(rig), f, indent=1)
    os.replace(tmp, path)
