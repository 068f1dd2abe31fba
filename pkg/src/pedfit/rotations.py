"""Axis-angle helpers shared by the body model, energies and initialisation."""
from __future__ import annotations

import numpy as np

# Below this angle the closed forms lose precision; use Taylor series instead.
_SMALL = 1e-6


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _coefficients(theta2):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) for t^2 = theta2."""
    theta2 = np.asarray(theta2, dtype=float)
    small = theta2 < _SMALL * _SMALL
    theta = np.sqrt(np.where(small, 1.0, theta2))
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / theta)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - np.sin(theta)) / (theta * np.where(small, 1.0, theta2)))
    return a, b, c


def _skew_batch(w):
    k = np.zeros(w.shape[:-1] + (3, 3))
    k[..., 0, 1] = -w[..., 2]
    k[..., 0, 2] = w[..., 1]
    k[..., 1, 0] = w[..., 2]
    k[..., 1, 2] = -w[..., 0]
    k[..., 2, 0] = -w[..., 1]
    k[..., 2, 1] = w[..., 0]
    return k


def rodrigues(w):
    """Rotation matrix (or stack of matrices) for axis-angle vector(s) ``w``."""
    w = np.asarray(w, dtype=float)
    a, b, _ = _coefficients(np.sum(w * w, axis=-1))
    k = _skew_batch(w)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def left_jacobian(w):
    """SO(3) left Jacobian: d exp([w]) / dw = [J_l(w) dw] exp([w])."""
    w = np.asarray(w, dtype=float)
    _, b, c = _coefficients(np.sum(w * w, axis=-1))
    k = _skew_batch(w)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + b[..., None, None] * k + c[..., None, None] * (k @ k)


def matrix_to_axis_angle(R):
    """Inverse of :func:`rodrigues` for a single rotation matrix."""
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-9:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; read the axis off R + I.
        m = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(m)))
        axis = m[:, i] / np.sqrt(m[i, i])
        return axis / np.linalg.norm(axis) * theta
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return axis / (2.0 * np.sin(theta)) * theta


def yaw_to(forward, heading, up):
    """Axis-angle of the rotation about ``up`` that turns ``forward`` onto ``heading``.

    Both vectors are projected onto the plane orthogonal to ``up`` first.
    """
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)
    f = np.asarray(forward, dtype=float)
    h = np.asarray(heading, dtype=float)
    f = f - up * (f @ up)
    h = h - up * (h @ up)
    nf, nh = np.linalg.norm(f), np.linalg.norm(h)
    if nf < 1e-12 or nh < 1e-12:
        raise ValueError("forward and heading must have a horizontal component")
    f, h = f / nf, h / nh
    angle = np.arctan2(np.cross(f, h) @ up, f @ h)
    return up * angle
