"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` one-for-one and are used when the compiled
module is unavailable or ``PEDFIT_PURE_PYTHON`` is set.
"""
from __future__ import annotations

import numpy as np

from .rotations import left_jacobian, rodrigues


def posed_chain(pose, offsets, parents, translation):
    """Compose the kinematic chain.

    Returns global rotations G (n, 3, 3), joint positions p (n, 3) and the
    gradient axes W (n, 3, 3) with ``W[k] = G[parent] @ J_l(pose[k])``.
    Requires ``parents[k] < k``.
    """
    pose = np.asarray(pose, dtype=float)
    n = len(parents)
    R = rodrigues(pose)
    Jl = left_jacobian(pose)
    G = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    W = np.empty((n, 3, 3))
    G[0] = R[0]
    W[0] = Jl[0]
    p[0] = translation + offsets[0]
    for k in range(1, n):
        q = parents[k]
        G[k] = G[q] @ R[k]
        W[k] = G[q] @ Jl[k]
        p[k] = p[q] + G[q] @ offsets[k]
    return G, p, W


def chain_gradient(attach, x, g, p, W, parents):
    """Back-propagate per-point gradients ``g`` through the chain.

    ``attach[i]`` is the joint whose frame point ``x[i]`` moves with.
    Returns (pose gradient (n, 3), subtree force sums (n, 3)).
    """
    n = len(parents)
    force = np.zeros((n, 3))
    torque = np.zeros((n, 3))
    if len(attach):
        force += np.stack([np.bincount(attach, weights=g[:, c], minlength=n) for c in range(3)], axis=1)
        tq = np.cross(x, g)
        torque += np.stack([np.bincount(attach, weights=tq[:, c], minlength=n) for c in range(3)], axis=1)
    for k in range(n - 1, 0, -1):
        q = parents[k]
        force[q] += force[k]
        torque[q] += torque[k]
    moment = torque - np.cross(p, force)
    grad = np.einsum("kab,ka->kb", W, moment)
    return grad, force


def nearest_facing(queries, points, normals, origin, use_facing):
    """Exact nearest neighbour of each query among ``points``.

    With ``use_facing``, only points whose normal has a nonnegative dot
    product with ``origin - query`` are candidates; when none qualify the
    whole set is searched. Ties go to the lowest index.
    """
    queries = np.asarray(queries, dtype=float)
    points = np.asarray(points, dtype=float)
    nq = len(queries)
    if nq == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    diff = queries[:, None, :] - points[None, :, :]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    if use_facing:
        ray = np.asarray(origin, dtype=float)[None, :] - queries
        dots = ray @ np.asarray(normals, dtype=float).T
        masked = np.where(dots >= 0.0, d2, np.inf)
        idx = np.argmin(masked, axis=1)
        none = ~np.isfinite(masked[np.arange(nq), idx])
        if none.any():
            idx[none] = np.argmin(d2[none], axis=1)
    else:
        idx = np.argmin(d2, axis=1)
    return idx.astype(np.int64), d2[np.arange(nq), idx]


def ray_capsules(origin, dirs, a, b, r):
    """First positive hit of unit rays ``origin + t * dirs`` against capsules.

    Returns hit distances (inf on miss) and capsule indices (-1 on miss).
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(dirs, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r = np.asarray(r, dtype=float)
    nr, nc = len(d), len(a)
    best = np.full(nr, np.inf)
    which = np.full(nr, -1, dtype=np.int64)
    for c in range(nc):
        t = _ray_capsule(o, d, a[c], b[c], r[c])
        better = t < best
        best[better] = t[better]
        which[better] = c
    return best, which


def _ray_sphere(o, d, center, radius):
    oc = o - center
    bb = d @ oc
    cc = oc @ oc - radius * radius
    h = bb * bb - cc
    t = -bb - np.sqrt(np.where(h > 0, h, 0.0))
    return np.where((h > 0) & (t > 0), t, np.inf)


def _ray_capsule(o, d, a, b, radius):
    ba = b - a
    oa = o - a
    baba = ba @ ba
    bard = d @ ba
    baoa = oa @ ba
    rdoa = d @ oa
    oaoa = oa @ oa
    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - radius * radius * baba
    h = qb * qb - qa * qc
    out = np.full(len(d), np.inf)
    body = (h >= 0) & (qa > 1e-12)
    safe_qa = np.where(qa > 1e-12, qa, 1.0)
    t = (-qb - np.sqrt(np.where(h >= 0, h, 0.0))) / safe_qa
    y = baoa + t * bard
    side = body & (y > 0) & (y < baba) & (t > 0)
    out[side] = t[side]
    # caps: whenever the infinite cylinder is touched but the side was not hit
    rest = (h >= 0) & ~side
    if rest.any():
        ta = _ray_sphere(o, d[rest], a, radius)
        tb = _ray_sphere(o, d[rest], b, radius)
        out[rest] = np.minimum(ta, tb)
    return out
