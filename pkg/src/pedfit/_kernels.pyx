# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: kinematic chain, chain back-propagation, facing
nearest-neighbour search and ray/capsule casting.

Semantics are identical to ``_kernels_py``; tests compare the two.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, INFINITY

cnp.import_array()

cdef double _SMALL2 = 1e-12


cdef inline void _coeffs(double t2, double *a, double *b, double *c) noexcept nogil:
    cdef double t
    if t2 < _SMALL2:
        a[0] = 1.0 - t2 / 6.0
        b[0] = 0.5 - t2 / 24.0
        c[0] = 1.0 / 6.0 - t2 / 120.0
    else:
        t = sqrt(t2)
        a[0] = sin(t) / t
        b[0] = (1.0 - cos(t)) / t2
        c[0] = (t - sin(t)) / (t * t2)


cdef inline void _exp_and_jac(double wx, double wy, double wz, double[:, ::1] R, double[:, ::1] J) noexcept nogil:
    cdef double a, b, c
    cdef double K[3][3]
    cdef double K2[3][3]
    cdef int i, j, m
    _coeffs(wx * wx + wy * wy + wz * wz, &a, &b, &c)
    K[0][0] = 0.0; K[0][1] = -wz; K[0][2] = wy
    K[1][0] = wz; K[1][1] = 0.0; K[1][2] = -wx
    K[2][0] = -wy; K[2][1] = wx; K[2][2] = 0.0
    for i in range(3):
        for j in range(3):
            K2[i][j] = 0.0
            for m in range(3):
                K2[i][j] += K[i][m] * K[m][j]
    for i in range(3):
        for j in range(3):
            R[i, j] = (1.0 if i == j else 0.0) + a * K[i][j] + b * K2[i][j]
            J[i, j] = (1.0 if i == j else 0.0) + b * K[i][j] + c * K2[i][j]


def posed_chain(pose, offsets, parents, translation):
    cdef double[:, ::1] w = np.ascontiguousarray(pose, dtype=np.float64)
    cdef double[:, ::1] off = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef long long[::1] par = np.ascontiguousarray(parents, dtype=np.int64)
    cdef double[::1] t = np.ascontiguousarray(translation, dtype=np.float64)
    cdef Py_ssize_t n = par.shape[0]
    G_arr = np.empty((n, 3, 3))
    p_arr = np.empty((n, 3))
    W_arr = np.empty((n, 3, 3))
    cdef double[:, :, ::1] G = G_arr
    cdef double[:, ::1] p = p_arr
    cdef double[:, :, ::1] W = W_arr
    cdef double[:, ::1] R = np.empty((3, 3))
    cdef double[:, ::1] Jl = np.empty((3, 3))
    cdef Py_ssize_t k, q, i, j, m
    cdef double s
    with nogil:
        _exp_and_jac(w[0, 0], w[0, 1], w[0, 2], R, Jl)
        for i in range(3):
            p[0, i] = t[i] + off[0, i]
            for j in range(3):
                G[0, i, j] = R[i, j]
                W[0, i, j] = Jl[i, j]
        for k in range(1, n):
            q = par[k]
            _exp_and_jac(w[k, 0], w[k, 1], w[k, 2], R, Jl)
            for i in range(3):
                s = 0.0
                for m in range(3):
                    s = s + G[q, i, m] * off[k, m]
                p[k, i] = p[q, i] + s
                for j in range(3):
                    s = 0.0
                    for m in range(3):
                        s = s + G[q, i, m] * R[m, j]
                    G[k, i, j] = s
                    s = 0.0
                    for m in range(3):
                        s = s + G[q, i, m] * Jl[m, j]
                    W[k, i, j] = s
    return G_arr, p_arr, W_arr


def chain_gradient(attach, x, g, p, W, parents):
    cdef long long[::1] att = np.ascontiguousarray(attach, dtype=np.int64)
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
    cdef double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64).reshape(-1, 3)
    cdef double[:, ::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, :, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef long long[::1] par = np.ascontiguousarray(parents, dtype=np.int64)
    cdef Py_ssize_t n = par.shape[0]
    cdef Py_ssize_t npts = att.shape[0]
    force_arr = np.zeros((n, 3))
    grad_arr = np.empty((n, 3))
    cdef double[:, ::1] F = force_arr
    cdef double[:, ::1] T = np.zeros((n, 3))
    cdef double[:, ::1] out = grad_arr
    cdef Py_ssize_t i, k, q, a, b
    cdef double m0, m1, m2
    with nogil:
        for i in range(npts):
            k = att[i]
            F[k, 0] += gv[i, 0]
            F[k, 1] += gv[i, 1]
            F[k, 2] += gv[i, 2]
            T[k, 0] += xv[i, 1] * gv[i, 2] - xv[i, 2] * gv[i, 1]
            T[k, 1] += xv[i, 2] * gv[i, 0] - xv[i, 0] * gv[i, 2]
            T[k, 2] += xv[i, 0] * gv[i, 1] - xv[i, 1] * gv[i, 0]
        for k in range(n - 1, 0, -1):
            q = par[k]
            for a in range(3):
                F[q, a] += F[k, a]
                T[q, a] += T[k, a]
        for k in range(n):
            m0 = T[k, 0] - (pv[k, 1] * F[k, 2] - pv[k, 2] * F[k, 1])
            m1 = T[k, 1] - (pv[k, 2] * F[k, 0] - pv[k, 0] * F[k, 2])
            m2 = T[k, 2] - (pv[k, 0] * F[k, 1] - pv[k, 1] * F[k, 0])
            for b in range(3):
                out[k, b] = Wv[k, 0, b] * m0 + Wv[k, 1, b] * m1 + Wv[k, 2, b] * m2
    return grad_arr, force_arr


def nearest_facing(queries, points, normals, origin, bint use_facing):
    cdef double[:, ::1] qv = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    cdef double[:, ::1] pv = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    cdef double[:, ::1] nv = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    cdef double[::1] o = np.ascontiguousarray(origin, dtype=np.float64)
    cdef Py_ssize_t nq = qv.shape[0]
    cdef Py_ssize_t npt = pv.shape[0]
    idx_arr = np.empty(nq, dtype=np.int64)
    d2_arr = np.empty(nq)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] dist = d2_arr
    cdef Py_ssize_t i, j, best, best_any
    cdef double dx, dy, dz, d, bd, bd_any, rx, ry, rz
    with nogil:
        for i in range(nq):
            best = -1
            best_any = -1
            bd = INFINITY
            bd_any = INFINITY
            rx = o[0] - qv[i, 0]
            ry = o[1] - qv[i, 1]
            rz = o[2] - qv[i, 2]
            for j in range(npt):
                dx = qv[i, 0] - pv[j, 0]
                dy = qv[i, 1] - pv[j, 1]
                dz = qv[i, 2] - pv[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < bd_any:
                    bd_any = d
                    best_any = j
                if use_facing and d < bd:
                    if rx * nv[j, 0] + ry * nv[j, 1] + rz * nv[j, 2] >= 0.0:
                        bd = d
                        best = j
            if not use_facing or best < 0:
                best = best_any
                bd = bd_any
            idx[i] = best
            dist[i] = bd
    return idx_arr, d2_arr


cdef inline double _ray_sphere(double ox, double oy, double oz, double dx, double dy, double dz,
                               double cx, double cy, double cz, double r) noexcept nogil:
    cdef double ocx = ox - cx, ocy = oy - cy, ocz = oz - cz
    cdef double bb = dx * ocx + dy * ocy + dz * ocz
    cdef double cc = ocx * ocx + ocy * ocy + ocz * ocz - r * r
    cdef double h = bb * bb - cc
    cdef double t
    if h > 0:
        t = -bb - sqrt(h)
        if t > 0:
            return t
    return INFINITY


def ray_capsules(origin, dirs, a, b, r):
    cdef double[::1] o = np.ascontiguousarray(origin, dtype=np.float64)
    cdef double[:, ::1] dv = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 3)
    cdef double[::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef Py_ssize_t nr = dv.shape[0]
    cdef Py_ssize_t nc = av.shape[0]
    best_arr = np.full(nr, np.inf)
    which_arr = np.full(nr, -1, dtype=np.int64)
    cdef double[::1] best = best_arr
    cdef long long[::1] which = which_arr
    cdef Py_ssize_t i, c
    cdef double bax, bay, baz, oax, oay, oaz, baba, bard, baoa, rdoa, oaoa
    cdef double qa, qb, qc, h, t, y, ta, tb
    with nogil:
        for i in range(nr):
            for c in range(nc):
                bax = bv[c, 0] - av[c, 0]; bay = bv[c, 1] - av[c, 1]; baz = bv[c, 2] - av[c, 2]
                oax = o[0] - av[c, 0]; oay = o[1] - av[c, 1]; oaz = o[2] - av[c, 2]
                baba = bax * bax + bay * bay + baz * baz
                bard = dv[i, 0] * bax + dv[i, 1] * bay + dv[i, 2] * baz
                baoa = oax * bax + oay * bay + oaz * baz
                rdoa = dv[i, 0] * oax + dv[i, 1] * oay + dv[i, 2] * oaz
                oaoa = oax * oax + oay * oay + oaz * oaz
                qa = baba - bard * bard
                qb = baba * rdoa - baoa * bard
                qc = baba * oaoa - baoa * baoa - rv[c] * rv[c] * baba
                h = qb * qb - qa * qc
                if h < 0:
                    continue
                t = INFINITY
                if qa > 1e-12:
                    t = (-qb - sqrt(h)) / qa
                    y = baoa + t * bard
                    if not (y > 0 and y < baba and t > 0):
                        t = INFINITY
                if t == INFINITY:
                    ta = _ray_sphere(o[0], o[1], o[2], dv[i, 0], dv[i, 1], dv[i, 2],
                                     av[c, 0], av[c, 1], av[c, 2], rv[c])
                    tb = _ray_sphere(o[0], o[1], o[2], dv[i, 0], dv[i, 1], dv[i, 2],
                                     bv[c, 0], bv[c, 1], bv[c, 2], rv[c])
                    t = ta if ta < tb else tb
                if t < best[i]:
                    best[i] = t
                    which[i] = c
    return best_arr, which_arr
