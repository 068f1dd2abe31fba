"""The compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pedfit import _kernels_py as py
from pedfit import kernels
from pedfit.body_model import default_template

cy = pytest.importorskip("pedfit._kernels")

seeds = st.integers(0, 2**31 - 1)


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_posed_chain(seed):
    rng = np.random.default_rng(seed)
    T = default_template(4)
    pose = rng.normal(0, 1.0, (24, 3))
    offs = rng.normal(0, 0.3, (24, 3))
    t = rng.normal(size=3)
    for a, b in zip(py.posed_chain(pose, offs, T.parents, t), cy.posed_chain(pose, offs, T.parents, t)):
        assert np.allclose(a, b, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(0, 60))
def test_chain_gradient(seed, n):
    rng = np.random.default_rng(seed)
    T = default_template(4)
    attach = rng.integers(0, 24, n).astype(np.int64)
    x, g = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    p, W = rng.normal(size=(24, 3)), rng.normal(size=(24, 3, 3))
    for a, b in zip(py.chain_gradient(attach, x, g, p, W, T.parents), cy.chain_gradient(attach, x, g, p, W, T.parents)):
        assert np.allclose(a, b, rtol=0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(0, 30), st.integers(1, 80), st.booleans())
def test_nearest_facing(seed, nq, npts, facing):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(nq, 3))
    pts = rng.normal(size=(npts, 3))
    if npts > 1:
        pts[-1] = pts[0]  # exact tie
    normals = rng.normal(size=(npts, 3))
    origin = rng.normal(size=3) * 5
    i1, d1 = py.nearest_facing(q, pts, normals, origin, facing)
    i2, d2 = cy.nearest_facing(q, pts, normals, origin, facing)
    assert np.array_equal(i1, i2)
    assert np.allclose(d1, d2, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_ray_capsules(seed):
    rng = np.random.default_rng(seed)
    origin = np.array([0.0, 0.0, -5.0])
    dirs = rng.normal(size=(200, 3)) * [0.2, 0.2, 0.0] + [0, 0, 1]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    a = rng.normal(size=(6, 3)) * 0.5
    b = a + rng.normal(size=(6, 3)) * 0.3
    b[0] = a[0]  # degenerate capsule = sphere
    r = rng.uniform(0.05, 0.3, 6)
    t1, w1 = py.ray_capsules(origin, dirs, a, b, r)
    t2, w2 = cy.ray_capsules(origin, dirs, a, b, r)
    assert np.array_equal(w1, w2)
    assert np.array_equal(np.isinf(t1), np.isinf(t2))
    hit = np.isfinite(t1)
    assert np.allclose(t1[hit], t2[hit], rtol=0, atol=1e-10)


def test_ray_hits_lie_on_capsule():
    rng = np.random.default_rng(0)
    origin = np.zeros(3)
    dirs = rng.normal(size=(500, 3)) * [0.1, 0.1, 0] + [0, 0, 1]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    a, b, r = np.array([[0.0, -0.3, 5.0]]), np.array([[0.0, 0.3, 5.0]]), np.array([0.2])
    for mod in (py, cy):
        t, w = mod.ray_capsules(origin, dirs, a, b, r)
        x = dirs[w == 0] * t[w == 0, None]
        s = np.clip((x - a[0]) @ (b[0] - a[0]) / np.sum((b[0] - a[0]) ** 2), 0, 1)
        d = np.linalg.norm(x - (a[0] + s[:, None] * (b[0] - a[0])), axis=1)
        assert len(x) > 50 and np.abs(d - 0.2).max() < 1e-9
