import numpy as np
import pytest

from pedfit.body_model import BodyParams
from pedfit.priors import (LOG_2PI, EMMonotonicityError, GmmModel, fit_gmm, load_gmm, nll, nll_curvature,
                           pose_deltas, save_gmm)


def identity_prior(d, mean=None):
    return GmmModel([1.0], np.zeros((1, d)) if mean is None else np.asarray(mean)[None], np.eye(d)[None])


def test_identity_nll_at_mean():
    assert nll(identity_prior(75), np.zeros(75))[0] == pytest.approx(37.5 * LOG_2PI, abs=1e-9)
    assert 37.5 * LOG_2PI == pytest.approx(68.92, abs=5e-3)


def test_single_component_mean_is_minimum():
    rng = np.random.default_rng(0)
    cov = np.cov(rng.normal(size=(50, 4)).T) + np.eye(4)
    mu = rng.normal(size=4)
    m = GmmModel([1.0], mu[None], cov[None])
    v0, g0 = nll(m, mu)
    assert np.abs(g0).max() < 1e-12
    for _ in range(20):
        assert nll(m, mu + 0.1 * rng.normal(size=4))[0] > v0


def test_nll_matches_naive_density():
    rng = np.random.default_rng(1)
    for d in (1, 2, 3):
        K = 3
        A = rng.normal(size=(K, d, d))
        covs = A @ np.transpose(A, (0, 2, 1)) + 0.5 * np.eye(d)
        w = rng.dirichlet(np.ones(K))
        mu = rng.normal(size=(K, d))
        m = GmmModel(w, mu, covs)
        for x in rng.normal(size=(10, d)):
            dens = 0.0
            for k in range(K):
                diff = x - mu[k]
                dens += w[k] * np.exp(-0.5 * diff @ np.linalg.solve(covs[k], diff)) / np.sqrt(
                    (2 * np.pi) ** d * np.linalg.det(covs[k]))
            assert nll(m, x)[0] == pytest.approx(-np.log(dens), abs=1e-10)


def test_nll_gradient_fd():
    rng = np.random.default_rng(2)
    d = 6
    A = rng.normal(size=(3, d, d))
    m = GmmModel(rng.dirichlet(np.ones(3)), rng.normal(size=(3, d)), A @ np.transpose(A, (0, 2, 1)) + np.eye(d))
    h = 1e-5
    for x in rng.normal(size=(10, d)) * 2:
        g = nll(m, x)[1]
        num = np.array([(nll(m, x + h * e)[0] - nll(m, x - h * e)[0]) / (2 * h) for e in np.eye(d)])
        assert np.linalg.norm(g - num) <= 1e-4 * max(1.0, np.linalg.norm(num))


def test_nll_far_from_means_is_finite():
    m = GmmModel([0.5, 0.5], [[0.0, 0.0], [1.0, 1.0]], np.stack([np.eye(2) * 1e-2] * 2))
    v, g = nll(m, np.array([1e3, -1e3]))
    assert np.isfinite(v) and np.all(np.isfinite(g))


def test_nll_dimension_mismatch():
    with pytest.raises(ValueError):
        nll(identity_prior(3), np.zeros(4))


def test_curvature_is_precision_for_one_component():
    cov = np.diag([1.0, 4.0])
    m = GmmModel([1.0], np.zeros((1, 2)), cov[None])
    assert np.allclose(nll_curvature(m, np.ones(2)), np.linalg.inv(cov))


def test_model_validation():
    with pytest.raises(ValueError):
        GmmModel([0.5, 0.6], np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    with pytest.raises(ValueError):
        GmmModel([1.0], np.zeros((1, 2)), np.array([[[1.0, 0.0], [0.0, -1.0]]]))


def test_one_component_closed_form():
    X = np.random.default_rng(3).normal(size=(200, 3)) @ np.diag([1.0, 2.0, 0.5]) + [1, 2, 3]
    m = fit_gmm(X, 1, reg_covar=0.0)
    assert np.allclose(m.means[0], X.mean(axis=0), rtol=0, atol=1e-12)
    assert np.allclose(m.covariances[0], np.cov(X.T, bias=True), rtol=0, atol=1e-12)


def test_one_gaussian_recovered():
    rng = np.random.default_rng(4)
    n, sigma = 2000, np.array([1.0, 0.5, 2.0])
    X = rng.normal(size=(n, 3)) * sigma + [3, -1, 0]
    m = fit_gmm(X, 1)
    assert np.all(np.abs(m.means[0] - [3, -1, 0]) <= 3 * sigma / np.sqrt(n))
    truth = np.diag(sigma ** 2)
    assert np.linalg.norm(m.covariances[0] - truth) <= 0.2 * np.linalg.norm(truth)


def test_two_clusters_weights():
    rng = np.random.default_rng(5)
    X = np.vstack([rng.normal(size=(300, 2)), rng.normal(size=(700, 2)) + 20])
    m = fit_gmm(X, 2, seed=1)
    assert sorted(np.round(m.weights, 2)) == pytest.approx([0.3, 0.7], abs=0.05)


def test_em_monotone_and_deterministic():
    rng = np.random.default_rng(6)
    X = np.vstack([rng.normal(size=(100, 4)) + k * 3 for k in range(3)])
    hist = []
    m1 = fit_gmm(X, 3, seed=7, history=hist)
    assert len(hist) >= 2
    assert all(b >= a - 1e-12 * abs(a) for a, b in zip(hist, hist[1:]))
    m2 = fit_gmm(X, 3, seed=7)
    assert np.array_equal(m1.means, m2.means) and np.array_equal(m1.covariances, m2.covariances)


def test_em_monotonicity_is_enforced(monkeypatch):
    import pedfit.priors as pri

    real = pri._m_step
    calls = {"n": 0}

    def bad(X, resp, reg):
        calls["n"] += 1
        w, mu, cov = real(X, resp, reg)
        return (w, mu + 5.0, cov) if calls["n"] > 1 else (w, mu, cov)

    monkeypatch.setattr(pri, "_m_step", bad)
    with pytest.raises(EMMonotonicityError):
        fit_gmm(np.random.default_rng(0).normal(size=(100, 2)), 1)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((2, 3)), 2)
    X = np.zeros((20, 2))
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        fit_gmm(X, 1)


def _seq(translations, poses=None):
    return [BodyParams(np.zeros(72) if poses is None else poses[i], np.zeros(10), t)
            for i, t in enumerate(translations)]


def test_pose_deltas():
    seq = _seq([np.array([1.0, 2.0, 3.0])] * 4)
    assert np.array_equal(pose_deltas(seq, [0, 0.1, 0.2, 0.3], 0.1), np.zeros((3, 75)))
    v = np.array([1.4, 0.0, -0.2])
    ts = np.arange(5) * 0.1
    d = pose_deltas(_seq([v * t for t in ts]), ts, 0.1)
    assert np.allclose(d[:, :3], v * 0.1, atol=1e-15)
    # the same motion sampled twice as often rescales to the same deltas
    ts2 = np.arange(9) * 0.05
    d2 = pose_deltas(_seq([v * t for t in ts2]), ts2, 0.1)
    assert np.allclose(d2[:, :3], v * 0.1, atol=1e-15)


def test_pose_deltas_errors():
    with pytest.raises(ValueError):
        pose_deltas(_seq([np.zeros(3)] * 2), [0.0, 0.0], 0.1)
    with pytest.raises(ValueError):
        pose_deltas(_seq([np.zeros(3)]), [0.0], 0.1)


def test_gmm_file_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    m = fit_gmm(rng.normal(size=(60, 3)), 2, frame_interval=0.1)
    save_gmm(m, tmp_path / "g.json", kind="temporal")
    r = load_gmm(tmp_path / "g.json")
    assert np.array_equal(r.weights, m.weights) and np.array_equal(r.means, m.means)
    assert np.array_equal(r.covariances, m.covariances) and r.frame_interval == 0.1
