"""Gaussian mixture priors over body pose and frame-to-frame pose changes."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

GMM_FORMAT = "pedfit-gmm/1"
LOG_2PI = np.log(2.0 * np.pi)


class EMMonotonicityError(AssertionError):
    """EM decreased the log-likelihood."""


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covariances: np.ndarray  # (K, D, D)
    frame_interval: float | None = None  # s; set for temporal priors
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.asarray(self.means, dtype=float)
        cov = np.asarray(self.covariances, dtype=float)
        if mu.ndim != 2 or cov.shape != (len(w), mu.shape[1], mu.shape[1]) or len(mu) != len(w):
            raise ValueError("inconsistent mixture dimensions")
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if not np.allclose(cov, np.transpose(cov, (0, 2, 1)), rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        if self.frame_interval is not None and not self.frame_interval > 0:
            raise ValueError("frame_interval must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        eye = np.eye(mu.shape[1])
        inv_chol = np.stack([solve_triangular(L, eye, lower=True) for L in chol])
        self._cache["chol"] = chol
        self._cache["precisions"] = np.einsum("kji,kjl->kil", inv_chol, inv_chol)
        with np.errstate(divide="ignore"):
            self._cache["log_norm"] = (
                np.log(w) - 0.5 * mu.shape[1] * LOG_2PI - np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
            )

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return len(self.weights)

    def component_log_density(self, x):
        """log(w_i N(x; mu_i, Sigma_i)) for rows of x: (N, K)."""
        x = np.atleast_2d(x)
        maha = np.empty((len(x), self.n_components))
        for k in range(self.n_components):
            z = solve_triangular(self._cache["chol"][k], (x - self.means[k]).T, lower=True)
            maha[:, k] = np.einsum("ij,ij->j", z, z)
        return self._cache["log_norm"][None, :] - 0.5 * maha


def nll(model, x):
    """Negative log mixture density at ``x`` and its gradient."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"expected a {model.dim}-vector, got shape {x.shape}")
    diff = x[None, :] - model.means
    sol = np.einsum("kij,kj->ki", model._cache["precisions"], diff)
    logc = model._cache["log_norm"] - 0.5 * np.einsum("ki,ki->k", diff, sol)
    total = logsumexp(logc)
    resp = np.exp(logc - total)
    return float(-total), resp @ sol


def nll_curvature(model, x):
    """Responsibility-weighted precision sum_i r_i(x) P_i: a positive
    semidefinite stand-in for the NLL Hessian, used by Gauss-Newton steps."""
    x = np.asarray(x, dtype=float)
    logc = model.component_log_density(x)[0]
    resp = np.exp(logc - logsumexp(logc))
    return np.einsum("k,kij->ij", resp, model._cache["precisions"])


def _kmeans_pp(X, k, rng, n_iter=10):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        s = d2.sum()
        j = rng.integers(n) if s <= 0 else rng.choice(n, p=d2 / s)
        centers.append(X[j])
        d2 = np.minimum(d2, np.sum((X - X[j]) ** 2, axis=1))
    C = np.array(centers)
    for _ in range(n_iter):
        lab = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(-1), axis=1)
        for c in range(k):
            if np.any(lab == c):
                C[c] = X[lab == c].mean(axis=0)
    return np.argmin(((X[:, None, :] - C[None]) ** 2).sum(-1), axis=1)


def _m_step(X, resp, reg):
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = (resp.T @ X) / nk[:, None]
    d = X.shape[1]
    covs = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        diff = X - means[k]
        covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k]
        covs[k] = 0.5 * (covs[k] + covs[k].T) + reg * np.eye(d)
    return nk / nk.sum(), means, covs


def fit_gmm(samples, n_components, seed=0, max_iter=200, tol=1e-6, reg_covar=1e-6,
            frame_interval=None, history=None):
    """EM fit of a full-covariance mixture, k-means++ initialisation.

    Diagonal loading (``reg_covar``) is folded into the objective as a
    factor exp(-reg/2 tr P_k) on every component density, for which
    Sigma_k = S_k + reg I is the exact M-step. EM then provably never
    decreases that objective, and it is asserted at every step (up to
    floating-point slack). With ``reg_covar=0`` it is the plain
    log-likelihood. If ``history`` is a list, the per-step mean objective
    values are appended to it.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    if not np.all(np.isfinite(X)):
        raise ValueError("samples contain non-finite values")
    if len(X) <= n_components:
        raise ValueError(f"need more than {n_components} samples, got {len(X)}")
    rng = np.random.default_rng(seed)
    labels = np.zeros(len(X), dtype=int) if n_components == 1 else _kmeans_pp(X, n_components, rng)
    resp = np.zeros((len(X), n_components))
    resp[np.arange(len(X)), labels] = 1.0
    w, mu, cov = _m_step(X, resp, reg_covar)
    prev = -np.inf
    for _ in range(max_iter):
        model = GmmModel(w, mu, cov)
        penalty = 0.5 * reg_covar * np.trace(model._cache["precisions"], axis1=1, axis2=2)
        logc = model.component_log_density(X) - penalty[None, :]
        lse = logsumexp(logc, axis=1)
        ll = float(lse.mean())
        if history is not None:
            history.append(ll)
        if ll < prev - 1e-9 * max(1.0, abs(prev)):
            raise EMMonotonicityError(f"EM objective decreased: {prev!r} -> {ll!r}")
        if ll - prev < tol * max(1.0, abs(ll)):
            break
        prev = ll
        resp = np.exp(logc - lse[:, None])
        w, mu, cov = _m_step(X, resp, reg_covar)
    return GmmModel(w, mu, cov, frame_interval)


def pose_deltas(sequence, timestamps, target_interval):
    """75-d frame differences (translation, pose) rescaled to ``target_interval``."""
    ts = np.asarray(timestamps, dtype=float)
    if len(sequence) < 2 or len(ts) != len(sequence):
        raise ValueError("need at least two frames with one timestamp each")
    dt = np.diff(ts)
    if np.any(dt <= 0):
        raise ValueError("timestamps must be strictly increasing")
    x = np.array([np.concatenate([p.translation, p.pose]) for p in sequence])
    return np.diff(x, axis=0) * (target_interval / dt)[:, None]


@dataclass
class Priors:
    """Bundle passed to the energies: pose prior over pose[3:] and temporal prior."""

    pose: GmmModel | None = None
    temporal: GmmModel | None = None


def gmm_to_dict(m, kind=None):
    return {
        "format": GMM_FORMAT,
        "kind": kind,
        "dim": m.dim,
        "n_components": m.n_components,
        "frame_interval_s": m.frame_interval,
        "weights": m.weights.tolist(),
        "means": m.means.tolist(),
        "covariances": m.covariances.tolist(),
    }


def gmm_from_dict(d):
    if d.get("format") != GMM_FORMAT:
        raise ValueError(f"unsupported mixture format {d.get('format')!r}")
    return GmmModel(np.array(d["weights"]), np.array(d["means"]), np.array(d["covariances"]),
                    d.get("frame_interval_s"))


def save_gmm(m, path, kind=None):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(gmm_to_dict(m, kind), f)
    os.replace(tmp, path)


def load_gmm(path):
    with open(path) as f:
        return gmm_from_dict(json.load(f))
