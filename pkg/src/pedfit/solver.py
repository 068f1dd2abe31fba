"""Per-frame fitting, initialisation and the ADMM shape-consensus driver."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .body_model import N_POSE, TORSO_KEYPOINTS, BodyParams, forward_kinematics
from .energies import TERMS, e_total, lidar_correspondences
from .pointcloud import Trajectory, centroid, heading_direction
from .rotations import yaw_to
from .stereo import triangulate


@dataclass
class SolverConfig:
    max_iter: int = 200  # inner quasi-Newton iterations per stage
    gtol: float = 1e-6
    step_tol: float = 1e-10
    ftol: float = 1e-7  # relative improvement that resets the stall counter
    stall_iter: int = 10  # iterations without such an improvement before stopping


@dataclass
class AdmmConfig:
    rho: float = 2.0
    max_iter: int = 20
    primal_tol: float = 0.05
    dual_tol: float = 0.05
    workers: int = 1  # >1: frames solved concurrently from the previous sweep's iterates

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass
class AdmmState:
    local_shapes: np.ndarray  # (N, B)
    consensus: np.ndarray  # (B,)
    duals: np.ndarray  # (N, B), scaled: u_k = y_k / rho
    rho: float
    iteration: int = 0
    primal_history: list = field(default_factory=list)  # max_k ||beta_k - beta||
    dual_history: list = field(default_factory=list)  # rho ||beta^t - beta^{t+1}||
    # full iterate history for auditing the update identities
    local_history: list = field(default_factory=list)
    consensus_history: list = field(default_factory=list)
    dual_var_history: list = field(default_factory=list)


@dataclass
class FitResult:
    params: list  # BodyParams per frame
    energies: list  # per-frame dict of unweighted term values plus "total"
    converged: bool
    status: str
    admm_iterations: int
    inner_iterations: list  # per frame, summed over all solves
    wall_time: float
    admm: AdmmState | None = None


class FitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def _triangulated(obs, rig, names, template):
    idx = template.keypoint_index(names)
    ok = (obs.visibility_left[idx] == 2) & (obs.visibility_right[idx] == 2)
    ok &= obs.joints2d_left[idx, 0] > obs.joints2d_right[idx, 0]
    if not np.any(ok):
        return None
    return triangulate(rig, obs.joints2d_left[idx[ok]], obs.joints2d_right[idx[ok]])


def _init_translation(obs, rig, template):
    if len(obs.cloud):
        return centroid(obs.cloud)
    for names in (("rhip", "lhip"), ("hip",), TORSO_KEYPOINTS):
        pts = _triangulated(obs, rig, names, template)
        if pts is not None and (names != ("rhip", "lhip") or len(pts) == 2):
            return pts.mean(axis=0)
    return None


def init_params(obs, rig, template):
    """Cloud centroid (or triangulated hips) and heading-aligned root; other joints at rest."""
    t = _init_translation(obs, rig, template)
    if t is None:
        raise FitError("no usable observation: empty cloud and no triangulable torso joint")
    params = BodyParams.zeros(template.n_shape)
    params.translation = np.asarray(t, dtype=float) - template.joints[0]
    if obs.heading is not None:
        params.pose[:3] = yaw_to(template.forward_axis, obs.heading, template.up_axis)
    return params


def init_single_frame(obs, rig, template, weights, priors=None, config=None, base=None):
    """Root orientation + translation from torso keypoints and E_T; 4 yaw restarts.

    ``base`` supplies the starting translation when the observation alone
    cannot (e.g. monocular fits).
    """
    torso = template.keypoint_index(TORSO_KEYPOINTS)
    sides = [s for s, use in (("left", weights.use_left), ("right", weights.use_right)) if use]
    for side in sides:
        if np.count_nonzero(obs.visibility(side)[torso] > 0) < 2:
            raise FitError(f"need at least two visible torso keypoints in the {side} image")
    base = init_params(obs, rig, template) if base is None else base
    config = SolverConfig() if config is None else config
    up = template.up_axis
    best = None
    for yaw in (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi):
        p = base.copy()
        p.pose[:3] = up * yaw
        out, e, _ = _minimize(p, obs, rig, priors, weights, template, config, _free_root(template),
                              active=("J_left", "J_right", "T"), subset=torso)
        if best is None or e < best[1]:
            best = (out, e)
    return best[0]


def initialize(obs, rig, template, weights, priors=None, config=None):
    """Heading-based init when a heading is known, else the single-frame init."""
    if obs.heading is not None:
        return init_params(obs, rig, template)
    try:
        return init_single_frame(obs, rig, template, weights, priors, config)
    except FitError:
        return init_params(obs, rig, template)


def estimate_headings(frames, up=(0.0, 1.0, 0.0)):
    """Fill missing headings from the LiDAR centroid trajectory (frames with points only)."""
    have = [k for k, f in enumerate(frames) if len(f.cloud) and f.heading is None]
    with_pts = [k for k, f in enumerate(frames) if len(f.cloud)]
    if len(with_pts) < 2 or not have:
        return frames
    traj = Trajectory([frames[k].timestamp for k in with_pts], [centroid(frames[k].cloud) for k in with_pts])
    for k in have:
        d, stationary = heading_direction(traj, with_pts.index(k), up)
        if not stationary:
            frames[k].heading = d
    return frames


# ---------------------------------------------------------------------------
# Per-frame minimisation
# ---------------------------------------------------------------------------

def _free_root(template):
    n = template.n_params
    return np.r_[0:3, n - 3:n]


def _free_all(template):
    return np.arange(template.n_params)


def _free_no_shape(template):
    n = template.n_params
    return np.r_[0:N_POSE, n - 3:n]


def _minimize(params, obs, rig, priors, weights, template, config, free, *, active=None, subset=None,
              prev=None, dt=None, anchor=None, use_3d=False):
    """Damped Gauss-Newton descent over the ``free`` entries.

    The Hessian is approximated by J^T W J for the squared terms and by the
    responsibility-weighted precisions for the mixture terms; each step is
    accepted by Armijo backtracking with the iteration's correspondences
    held fixed. E_3d correspondences are refreshed at the start of every
    iteration; because the facing test can switch them, the true energy may
    cycle at a tiny scale, so the best iterate seen is returned and the
    descent stops once it stalls. Returns (params, energy, iterations).
    """
    x = params.to_vector()
    n_shape = template.n_shape
    sl = slice(N_POSE, N_POSE + n_shape)
    corr = None

    def evaluate(xv, want_h):
        p = BodyParams.from_vector(xv, n_shape)
        out = e_total(p, obs, rig, priors, weights, template, prev, dt, correspondences=corr,
                      keypoint_subset=subset, active=active, hessian=want_h)
        v, g = out[0], out[1]
        if anchor is not None:
            z, rho = anchor
            r = p.shape - z
            v += 0.5 * rho * float(r @ r)
            g[sl] += rho * r
            if want_h:
                out[3][sl, sl] += rho * np.eye(n_shape)
        return (v, g, out[3]) if want_h else (v, g)

    def refresh(xv):
        nonlocal corr
        if use_3d:
            corr = lidar_correspondences(forward_kinematics(template, BodyParams.from_vector(xv, n_shape)),
                                         obs.cloud.points, rig.lidar_origin)

    lam = 1e-4
    iters = 0
    best_x, best_v = x.copy(), np.inf
    stall = 0
    evaluated = False
    for _ in range(config.max_iter):
        refresh(x)
        v, g, H = evaluate(x, True)
        evaluated = True
        if not np.isfinite(best_v) and not np.isfinite(v):
            raise FitError("non-finite energy at initialisation")
        if v < best_v - config.ftol * max(1.0, abs(best_v)):
            stall = 0
        else:
            stall += 1
        if v < best_v:
            best_x, best_v = x.copy(), v
        if stall >= config.stall_iter:
            break
        gf = g[free]
        if np.max(np.abs(gf), initial=0.0) < config.gtol:
            break
        Hf = H[np.ix_(free, free)]
        d = np.diag(Hf)
        scale = max(float(np.max(d, initial=0.0)), 1e-12)
        step = None
        while step is None:
            A = Hf + lam * np.diag(d + 1e-9 * scale)
            try:
                step = -np.linalg.solve(A, gf)
            except np.linalg.LinAlgError:
                lam *= 10.0
            if step is not None and not gf @ step < 0:
                step, lam = None, lam * 10.0
            if lam > 1e12:
                step = -gf / (d + 1e-9 * scale)
        iters += 1
        alpha = 1.0
        slope = float(gf @ step)
        accepted = False
        while alpha * np.max(np.abs(step)) >= config.step_tol:
            xn = x.copy()
            xn[free] += alpha * step
            vn = evaluate(xn, False)[0]
            if vn <= v + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        x = xn
        evaluated = False
        lam = max(lam * 0.3, 1e-9) if alpha == 1.0 else min(lam * 4.0, 1e8)
        if alpha * np.max(np.abs(step)) < config.step_tol:
            break
    if not evaluated:
        refresh(x)
        v = evaluate(x, False)[0]
        if v < best_v:
            best_x, best_v = x, v
    return BodyParams.from_vector(best_x, n_shape), best_v, iters


def _active_terms(weights, stage):
    if stage == 1:
        return ("J_left", "J_right", "T", "D")
    terms = list(TERMS)
    if weights.heading_mode == "init":
        terms.remove("D")
    return tuple(terms)


def frame_energy(params, obs, rig, priors, weights, template, prev=None, dt=None, anchor=None):
    """Total stage-2 energy with fresh correspondences, plus the per-term values."""
    v, _, terms = e_total(params, obs, rig, priors, weights, template, prev, dt,
                          active=_active_terms(weights, 2))
    if anchor is not None:
        z, rho = anchor
        r = params.shape - z
        v += 0.5 * rho * float(r @ r)
    return v, terms


def fit_frame(obs, rig, priors, weights, init, template, prev=None, dt=None, *, anchor=None,
              freeze_shape=False, stages=(1, 2), config=None):
    """Minimise the per-frame energy from ``init``.

    Stage 1 moves only translation and root orientation under E_T, torso
    E_J and E_D; stage 2 frees everything under all terms. ``anchor``
    = (z, rho) adds (rho/2)||shape - z||^2 (the ADMM primal term). The
    returned parameters never have higher total energy than ``init``.
    Returns (params, report).
    """
    config = SolverConfig() if config is None else config
    if prev is not None and dt is None:
        raise FitError("dt is required when a previous frame is given")
    e0, _ = frame_energy(init, obs, rig, priors, weights, template, prev, dt, anchor)
    if not np.isfinite(e0):
        raise FitError("non-finite energy at initialisation")
    p = init.copy()
    iters = 0
    if 1 in stages:
        torso = template.keypoint_index(TORSO_KEYPOINTS)
        p, _, n = _minimize(p, obs, rig, priors, weights, template, config, _free_root(template),
                            active=_active_terms(weights, 1), subset=torso)
        iters += n
    if 2 in stages:
        free = _free_no_shape(template) if freeze_shape else _free_all(template)
        p, _, n = _minimize(p, obs, rig, priors, weights, template, config, free,
                            active=_active_terms(weights, 2), prev=prev, dt=dt, anchor=anchor,
                            use_3d=len(obs.cloud) > 0 and weights.w_3d > 0)
        iters += n
    e1, terms = frame_energy(p, obs, rig, priors, weights, template, prev, dt, anchor)
    if not e1 <= e0:
        p = init.copy()
        e1, terms = e0, frame_energy(init, obs, rig, priors, weights, template, prev, dt, anchor)[1]
    report = dict(terms)
    report["total"] = e1
    report["iterations"] = iters
    return p, report


# ---------------------------------------------------------------------------
# Sequence fitting
# ---------------------------------------------------------------------------

def _check_sequence(frames):
    if not frames:
        raise FitError("empty sequence")
    ids = {f.track_id for f in frames}
    if len(ids) != 1:
        raise FitError(f"mixed track ids in one sequence: {sorted(map(str, ids))}")
    ts = np.array([f.timestamp for f in frames])
    if np.any(np.diff(ts) <= 0):
        raise FitError("frames must be ordered by strictly increasing timestamp")


def fit_sequence(frames, rig, priors, weights, template, admm=None, inits=None, config=None,
                 auto_heading=True, log=None):
    """ADMM consensus over one shared shape for a tracked sequence.

    A single frame is fitted directly with :func:`fit_frame`. Otherwise each
    ADMM iteration sweeps the frames in time order (frame k's temporal term
    uses frame k-1's latest iterate), then applies the consensus and scaled
    dual updates. On termination every frame takes the consensus shape and
    its pose/translation is re-polished with the shape frozen.
    """
    t_start = time.perf_counter()
    admm = AdmmConfig() if admm is None else admm
    config = SolverConfig() if config is None else config
    _check_sequence(frames)
    if auto_heading:
        estimate_headings(frames, template.up_axis)
    n = len(frames)
    if inits is None:
        inits = [initialize(f, rig, template, weights, priors, config) for f in frames]
    else:
        inits = [p.copy() for p in inits]
        if len(inits) != n:
            raise FitError("one initial parameter set per frame is required")

    if n == 1:
        p, rep = fit_frame(frames[0], rig, priors, weights, inits[0], template, config=config)
        return FitResult([p], [_energies(rep)], True, "single frame", 0, [rep["iterations"]],
                         time.perf_counter() - t_start, None)

    dts = [None] + [frames[k].timestamp - frames[k - 1].timestamp for k in range(1, n)]
    params = inits
    B = template.n_shape
    state = AdmmState(np.array([p.shape for p in params]), np.mean([p.shape for p in params], axis=0),
                      np.zeros((n, B)), float(admm.rho))
    inner = [0] * n
    converged = False

    def solve(k, first, source):
        prev = source[k - 1] if k > 0 else None
        z = state.consensus - state.duals[k]
        return fit_frame(frames[k], rig, priors, weights, params[k], template, prev, dts[k],
                         anchor=(z, admm.rho), stages=(1, 2) if first else (2,), config=config)

    for it in range(admm.max_iter):
        first = it == 0
        if admm.workers > 1:
            snapshot = [p.copy() for p in params]
            with ThreadPoolExecutor(admm.workers) as ex:
                results = list(ex.map(lambda k: solve(k, first, snapshot), range(n)))
            for k, (p, rep) in enumerate(results):
                params[k] = p
                inner[k] += rep["iterations"]
        else:
            for k in range(n):
                params[k], rep = solve(k, first, params)
                inner[k] += rep["iterations"]
        local = np.array([p.shape for p in params])
        u_old = state.duals
        beta_old = state.consensus
        beta_new = np.mean(local + u_old, axis=0)
        u_new = u_old + local - beta_new
        primal = float(np.max(np.linalg.norm(local - beta_new, axis=1)))
        dual = float(admm.rho * np.linalg.norm(beta_old - beta_new))
        state.local_shapes = local
        state.consensus = beta_new
        state.duals = u_new
        state.iteration = it + 1
        state.primal_history.append(primal)
        state.dual_history.append(dual)
        state.local_history.append(local.copy())
        state.consensus_history.append(beta_new.copy())
        state.dual_var_history.append(u_new.copy())
        if log is not None:
            log(f"admm {it + 1}: primal {primal:.4f} dual {dual:.4f}")
        if primal < admm.primal_tol and dual < admm.dual_tol:
            converged = True
            break

    # shared shape, then re-polish pose and translation with it frozen
    energies = []
    for k in range(n):
        p = params[k].copy()
        p.shape = state.consensus.copy()
        prev = params[k - 1] if k > 0 else None
        params[k], rep = fit_frame(frames[k], rig, priors, weights, p, template, prev, dts[k],
                                   freeze_shape=True, stages=(2,), config=config)
        inner[k] += rep["iterations"]
        energies.append(_energies(rep))
    status = "converged" if converged else "iteration cap"
    return FitResult(params, energies, converged, status, state.iteration, inner,
                     time.perf_counter() - t_start, state)


def _energies(rep):
    return {k: float(v) for k, v in rep.items() if k != "iterations"}


def fit_independent(frames, rig, priors, weights, template, inits=None, config=None, auto_heading=True):
    """Per-frame fits without shape consensus or temporal coupling (baseline)."""
    _check_sequence(frames)
    if auto_heading:
        estimate_headings(frames, template.up_axis)
    if inits is None:
        inits = [initialize(f, rig, template, weights, priors, config) for f in frames]
    return [fit_frame(f, rig, priors, weights, p, template, config=config)[0] for f, p in zip(frames, inits)]
