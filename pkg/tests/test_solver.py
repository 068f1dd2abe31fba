import numpy as np
import pytest

from pedfit.body_model import BodyParams, TORSO_KEYPOINTS, forward_kinematics
from pedfit.energies import EnergyWeights, FrameObservation
from pedfit.evaluation import JointSeries, labelled, mpjpe_global
from pedfit.pointcloud import LabeledCloud
from pedfit.priors import Priors
from pedfit.rotations import rodrigues, yaw_to
from pedfit.solver import (AdmmConfig, FitError, fit_frame, fit_independent, fit_sequence, frame_energy,
                           init_params, init_single_frame)
from pedfit.stereo import triangulate
from pedfit.synth import SceneSpec, make_scene, render_observation

from conftest import random_params

J_ONLY = EnergyWeights(w_J=1.0, w_3d=0, w_P=0, w_T=0, w_D=0, w_tp=0)


def perturbed(p, dt=(0.3, 0.0, 0.0), yaw_deg=10.0):
    q = p.copy()
    q.translation = q.translation + np.asarray(dt)
    R = rodrigues(np.array([0.0, np.radians(yaw_deg), 0.0])) @ rodrigues(q.pose[:3])
    from pedfit.rotations import matrix_to_axis_angle

    q.pose[:3] = matrix_to_axis_angle(R)
    return q


@pytest.fixture(scope="module")
def scene(template):
    return make_scene(SceneSpec(n_frames=3), template, seed=11)


def test_yaw_to():
    assert np.allclose(yaw_to([1, 0, 0], [1, 0, 0], [0, 1, 0]), 0.0)
    w = yaw_to([1, 0, 0], [-1, 0, 0], [0, 1, 0])
    assert np.linalg.norm(w) == pytest.approx(np.pi)
    assert np.allclose(rodrigues(w) @ [1, 0, 0], [-1, 0, 0], atol=1e-12)


def test_init_params_heading(template, scene):
    obs = scene.frames[0]
    obs.heading = template.forward_axis.copy()
    p = init_params(obs, None, template)
    assert np.allclose(p.pose[:3], 0.0)
    assert np.allclose(p.translation + template.joints[0], obs.cloud.points.mean(axis=0))
    obs.heading = -template.forward_axis
    p = init_params(obs, None, template)
    assert np.linalg.norm(p.pose[:3]) == pytest.approx(np.pi)
    obs.heading = None


def test_init_params_triangulated_hips(template, rig):
    truth = random_params(np.random.default_rng(0), template)
    obs = render_observation(truth, template, rig)
    p = init_params(obs, rig, template)
    idx = template.keypoint_index(("rhip", "lhip"))
    hips = triangulate(rig, obs.joints2d_left[idx], obs.joints2d_right[idx]).mean(axis=0)
    assert np.allclose(p.translation + template.joints[0], hips, atol=1e-12)


def test_init_params_without_observations(template, rig):
    obs = FrameObservation(np.zeros((18, 2)), np.zeros((18, 2)), np.zeros(18), np.zeros(18))
    with pytest.raises(FitError):
        init_params(obs, rig, template)


@pytest.mark.parametrize("yaw", [0.0, 0.4, np.pi])
def test_single_frame_init_recovers_yaw(template, rig, yaw):
    truth = BodyParams.zeros(template.n_shape)
    truth.pose[:3] = [0.0, yaw, 0.0]
    truth.translation = np.array([0.0, 1.0, 20.0])
    obs = render_observation(truth, template, rig, noise_px=0.5, seed=1)
    p = init_single_frame(obs, rig, template, EnergyWeights())
    f_true = rodrigues(truth.pose[:3]) @ template.forward_axis
    f_est = rodrigues(p.pose[:3]) @ template.forward_axis
    assert np.degrees(np.arccos(np.clip(f_true @ f_est, -1, 1))) < 15


def test_single_frame_init_needs_torso(template, rig):
    truth = random_params(np.random.default_rng(2), template)
    obs = render_observation(truth, template, rig)
    torso = template.keypoint_index(TORSO_KEYPOINTS)
    obs.visibility_left[torso[1:]] = 0
    with pytest.raises(FitError):
        init_single_frame(obs, rig, template, EnergyWeights())


def test_fit_frame_fixed_point(template, rig):
    truth = random_params(np.random.default_rng(3), template, scale=0.2)
    obs = render_observation(truth, template, rig)
    p, rep = fit_frame(obs, rig, None, J_ONLY, truth, template)
    assert np.array_equal(p.to_vector(), truth.to_vector())
    assert rep["total"] == pytest.approx(0.0, abs=1e-18)


def test_fit_frame_zero_weights_returns_init(template, scene, rig):
    init = perturbed(scene.gt[0])
    p, _ = fit_frame(scene.frames[0], rig, None, EnergyWeights(0, 0, 0, 0, 0, 0), init, template)
    assert np.array_equal(p.to_vector(), init.to_vector())


def test_fit_frame_never_increases_energy(template, rig, priors):
    rng = np.random.default_rng(4)
    for seed in range(3):
        s = make_scene(SceneSpec(n_frames=1, noise_px=3.0, dropout=0.3), template, rig, seed=seed)
        obs = s.frames[0]
        init = random_params(rng, template, scale=0.5)
        init.translation = s.gt[0].translation + rng.normal(0, 0.5, 3)
        e0, _ = frame_energy(init, obs, rig, priors, EnergyWeights(), template)
        _, rep = fit_frame(obs, rig, priors, EnergyWeights(), init, template)
        assert rep["total"] <= e0


def test_fit_frame_recovers_perturbed_init(template, scene, rig, priors):
    obs, truth = scene.frames[1], scene.gt[1]
    p, _ = fit_frame(obs, rig, priors, EnergyWeights(), perturbed(truth), template)
    gt = JointSeries.from_params([truth], template, labelled([obs]))
    pred = JointSeries.from_params([p], template)
    assert mpjpe_global(pred, gt).mean < 20.0


def test_fit_frame_non_finite_init(template, scene, rig):
    bad = scene.gt[0].copy()
    bad.translation = np.array([0.0, 1.0, 0.0])  # at the camera: projection blows up
    obs = FrameObservation(scene.frames[0].joints2d_left, scene.frames[0].joints2d_right,
                           scene.frames[0].visibility_left, scene.frames[0].visibility_right,
                           cloud=LabeledCloud(np.full((1, 3), 1e308)))
    with pytest.raises(FitError):
        fit_frame(obs, rig, None, EnergyWeights(w_T=1e300), bad, template)


def test_sequence_single_frame_equals_fit_frame(template, scene, rig, priors):
    frames = scene.frames[:1]
    init = perturbed(scene.gt[0])
    res = fit_sequence(frames, rig, priors, EnergyWeights(), template, inits=[init], auto_heading=False)
    p, _ = fit_frame(frames[0], rig, priors, EnergyWeights(), init, template)
    assert np.array_equal(res.params[0].to_vector(), p.to_vector())


def test_sequence_errors(template, scene, rig):
    with pytest.raises(FitError):
        fit_sequence([], rig, None, EnergyWeights(), template)
    a, b = scene.frames[0], scene.frames[1]
    b2 = FrameObservation(b.joints2d_left, b.joints2d_right, b.visibility_left, b.visibility_right,
                          cloud=b.cloud, timestamp=b.timestamp, track_id="other")
    with pytest.raises(FitError):
        fit_sequence([a, b2], rig, None, EnergyWeights(), template)
    with pytest.raises(FitError):
        fit_sequence([b, a], rig, None, EnergyWeights(), template)


def _check_admm_identities(res, rho):
    st = res.admm
    u_prev = np.zeros_like(st.dual_var_history[0])
    for local, beta, u in zip(st.local_history, st.consensus_history, st.dual_var_history):
        assert np.abs(beta - np.mean(local + u_prev, axis=0)).max() <= 1e-12
        assert np.abs((u - u_prev) - (local - beta)).max() <= 1e-12
        u_prev = u
    if res.converged:
        assert st.primal_history[-1] <= 0.05 and st.dual_history[-1] <= 0.05
    assert st.rho == rho


def test_admm_contract_on_noisy_walk(template64, rig, priors):
    s = make_scene(SceneSpec(n_frames=5, noise_px=2.0, dropout=0.3), template64, rig, seed=5)
    res = fit_sequence(s.frames, rig, priors, EnergyWeights(), template64)
    _check_admm_identities(res, 2.0)
    assert res.converged
    shapes = np.array([p.shape for p in res.params])
    assert np.array_equal(shapes, np.repeat(shapes[:1], 5, axis=0))
    gt = JointSeries.from_params(s.gt, template64, labelled(s.frames))
    ours = mpjpe_global(JointSeries.from_params(res.params, template64), gt).mean
    indep = fit_independent(s.frames, rig, priors, EnergyWeights(), template64)
    theirs = mpjpe_global(JointSeries.from_params(indep, template64), gt).mean
    assert ours < theirs


def test_admm_identical_frames_share_shape(template, rig, priors):
    s = make_scene(SceneSpec(n_frames=1, noise_px=1.0), template, rig, seed=6)
    f = s.frames[0]
    frames = [FrameObservation(f.joints2d_left, f.joints2d_right, f.visibility_left, f.visibility_right,
                               f.masks, f.cloud, None, 0.1 * k, 0, k) for k in range(3)]
    res = fit_sequence(frames, rig, Priors(priors.pose, None), EnergyWeights(), template, auto_heading=False,
                       admm=AdmmConfig(max_iter=3))
    st = res.admm
    for local, u in zip(st.local_history, st.dual_var_history):
        assert np.abs(local - local[0]).max() <= 1e-12
        assert np.abs(u).max() <= 1e-12
    _check_admm_identities(res, 2.0)


def test_sequence_deterministic(template, scene, rig, priors):
    a = fit_sequence(scene.frames, rig, priors, EnergyWeights(), template, admm=AdmmConfig(max_iter=2))
    b = fit_sequence(scene.frames, rig, priors, EnergyWeights(), template, admm=AdmmConfig(max_iter=2))
    for p, q in zip(a.params, b.params):
        assert np.array_equal(p.to_vector(), q.to_vector())


def test_admm_config_validation():
    with pytest.raises(ValueError):
        AdmmConfig(rho=0)
