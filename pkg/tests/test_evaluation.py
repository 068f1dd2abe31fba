import warnings

import numpy as np
import pytest

from pedfit.body_model import KEYPOINT_NAMES
from pedfit.energies import EnergyWeights
from pedfit.evaluation import (ABLATION_COLUMNS, ABLATION_ROWS, TABLE_JOINTS, AblationRow, JointSeries, MetricError,
                               ablation_csv, ablation_weights, baseline_left_disp, baseline_monofit_disp,
                               baseline_triangulation, labelled, mean_disparity, metrics_csv, mpjpe_global,
                               mpjpe_relative, run_ablation, similarity_align, synthetic_disparities)
from pedfit.rotations import rodrigues
from pedfit.stereo import depth_from_disparity, project
from pedfit.synth import SceneSpec, make_scene

RKNEE = KEYPOINT_NAMES.index("rknee")


def random_series(rng, frames=6, valid_p=1.0):
    pos = rng.normal(size=(frames, 13, 3)) * 0.4 + [0, 1, 20]
    valid = rng.random((frames, 13)) < valid_p
    return JointSeries(pos, valid)


def transformed(s, scale, R, t):
    return JointSeries(scale * s.positions @ R.T + t, s.valid, s.names)


def test_global_identities():
    rng = np.random.default_rng(0)
    gt = random_series(rng)
    assert mpjpe_global(gt, gt).mean == 0.0
    shifted = JointSeries(gt.positions + [0.1, 0.0, 0.0], gt.valid)
    m = mpjpe_global(shifted, gt)
    assert m.mean == pytest.approx(100.0, abs=1e-9) and np.allclose(m.per_joint, 100.0, atol=1e-9)
    v = np.array([0.03, -0.04, 0.12])
    assert mpjpe_global(JointSeries(gt.positions + v, gt.valid), gt).mean == pytest.approx(
        1000 * np.linalg.norm(v), abs=1e-9)


def test_global_symmetric():
    rng = np.random.default_rng(1)
    a, b = random_series(rng, valid_p=0.7), random_series(rng, valid_p=0.7)
    assert mpjpe_global(a, b).mean == mpjpe_global(b, a).mean


def test_weighted_mean_matches_brute_force():
    rng = np.random.default_rng(2)
    gt, pred = random_series(rng, 20, 0.6), random_series(rng, 20, 0.8)
    m = mpjpe_global(pred, gt)
    total, count = 0.0, 0
    per = {}
    for f in range(20):
        for j in range(13):
            if gt.valid[f, j] and pred.valid[f, j]:
                e = 1000 * np.sqrt(sum((pred.positions[f, j, c] - gt.positions[f, j, c]) ** 2 for c in range(3)))
                total += e
                count += 1
                per.setdefault(j, []).append(e)
    assert abs(m.mean - total / count) <= 1e-9
    for j, errs in per.items():
        assert abs(m.per_joint[j] - sum(errs) / len(errs)) <= 1e-9
        assert m.counts[j] == len(errs)
    assert abs(m.mean - np.nansum(m.per_joint * m.counts) / m.counts.sum()) <= 1e-9


def test_no_overlap_is_an_error():
    rng = np.random.default_rng(3)
    a = random_series(rng)
    b = JointSeries(a.positions, np.zeros_like(a.valid))
    with pytest.raises(MetricError):
        mpjpe_global(a, b)


def test_relative_similarity_invariance():
    rng = np.random.default_rng(4)
    gt = random_series(rng)
    for _ in range(5):
        R = rodrigues(rng.normal(size=3))
        pred = transformed(gt, rng.uniform(0.5, 2.0), R, rng.normal(size=3) * 5)
        assert mpjpe_relative(pred, gt).mean <= 1e-9
        noisy = JointSeries(gt.positions + rng.normal(0, 0.02, gt.positions.shape), gt.valid)
        a = mpjpe_relative(noisy, gt).mean
        b = mpjpe_relative(transformed(noisy, 1.7, R, [1.0, 2.0, 3.0]), gt).mean
        assert abs(a - b) <= 1e-9


def test_relative_single_joint_offset_matches_procrustes_oracle():
    rng = np.random.default_rng(5)
    gt = random_series(rng, frames=1)
    pos = gt.positions.copy()
    pos[0, 4] += [0.03, 0.0, 0.0]
    pred = JointSeries(pos, gt.valid)
    m = mpjpe_relative(pred, gt)
    # independent closed-form Procrustes (Umeyama via the cross-covariance SVD)
    X, Y = pos[0], gt.positions[0]
    Xc, Yc = X - X.mean(0), Y - Y.mean(0)
    U, S, Vt = np.linalg.svd(Xc.T @ Yc)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    Rm = Vt.T @ np.diag([1, 1, d]) @ U.T
    s = (S * [1, 1, d]).sum() / (Xc ** 2).sum()
    aligned = s * Xc @ Rm.T + Y.mean(0)
    err = 1000 * np.linalg.norm(aligned - Y, axis=1)
    assert np.allclose(m.per_joint, err, atol=1e-9)
    assert np.argmax(m.per_joint) == 4


def test_relative_excludes_reflection():
    rng = np.random.default_rng(6)
    gt = random_series(rng, frames=3)
    mirrored = JointSeries(gt.positions * [-1, 1, 1], gt.valid)
    assert mpjpe_relative(mirrored, gt).mean > 10.0
    s, R, _ = similarity_align(mirrored.positions[0], gt.positions[0])
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_relative_skips_sparse_frames():
    rng = np.random.default_rng(7)
    gt = random_series(rng, frames=3)
    valid = gt.valid.copy()
    valid[1, 2:] = False
    pred = JointSeries(gt.positions, valid)
    with pytest.warns(RuntimeWarning):
        m = mpjpe_relative(pred, gt)
    assert m.counts.sum() == 26


def test_series_validation():
    with pytest.raises(ValueError):
        JointSeries(np.zeros((2, 12, 3)), np.ones((2, 12)))
    a = JointSeries(np.zeros((1, 13, 3)), np.ones((1, 13)))
    b = JointSeries(np.zeros((1, 3, 3)), np.ones((1, 3)), ("a", "b", "c"))
    with pytest.raises(MetricError):
        mpjpe_global(a, b)


@pytest.fixture(scope="module")
def clean_scene(template):
    return make_scene(SceneSpec(n_frames=2), template, seed=3)


def test_triangulation_exact_on_noiseless(clean_scene, template, rig):
    s = clean_scene
    gt = JointSeries.from_params(s.gt, template, labelled(s.frames))
    tri = baseline_triangulation(s.frames, rig)
    assert np.array_equal(tri.valid, gt.valid)
    assert mpjpe_global(tri, gt).mean < 1e-6


def test_triangulation_invisible_right_is_invalid(clean_scene, rig):
    f = clean_scene.frames[0]
    f2 = type(f)(f.joints2d_left, f.joints2d_right, f.visibility_left, np.where(np.arange(18) == RKNEE, 0, 2))
    tri = baseline_triangulation([f2], rig)
    assert not tri.valid[0, TABLE_JOINTS.index("rknee")]


def test_triangulation_noise_matches_perturbation_oracle(rig):
    # 2 px disparity error at 20 m: dZ ~ Z^2 / (f b) * 2 px = 1.6 m
    cx, cy = rig.principal_point
    from pedfit.stereo import triangulate

    z0 = rig.global_to_cam.apply(triangulate(rig, [cx, cy], [cx - 25, cy]))[2]
    z1 = rig.global_to_cam.apply(triangulate(rig, [cx, cy], [cx - 23, cy]))[2]
    assert z1 - z0 == pytest.approx(1000 * 0.5 / 23 - 20, rel=1e-12)
    assert 1.0 < z1 - z0 < 2.0


def test_left_disp(clean_scene, template, rig):
    s = clean_scene
    gt = JointSeries.from_params(s.gt, template, labelled(s.frames))
    exact = synthetic_disparities(s.gt, template, rig, noise_px=0.0)
    assert mpjpe_global(baseline_left_disp(s.frames, rig, exact), gt).mean < 1e-6
    biased = baseline_left_disp(s.frames, rig, exact + 1.0)
    zc = rig.camera_points(gt.positions.reshape(-1, 3), "left")[:, 2]
    zb = rig.camera_points(biased.positions.reshape(-1, 3), "left")[:, 2]
    expected = rig.focal * rig.baseline / (rig.focal * rig.baseline / zc + 1.0)
    assert np.allclose(zb, expected, atol=1e-9)


def test_left_disp_falls_back_to_triangulation(clean_scene, template, rig):
    f = clean_scene.frames[0]
    vis_l = f.visibility_left.copy()
    vis_l[RKNEE] = 0
    uv_r = f.joints2d_right
    # keep the right label but drop the left one: no triangulation either -> invalid
    g = type(f)(f.joints2d_left, uv_r, vis_l, f.visibility_right)
    disp = synthetic_disparities(clean_scene.gt[:1], template, rig, 0.0)
    out = baseline_left_disp([g], rig, disp)
    assert not out.valid[0, TABLE_JOINTS.index("rknee")]
    # a nonpositive disparity makes the joint fall back to the triangulated value
    disp[0, RKNEE] = -1.0
    out = baseline_left_disp([f], rig, disp)
    tri = baseline_triangulation([f], rig)
    j = TABLE_JOINTS.index("rknee")
    assert np.array_equal(out.positions[0, j], tri.positions[0, j])


def test_mean_disparity_hand_sum(clean_scene):
    f = clean_scene.frames[0]
    d = np.arange(18, dtype=float)
    assert mean_disparity(f, d) == sum(range(18)) / 18
    g = type(f)(f.joints2d_left, f.joints2d_right, np.zeros(18, dtype=int), f.visibility_right)
    assert mean_disparity(g, d) is None


def test_monofit_disp(clean_scene, template, rig, priors):
    s = clean_scene
    gt = JointSeries.from_params(s.gt, template, labelled(s.frames))
    disp = synthetic_disparities(s.gt, template, rig, 0.0)
    mono = baseline_monofit_disp(s.frames[:1], rig, priors, template, disp[:1])
    gt1 = JointSeries(gt.positions[:1], gt.valid[:1])
    assert mpjpe_relative(mono, gt1).mean < 60
    assert mpjpe_global(mono, gt1).mean > mpjpe_relative(mono, gt1).mean
    # no visible joints: invalid frame
    f = s.frames[0]
    blind = type(f)(f.joints2d_left, f.joints2d_right, np.zeros(18, dtype=int), np.zeros(18, dtype=int))
    out = baseline_monofit_disp([blind], rig, priors, template, disp[:1])
    assert not out.valid.any()


def test_ablation_weights():
    base = EnergyWeights()
    w = ablation_weights(base, {"E_J_l", "E_T"})
    assert not w.use_right and w.use_left and w.w_3d == 0 and w.w_tp == 0 and w.w_T == base.w_T
    with pytest.raises(ValueError):
        ablation_weights(base, set())
    with pytest.raises(ValueError):
        ablation_weights(base, {"E_T"})
    with pytest.raises(ValueError):
        ablation_weights(base, {"E_J_l", "E_X"})
    assert len(ABLATION_ROWS) == 6


def test_ablation_csv_layout(clean_scene, template, rig):
    s = clean_scene
    gt = JointSeries.from_params(s.gt, template, labelled(s.frames))
    rows = run_ablation(s.frames, rig, None, template, gt, EnergyWeights(), masks=[ABLATION_ROWS[0]])
    assert isinstance(rows[0], AblationRow)
    text = ablation_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0].split(",") == list(ABLATION_COLUMNS)
    assert lines[1].split(",")[:6] == ["1", "1", "1", "0", "0", "0"]
    with pytest.raises(ValueError):
        run_ablation(s.frames, rig, None, template, gt, EnergyWeights(), masks=[frozenset()])


def test_metrics_csv():
    rng = np.random.default_rng(8)
    gt = random_series(rng)
    text = metrics_csv({"global": mpjpe_global(gt, gt)})
    header, row = text.strip().split("\n")
    assert header.split(",") == ["frame_set", *TABLE_JOINTS, "mean"]
    assert row.split(",")[-1] == "0.000"
