import numpy as np
import pytest

from pedfit.body_model import (
    KEYPOINT_NAMES, N_JOINTS, BodyParams, SkeletonTemplate, backprop, bone_lengths, capsules, forward_kinematics,
    jacobians, keypoints_from_body, load_template, rotate_params, save_template, shape_skeleton,
)
from pedfit.rotations import rodrigues

from conftest import random_params


def _with_basis(t, basis):
    return SkeletonTemplate(t.parents, t.joints, basis, t.radii, np.zeros((len(basis), N_JOINTS - 1)),
                            t.keypoint_names, t.keypoint_joints, t.keypoint_offsets)


def test_zero_shape_gives_template_joints(template):
    joints, radii = shape_skeleton(template, np.zeros(template.n_shape))
    assert np.array_equal(joints, template.joints)
    assert np.array_equal(radii, template.radii)


def test_stature_basis_scales_every_joint(template):
    basis = np.zeros((3, N_JOINTS, 3))
    basis[0, :, 1] = 0.01 * template.joints[:, 1]
    t = _with_basis(template, basis)
    joints, _ = shape_skeleton(t, [1.0, 0.0, 0.0])
    expected = template.joints.copy()
    expected[:, 1] = template.joints[:, 1] + 0.01 * template.joints[:, 1]
    assert np.array_equal(joints, expected)


def test_shape_dimension_mismatch(template):
    with pytest.raises(ValueError):
        shape_skeleton(template, np.zeros(template.n_shape + 1))


def test_radii_clamped_at_one_millimetre(template):
    _, radii = shape_skeleton(template, np.full(template.n_shape, -200.0))
    assert radii.min() >= 1e-3


def test_fk_identity_and_translation(template):
    p = BodyParams.zeros(template.n_shape)
    body = forward_kinematics(template, p)
    assert np.abs(body.joint_positions - template.joints).max() < 1e-12
    p.translation = np.array([0.0, 0.0, 20.0])
    shifted = forward_kinematics(template, p)
    assert np.allclose(shifted.joint_positions - body.joint_positions, [0, 0, 20], atol=1e-12, rtol=0)


def test_fk_half_turn_about_y(template):
    p = BodyParams.zeros(template.n_shape)
    p.pose[:3] = [0.0, np.pi, 0.0]
    j = forward_kinematics(template, p).joint_positions
    root = template.joints[0]
    rel0 = template.joints - root
    rel = j - root
    assert np.allclose(rel[:, [0, 2]], -rel0[:, [0, 2]], atol=1e-12)
    assert np.allclose(rel[:, 1], rel0[:, 1], atol=1e-12)


def test_surface_count_and_capsule_bound(template, template64):
    rng = np.random.default_rng(1)
    for t in (template, template64):
        p = random_params(rng, t)
        body = forward_kinematics(t, p)
        assert body.surface_points.shape == ((N_JOINTS - 1) * t.samples_per_bone, 3)
        a, b, r = capsules(t, p, body)
        bone = t._surface["bone"] - 1
        ab = b[bone] - a[bone]
        s = np.clip(np.einsum("ij,ij->i", body.surface_points - a[bone], ab) / np.einsum("ij,ij->i", ab, ab), 0, 1)
        d = np.linalg.norm(body.surface_points - (a[bone] + s[:, None] * ab), axis=1)
        assert np.all(d <= r[bone] + 1e-9)
        assert np.allclose(np.linalg.norm(body.surface_normals, axis=1), 1.0)


def test_keypoints_neutral_facial_offsets(template):
    body = forward_kinematics(template, BodyParams.zeros(template.n_shape))
    kp = keypoints_from_body(body, template)
    assert np.array_equal(kp, body.keypoints3d)
    for name in ("nose", "reye", "leye", "head"):
        i = KEYPOINT_NAMES.index(name)
        assert np.allclose(kp[i], template.joints[template.keypoint_joints[i]] + template.keypoint_offsets[i])
    hip = KEYPOINT_NAMES.index("hip")
    assert np.allclose(template.keypoint_offsets[hip], 0.0)
    assert np.array_equal(kp[hip], body.joint_positions[0])


def test_half_turn_mirrors_left_right_without_label_swap(template):
    p = BodyParams.zeros(template.n_shape)
    kp0 = forward_kinematics(template, p).keypoints3d - template.joints[0]
    p.pose[:3] = [0.0, np.pi, 0.0]
    kp1 = forward_kinematics(template, p).keypoints3d - template.joints[0]
    for name in ("lsho", "rsho", "lhip", "rhip", "lwri", "rwri"):
        i = KEYPOINT_NAMES.index(name)
        assert np.sign(kp1[i, 0]) == -np.sign(kp0[i, 0])
        assert kp1[i, 0] == pytest.approx(-kp0[i, 0], abs=1e-12)
    # the template's left side is +x
    assert kp0[KEYPOINT_NAMES.index("lsho"), 0] > 0


def test_rigid_equivariance(template):
    rng = np.random.default_rng(2)
    for _ in range(10):
        p = random_params(rng, template)
        R = rodrigues(rng.normal(size=3))
        s = rng.normal(size=3)
        b0 = forward_kinematics(template, p)
        b1 = forward_kinematics(template, rotate_params(template, p, R, s))
        for a, b in ((b0.joint_positions, b1.joint_positions), (b0.keypoints3d, b1.keypoints3d),
                     (b0.surface_points, b1.surface_points)):
            assert np.abs(a @ R.T + s - b).max() < 1e-9
        assert np.abs(b0.surface_normals @ R.T - b1.surface_normals).max() < 1e-9


def test_bone_lengths_depend_on_shape_only(template):
    rng = np.random.default_rng(3)
    p = random_params(rng, template)
    ref = bone_lengths(template, p.shape)
    for _ in range(5):
        q = p.copy()
        q.pose = rng.normal(0, 1.0, 72)
        q.translation = rng.normal(size=3) * 10
        j = forward_kinematics(template, q).joint_positions
        lengths = np.linalg.norm(j[1:] - j[template.parents[1:]], axis=1)
        assert np.abs(lengths - ref).max() < 1e-9


def test_template_file_round_trip(template, tmp_path):
    path = tmp_path / "template.json"
    save_template(template, path)
    t = load_template(path)
    for name in ("parents", "joints", "shape_basis", "radii", "radius_basis", "keypoint_offsets"):
        assert np.array_equal(getattr(t, name), getattr(template, name))
    assert t.keypoint_names == template.keypoint_names


def test_template_rejects_two_roots(template):
    parents = template.parents.copy()
    parents[3] = -1
    with pytest.raises(ValueError):
        SkeletonTemplate(parents, template.joints, template.shape_basis, template.radii, template.radius_basis,
                         template.keypoint_names, template.keypoint_joints, template.keypoint_offsets)


def test_body_params_validation():
    with pytest.raises(ValueError):
        BodyParams(np.zeros(71), np.zeros(10), np.zeros(3))
    with pytest.raises(ValueError):
        BodyParams(np.full(72, np.nan), np.zeros(10), np.zeros(3))


def test_jacobians_match_finite_differences(template):
    rng = np.random.default_rng(4)
    p = random_params(rng, template)
    body = forward_kinematics(template, p)
    idx = np.arange(0, len(body.surface_points), 7)
    Jk, Js = jacobians(template, body, idx)
    x = p.to_vector()
    h = 1e-6
    num_k = np.zeros_like(Jk)
    num_s = np.zeros_like(Js)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        bp = forward_kinematics(template, BodyParams.from_vector(xp, template.n_shape))
        bm = forward_kinematics(template, BodyParams.from_vector(xm, template.n_shape))
        num_k[:, :, i] = (bp.keypoints3d - bm.keypoints3d) / (2 * h)
        num_s[:, :, i] = (bp.surface_points[idx] - bm.surface_points[idx]) / (2 * h)
    assert np.abs(Jk - num_k).max() < 1e-6
    assert np.abs(Js - num_s).max() < 1e-6


def test_backprop_is_jacobian_transpose(template):
    rng = np.random.default_rng(5)
    p = random_params(rng, template)
    body = forward_kinematics(template, p)
    gk = rng.normal(size=body.keypoints3d.shape)
    idx = np.arange(0, len(body.surface_points), 5)
    gs = rng.normal(size=(len(idx), 3))
    Jk, Js = jacobians(template, body, idx)
    expected = np.einsum("nc,ncp->p", gk, Jk) + np.einsum("nc,ncp->p", gs, Js)
    got = backprop(template, body, keypoint_grad=gk, surface_grad=gs, surface_index=idx)
    assert np.allclose(got, expected, atol=1e-10)
