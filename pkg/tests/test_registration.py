import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import blob, random_motion, rendered_cloud
from diffslam import diffcore as dc
from diffslam.gradcheck import check_registration
from diffslam.geometry import Pose, compose, exp_se3, inverse, relative_angle
from diffslam.registration import (
    DegenerateGeometryError,
    MatchLog,
    NNIndex,
    SoftLMConfig,
    find_correspondences,
    gauss_newton_delta,
    register_pair,
    register_pair_hard,
    soft_damping,
    soft_update,
    update_gate,
    voxel_downsample,
)


def test_config_validation():
    with pytest.raises(ValueError):
        SoftLMConfig(lambda_min=1.0, lambda_max=0.5)
    with pytest.raises(ValueError):
        SoftLMConfig(iterations=0)
    with pytest.raises(ValueError):
        SoftLMConfig(max_corr_dist=0.0)
    with pytest.raises(ValueError):
        SoftLMConfig(sigma=-1.0)


# -- correspondences -------------------------------------------------------

def test_identical_clouds_match_themselves():
    p = blob(0, 50)
    _, idx, w = find_correspondences(p, p, NNIndex(p), 1.0, 0.05)
    np.testing.assert_array_equal(idx, np.arange(50))
    np.testing.assert_allclose(w.value, 1.0 / (1.0 + np.exp(-20.0)))


def test_weight_is_half_at_max_distance():
    tgt = np.array([[0.0, 0, 0], [10, 0, 0], [0, 10, 0], [0, 0, 10]])
    _, _, w = find_correspondences(np.array([[0.0, 0.0, 1.0]]), tgt, NNIndex(tgt), 1.0, 0.05)
    assert w.value[0] == 0.5


def test_nearest_neighbours_match_brute_force():
    rng = np.random.default_rng(1)
    src, tgt = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
    _, idx, _ = find_correspondences(src, tgt, NNIndex(tgt), 1.0, 0.05)
    brute = np.argmin(((src[:, None, :] - tgt[None, :, :]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(idx, brute)


def test_point_weights_multiply():
    p = blob(2, 10)
    pw = np.linspace(0.1, 1.0, 10)
    tw = np.linspace(1.0, 0.5, 10)
    _, _, w0 = find_correspondences(p, p, NNIndex(p), 1.0, 0.05)
    _, _, w1 = find_correspondences(p, p, NNIndex(p), 1.0, 0.05, pw, tw)
    np.testing.assert_allclose(w1.value, w0.value * pw * tw)


def test_empty_inputs_rejected():
    p = blob(3, 10)
    with pytest.raises(ValueError):
        find_correspondences(np.zeros((0, 3)), p, NNIndex(p), 1.0, 0.05)
    with pytest.raises(ValueError):
        NNIndex(np.zeros((3, 3)))


# -- Gauss-Newton step ------------------------------------------------------

def test_zero_residual_gives_zero_step():
    p = blob(4, 30)
    delta, r = gauss_newton_delta(p, p, np.ones(30), 1e-4)
    np.testing.assert_array_equal(delta.value, np.zeros(6))
    assert r.value == 0.0


def test_pure_translation_recovered_in_one_step():
    p = blob(5, 40)
    q = p + np.array([0.1, 0.0, 0.0])
    delta, _ = gauss_newton_delta(p, q, np.ones(40), 0.0)
    moved = exp_se3(delta.value).apply(p)
    assert np.max(np.abs(moved - q)) <= 1e-9
    np.testing.assert_allclose(delta.value, [0, 0, 0, 0.1, 0, 0], atol=1e-9)


def test_step_matches_dense_jacobian():
    rng = np.random.default_rng(6)
    p, q, w = rng.normal(size=(25, 3)), rng.normal(size=(25, 3)), rng.uniform(0.2, 1.0, 25)
    lam = 0.3
    jac = np.zeros((75, 6))
    for i in range(25):
        px, py, pz = p[i]
        jac[3 * i:3 * i + 3, :3] = -w[i] * np.array([[0, -pz, py], [pz, 0, -px], [-py, px, 0]])
        jac[3 * i:3 * i + 3, 3:] = w[i] * np.eye(3)
    e = (w[:, None] * (p - q)).ravel()
    h = jac.T @ jac
    expected = -np.linalg.solve(h + lam * np.diag(np.diag(h)), jac.T @ e)
    delta, r = gauss_newton_delta(p, q, w, lam)
    np.testing.assert_allclose(delta.value, expected, rtol=1e-10, atol=1e-12)
    assert r.value == pytest.approx(np.linalg.norm(e), rel=1e-12)


def test_collinear_correspondences_are_degenerate():
    p = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(DegenerateGeometryError, match="degenerate geometry"):
        gauss_newton_delta(p, p + 0.1, np.ones(3), 1e-4)


def test_too_few_weighted_correspondences_are_degenerate():
    p = blob(7, 20)
    w = np.zeros(20)
    w[:2] = 1.0
    with pytest.raises(DegenerateGeometryError):
        gauss_newton_delta(p, p + 0.1, w, 1e-4)


# -- soft damping and gate -------------------------------------------------

def test_soft_damping_at_equal_residuals():
    cfg = SoftLMConfig()
    assert soft_damping(1.0, 1.0, cfg).value == cfg.lambda_min + (cfg.lambda_max - cfg.lambda_min) / (1 + cfg.D)


def test_soft_damping_worked_value():
    cfg = SoftLMConfig(lambda_min=1e-4, lambda_max=1e2, D=1.0, sigma=10.0)
    expected = 1e-4 + (1e2 - 1e-4) / (1 + np.exp(-2.0))
    assert soft_damping(1.0, 1.2, cfg).value == pytest.approx(expected, rel=1e-14)
    assert soft_damping(1.0, 1.2, cfg).value == pytest.approx(88.0797, abs=1e-4)


def test_soft_damping_limits_and_bounds():
    cfg = SoftLMConfig(sigma=1e4)
    assert soft_damping(10.0, 0.0, cfg).value == pytest.approx(cfg.lambda_min, abs=1e-15)
    assert soft_damping(0.0, 10.0, cfg).value == pytest.approx(cfg.lambda_max)
    for r1 in np.linspace(0, 5, 21):
        lam = soft_damping(2.5, r1, cfg).value
        assert cfg.lambda_min <= lam <= cfg.lambda_max


def test_soft_damping_gradient():
    cfg = SoftLMConfig(sigma=3.0, lambda_max=2.0)
    err = dc.grad_check(lambda r: soft_damping(r[0], r[1], cfg), [1.0, 1.3])
    assert err <= 1e-6


def test_gate_values():
    assert update_gate(1.0, 1.0).value == 0.5
    assert update_gate(10.0, 0.0).value == pytest.approx(1.0, abs=1e-4)
    assert update_gate(1.0, 2.0).value == pytest.approx(0.2689414213699951, abs=1e-12)


def test_soft_update_half_step_at_equal_residuals():
    x = exp_se3([0.1, -0.2, 0.05, 1.0, 2.0, -0.5])
    delta = np.array([0.02, 0.01, -0.03, 0.1, -0.2, 0.05])
    out = soft_update(x, delta, 0.7, 0.7).detach()
    manual = compose(exp_se3(0.5 * delta), x)
    np.testing.assert_allclose(out.rotation, manual.rotation, atol=1e-15)
    np.testing.assert_allclose(out.translation, manual.translation, atol=1e-15)


# -- full solver ------------------------------------------------------------

def _pose_errors(est: Pose, truth: Pose):
    return np.linalg.norm(est.translation - truth.translation), np.rad2deg(relative_angle(est.rotation, truth.rotation))


def test_identical_scans_register_to_identity():
    p = rendered_cloud(0, 256)
    res = register_pair(p, p)
    pose = res.relative_pose.detach()
    np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-6)
    np.testing.assert_allclose(pose.translation, 0.0, atol=1e-6)
    assert res.final_residual.value <= 1e-9
    assert len(res.per_iteration_residuals) == 30


def test_shift_recovered():
    p = rendered_cloud(0, 512)
    # target = source shifted, so the source must move by +0.1 in x
    res = register_pair(p, p + np.array([0.1, 0.0, 0.0]))
    np.testing.assert_allclose(res.relative_pose.detach().translation, [0.1, 0, 0], atol=1e-3)


def test_rotation_and_shift_recovered():
    p = rendered_cloud(1, 512)
    truth = exp_se3([0, 0, np.deg2rad(5.0), 0, 0, 0])
    truth = Pose(truth.rotation, [0.2, 0.1, 0.0])
    res = register_pair(p, truth.apply(p))
    dt, da = _pose_errors(res.relative_pose.detach(), truth)
    assert dt <= 1e-2 and da <= 0.5


def test_pose_recovery_on_generic_clouds():
    rng = np.random.default_rng(11)
    ok = 0
    for k in range(50):
        p = blob(300 + k, 500)
        truth = random_motion(rng, 0.5, 10.0)
        dt, da = _pose_errors(register_pair(p, truth.apply(p) + rng.normal(0, 0.005, p.shape)).relative_pose.detach(), truth)
        ok += dt <= 1e-2 and da <= 0.5
    assert ok >= 48


def test_residuals_mostly_non_increasing():
    rng = np.random.default_rng(8)
    steps = ups = 0
    for k in range(50):
        p = blob(100 + k, 150)
        res = register_pair(p, random_motion(rng, 0.3, 5.0).apply(p), SoftLMConfig(iterations=15))
        r = np.array(res.per_iteration_residuals)
        steps += len(r) - 1
        ups += int(np.sum(np.diff(r) > 1e-12 * (1 + r[:-1])))
    assert ups <= 0.1 * steps


def test_soft_matches_hard_lm_at_large_sigma():
    rng = np.random.default_rng(9)
    cfg = SoftLMConfig(sigma=1e4, D=1.0)
    for k in range(3):
        p = blob(200 + k, 200)
        q = random_motion(rng, 0.3, 5.0).apply(p) + rng.normal(0, 0.005, p.shape)
        log = MatchLog()
        soft = register_pair(p, q, cfg, matches=log).relative_pose.detach()
        hard = register_pair_hard(p, q, cfg, matches=log.rewind())
        assert np.max(np.abs(soft.translation - hard.translation)) <= 1e-6
        assert relative_angle(soft.rotation, hard.rotation) <= 1e-6


def test_equivariance_under_common_transform():
    rng = np.random.default_rng(10)
    p = rendered_cloud(2, 400)
    q = random_motion(rng, 0.2, 3.0).apply(p)
    g = random_motion(rng, 2.0, 40.0)
    a = register_pair(p, q).relative_pose.detach()
    b = register_pair(g.apply(p), g.apply(q)).relative_pose.detach()
    conj = compose(g, compose(a, inverse(g)))
    np.testing.assert_allclose(b.rotation, conj.rotation, atol=1e-6)
    np.testing.assert_allclose(b.translation, conj.translation, atol=1e-6)


def test_final_residual_gradient_matches_fd():
    assert check_registration(seed=3) <= 1e-4


def test_pose_is_differentiable_wrt_weights():
    p = blob(11, 80)
    q = exp_se3([0, 0, 0.05, 0.1, 0, 0]).apply(p)
    log = MatchLog()
    w0 = np.random.default_rng(0).uniform(0.5, 1.0, 80)

    def f(w):
        return dc.sum(register_pair(p, q, SoftLMConfig(iterations=8), source_point_weights=w,
                                    matches=log.rewind()).relative_pose.translation)

    with dc.no_grad():
        f(dc.const(w0))
    assert dc.grad_check(f, w0) <= 1e-4


def test_register_rejects_empty_scan():
    with pytest.raises(ValueError):
        register_pair(np.zeros((0, 3)), blob(0, 10))


# -- voxel downsampling --------------------------------------------------------

def test_voxel_representative_is_nearest_to_centroid():
    pts = blob(12, 500, 2.0)
    idx = voxel_downsample(pts, 0.7, 10**6)
    keys = np.floor(pts / 0.7).astype(int)
    groups = {}
    for i, k in enumerate(map(tuple, keys)):
        groups.setdefault(k, []).append(i)
    expected = []
    for members in groups.values():
        c = pts[members].mean(0)
        expected.append(members[int(np.argmin(((pts[members] - c) ** 2).sum(1)))])
    np.testing.assert_array_equal(idx, np.sort(expected))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(4, 300))
def test_voxel_cap_respected(seed, cap):
    pts = blob(seed, 400, 5.0)
    idx = voxel_downsample(pts, 0.1, cap)
    assert 1 <= len(idx) <= cap
    assert np.all(np.diff(idx) > 0)
