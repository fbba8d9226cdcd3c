from dataclasses import replace

import numpy as np
import pytest
from conftest import random_rotation
from oracles import marker_losses_loop

from handpress import annofit as af
from handpress import handmodel as hm
from handpress import synth
from handpress.camera import default_fisheye
from handpress.errors import DivergedSolve, InsufficientFrames, NonFiniteLoss
from handpress.geometry import RigidTransform, exp_so3, geodesic_distance, log_so3

CLEAN = synth.ScenarioConfig(marker_noise_mm=0.0, kp_noise_px=0.0)
# terms that are exactly zero at the generating parameters (hand BCE and
# silhouette BCE against a binarised mask are not)
STATIONARY = af.OptimConfig(w_hand=0.0, w_mask=0.0, w_support=0.0)
BETA_GT = np.array([1.1, 0.9, 1.15, 0.95, 1.05, 0.88, 1.12, 0.92, 1.08, 1.1])

# Finite-difference steps per block. The contact term averages over covered
# sensor cells and jumps where a cell gains or loses its last vertex, so pose
# steps are kept well below the distance at which that happens.
FD_BLOCKS = {
    "theta": (slice(0, 20), 1e-8),
    "omega": (slice(20, 23), 1e-8),
    "trans": (slice(23, 26), 1e-10),
    "pv": (slice(26, None), 1e-3),
}


def gradient_instance(seed):
    """A synthetic frame and parameters perturbed away from its ground truth."""
    rng = np.random.default_rng(seed)
    f = synth.sample_scenario(seed)
    p = f.gt_params()
    pv = p.pv + np.where(rng.random(hm.N_VERTS) < 0.1, rng.uniform(0, 5, hm.N_VERTS), 0.0)
    p = af.AnnoParams(
        p.theta + rng.normal(0, 0.1, 20),
        p.delta_rot + rng.normal(0, 0.02, 3),
        p.delta_trans + rng.normal(0, 0.003, 3),
        pv,
    )
    return f, p


def objective_fd_errors(seed, cfg=af.OptimConfig()):
    """Relative error of the analytic directional derivative along each block's own gradient."""
    f, p = gradient_instance(seed)
    x = p.to_vector()

    def F(x):
        return af.total_objective(af.AnnoParams.from_vector(x), f.shape, f.obs, cfg, with_grad=False)[0]

    _, g, _ = af.total_objective(p, f.shape, f.obs, cfg)
    errs = {}
    for k, (sl, h) in FD_BLOCKS.items():
        d = np.zeros_like(x)
        d[sl] = g[sl]
        if not np.any(d):
            continue
        d /= np.linalg.norm(d)
        fd = (F(x + h * d) - F(x - h * d)) / (2 * h)
        errs[k] = abs(fd - g @ d) / abs(g @ d)
    return errs


# ---------------------------------------------------------------- markers
def test_marker_losses_zero_and_offset():
    f = synth.sample_scenario(0, CLEAN)
    T = f.hand_to_world
    obs = replace(f.obs, markers_world=T.apply(hm.forward_kinematics(f.theta, f.beta)))
    l3d, l2d = af.marker_losses(f.theta, f.shape, T, obs)
    assert l3d < 1e-30 and l2d < 1e-20
    # shift every marker 1 mm along the third-person camera x-axis
    K = f.rig.kinect
    shifted = replace(obs, markers_world=obs.markers_world + 0.001 * K.rot[0])
    l3d, _ = af.marker_losses(f.theta, f.shape, T, shifted)
    assert abs(l3d - 1e-6) < 1e-15


def test_marker_losses_match_scalar_loop(rng):
    f = synth.sample_scenario(1)
    for _ in range(50):
        th = rng.uniform(-0.3, 1.2, hm.N_DOF)
        T = RigidTransform(f.hand_to_world.rot @ exp_so3(rng.normal(0, 0.05, 3)), f.hand_to_world.trans)
        got = af.marker_losses(th, f.shape, T, f.obs)
        ref = marker_losses_loop(th, f.beta, T, f.markers_world, f.rig.kinect, f.rig.kinect_intrinsics)
        assert abs(got[0] - ref[0]) < 1e-12 and abs(got[1] - ref[1]) < 1e-12 * max(1, ref[1])


# ---------------------------------------------------------------- objective
def test_objective_self_consistent_at_ground_truth():
    for seed in range(5):
        f = synth.sample_scenario(seed, CLEAN)
        p = f.gt_params()
        value, grad, terms = af.total_objective(p, f.shape, f.obs, STATIONARY)
        assert value < 1e-8 + hm.anatomical_penalty(p.theta, STATIONARY.w_anat)
        assert set(terms) >= {"markers", "mask", "render", "anat"}
        assert grad.shape == (af.N_PARAMS,)


def test_objective_linear_in_press_weight():
    f, p = gradient_instance(3)
    c1 = af.OptimConfig(w_hand=0.0, w_support=0.0)
    c2 = replace(c1, w_press=2.0)
    r1 = af.total_objective(p, f.shape, f.obs, c1, with_grad=False)[2]["render"]
    r2 = af.total_objective(p, f.shape, f.obs, c2, with_grad=False)[2]["render"]
    assert r1 > 0 and r2 == 2 * r1


@pytest.mark.parametrize("seed", range(10))
def test_objective_gradient_matches_finite_differences(seed):
    for k, err in objective_fd_errors(seed).items():
        assert err < 1e-4, (k, err)


def test_objective_gradient_per_coordinate():
    f, p = gradient_instance(7)
    cfg = af.OptimConfig()
    x = p.to_vector()
    _, g, _ = af.total_objective(p, f.shape, f.obs, cfg)
    scale = np.linalg.norm(g[:26])
    for i in list(range(26)) + [26 + int(j) for j in np.argsort(-np.abs(g[26:]))[:10]]:
        h = 1e-3 if i >= 26 else (1e-10 if 23 <= i < 26 else 1e-8)
        e = np.zeros_like(x)
        e[i] = h
        fp = af.total_objective(af.AnnoParams.from_vector(x + e), f.shape, f.obs, cfg, with_grad=False)[0]
        fm = af.total_objective(af.AnnoParams.from_vector(x - e), f.shape, f.obs, cfg, with_grad=False)[0]
        fd = (fp - fm) / (2 * h)
        ref = max(abs(fd), 1e-6 * (scale if i < 26 else 1.0))
        assert abs(fd - g[i]) <= 1e-4 * ref, (i, fd, g[i])


# ---------------------------------------------------------------- masks
def test_dice_matches_set_arithmetic(rng):
    for _ in range(20):
        a = rng.random((16, 16)) < rng.uniform(0.1, 0.9)
        b = rng.random((16, 16)) < rng.uniform(0.1, 0.9)
        A = {(i, j) for i in range(16) for j in range(16) if a[i, j]}
        B = {(i, j) for i in range(16) for j in range(16) if b[i, j]}
        ref = 1 - 2 * len(A & B) / (len(A) + len(B))
        _, _, parts = af.mask_loss(a.astype(float), b.astype(float), lambda_bce=0.0)
        assert abs((1 - parts["mask_dice"]) - ref) < 1e-15
    assert af.dice_coefficient(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_mask_loss_and_silhouette_gradients(rng):
    occ = rng.uniform(0.05, 0.95, (12, 10))
    t = (rng.random((12, 10)) > 0.5).astype(float)
    v, g, _ = af.mask_loss(occ, t)
    h = 1e-7
    for _ in range(20):
        i = tuple(rng.integers(0, (12, 10)))
        e = np.zeros_like(occ)
        e[i] = h
        fd = (af.mask_loss(occ + e, t)[0] - af.mask_loss(occ - e, t)[0]) / (2 * h)
        assert abs(fd - g[i]) <= 1e-6 * max(1.0, abs(fd))
    f = synth.sample_scenario(2)
    K = f.rig.kinect
    Vc = K.apply(f.hand_to_world.apply(f.gt_mesh_local().vertices))
    G = rng.normal(size=(f.rig.mask_size[1], f.rig.mask_size[0]))
    occ, cache = af.render_silhouette(Vc, f.rig.kinect_intrinsics, f.rig.mask_size)
    an = af.silhouette_vjp(cache, G)
    d = rng.normal(size=Vc.shape)
    d /= np.linalg.norm(d)
    h = 1e-9

    def L(X):
        return np.sum(G * af.render_silhouette(X, f.rig.kinect_intrinsics, f.rig.mask_size)[0])

    fd = (L(Vc + h * d) - L(Vc - h * d)) / (2 * h)
    assert abs(fd - np.sum(an * d)) <= 1e-4 * np.linalg.norm(an)


# ---------------------------------------------------------------- optimisation
def test_optimize_from_ground_truth_is_stationary():
    for seed in range(3):
        f = synth.sample_scenario(seed, CLEAN)
        p0 = f.gt_params()
        v0 = af.total_objective(p0, f.shape, f.obs, STATIONARY, with_grad=False)[0]
        p, rep = af.optimize_annotation(p0, f.shape, f.obs, STATIONARY)
        assert rep.iterations <= 5
        assert abs(rep.final_loss - v0) < 1e-8


def test_optimize_recovers_synthetic_frame():
    f = synth.sample_scenario(11)
    p, rep = af.optimize_annotation(f.init, f.shape, f.obs)
    J = af.delta_transform(f.base_transform, p.delta_rot, p.delta_trans).apply(hm.forward_kinematics(p.theta, f.shape))
    Jg = f.hand_to_world.apply(f.gt_joints_local())
    assert np.mean(np.linalg.norm(J - Jg, axis=1)) < 0.002
    tip = hm.FingertipRegions.default()["index"]
    assert 180 <= p.pv[tip].sum() <= 220
    # accepted-step losses never rise; pressures stay non-negative
    assert np.all(np.diff(rep.losses) <= 1e-12 * max(1.0, rep.losses[0]))
    assert np.all(p.pv >= 0)
    assert set(rep.to_json()) >= {"final_loss", "terms", "iterations", "wall_ms"}
    assert set(rep.terms) == {"markers", "mask", "render", "anat"}


@pytest.mark.parametrize("schedule,pv_param", [("joint", "softplus"), ("alternate", "bounded")])
def test_other_schedules_keep_invariants(schedule, pv_param):
    f = synth.sample_scenario(5)
    cfg = af.OptimConfig(schedule=schedule, pv_param=pv_param, max_iter=60)
    p, rep = af.optimize_annotation(f.init, f.shape, f.obs, cfg)
    assert np.all(p.pv >= 0)
    assert rep.final_loss <= rep.losses[0]
    if schedule == "joint":
        assert np.all(np.diff(rep.losses) <= 1e-12 * max(1.0, rep.losses[0]))


def test_non_finite_init_is_reported():
    f = synth.sample_scenario(0)
    bad = replace(f.init, theta=np.full(hm.N_DOF, np.nan))
    with pytest.raises(NonFiniteLoss):
        af.optimize_annotation(bad, f.shape, f.obs)


def test_config_validation():
    with pytest.raises(ValueError):
        af.OptimConfig(w_press=-1)
    with pytest.raises(ValueError):
        af.OptimConfig(max_iter=0)
    with pytest.raises(ValueError):
        af.OptimConfig.from_dict({"w_bogus": 1})
    assert af.OptimConfig.from_dict({"w_mask": 2.0}).w_mask == 2.0


def test_params_json_round_trip(rng):
    p = af.AnnoParams(rng.normal(size=20), rng.normal(size=3), rng.normal(size=3), rng.random(hm.N_VERTS))
    q = af.AnnoParams.from_json(p.to_json())
    assert np.array_equal(p.to_vector(), q.to_vector())
    assert np.array_equal(af.AnnoParams.from_vector(p.to_vector()).to_vector(), p.to_vector())


# ---------------------------------------------------------------- shape calibration
def test_calibration_needs_three_frames():
    f = synth.sample_scenario(0)
    with pytest.raises(InsufficientFrames):
        af.calibrate_shape([f.obs, f.obs])


def _self_consistent_frames(seeds):
    """Noise-free frames whose mask is the model's own soft silhouette."""
    out = []
    for s in seeds:
        f = synth.sample_scenario(s, CLEAN, beta=BETA_GT)
        Vw = f.hand_to_world.apply(f.gt_mesh_local().vertices)
        occ, _ = af.render_silhouette(f.rig.kinect.apply(Vw), f.rig.kinect_intrinsics, f.rig.mask_size, f.rig.silhouette)
        out.append((f, replace(f.obs, hand_mask=occ)))
    return out


def test_calibration_stationary_at_ground_truth():
    frames = _self_consistent_frames(range(3))
    # ground truth minimises this objective: BCE against the soft silhouette, no shrinkage
    cfg = af.OptimConfig(w_reg=0.0, lambda_dice=0.0)
    shape = af.calibrate_shape([o for _, o in frames], BETA_GT, [f.theta for f, _ in frames], cfg)
    assert np.max(np.abs(shape.beta - BETA_GT)) < 1e-3


@pytest.mark.slow
def test_calibration_recovers_shape():
    frames = [synth.sample_scenario(s, beta=BETA_GT) for s in range(3)]
    shape = af.calibrate_shape([f.obs for f in frames], None, [f.init.theta for f in frames])
    assert np.max(np.abs(shape.beta - BETA_GT)) < 0.05
    assert np.all((shape.beta >= hm.BETA_BOUNDS[0]) & (shape.beta <= hm.BETA_BOUNDS[1]))


# ---------------------------------------------------------------- extrinsics
def extrinsics_problem(rng, noise_px=0.0):
    f = synth.sample_scenario(int(rng.integers(1 << 30)))
    X = f.gt_joints_local()
    u = f.fisheye.project(f.extrinsics.apply(X)) + rng.normal(0, noise_px, (hm.N_JOINTS, 2))
    return X, u, f.fisheye, f.extrinsics


def test_extrinsics_from_ground_truth(rng):
    X, u, model, gt = extrinsics_problem(rng)
    T, rms = af.solve_extrinsics(X, u, model, gt)
    assert rms < 1e-10
    assert np.max(np.abs(T.rot - gt.rot)) < 1e-12 and np.max(np.abs(T.trans - gt.trans)) < 1e-12


def test_extrinsics_from_perturbed_init(rng):
    for _ in range(10):
        X, u, model, gt = extrinsics_problem(rng)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d = rng.normal(size=3)
        init = RigidTransform(exp_so3(np.deg2rad(10) * axis) @ gt.rot, gt.trans + 0.02 * d / np.linalg.norm(d))
        T, _ = af.solve_extrinsics(X, u, model, init)
        assert geodesic_distance(T.rot, gt.rot) < 1e-4
        assert np.max(np.abs(T.trans - gt.trans)) < 1e-5
        assert abs(np.linalg.det(T.rot) - 1) < 1e-12


def test_extrinsics_init_outside_view_diverges(rng):
    X, u, model, gt = extrinsics_problem(rng)
    flipped = RigidTransform(exp_so3([np.pi, 0, 0]) @ gt.rot, gt.trans)
    with pytest.raises(DivergedSolve):
        af.solve_extrinsics(X, u, default_fisheye(), flipped)


def test_compose_residual_extrinsics(rng):
    base = RigidTransform(random_rotation(rng), rng.normal(size=3))
    same = af.compose_residual_extrinsics(base, np.zeros(3), np.zeros(3))
    assert np.array_equal(same.rot, base.rot) and np.array_equal(same.trans, base.trans)
    q = af.compose_residual_extrinsics(RigidTransform(np.eye(3), np.zeros(3)), [0, 0, np.pi / 2], np.zeros(3))
    assert np.allclose(q.rot, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    for _ in range(100):
        w = rng.normal(size=3)
        w *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(w)
        T = af.compose_residual_extrinsics(base, w, np.zeros(3))
        assert abs(geodesic_distance(T.rot, base.rot) - np.linalg.norm(w)) < 1e-9
    six = af.compose_residual_extrinsics(base, [1, 0, 0, 0, 1, 0], [0.1, 0, 0])
    assert np.allclose(six.rot, base.rot) and np.allclose(six.trans, base.trans + [0.1, 0, 0])
    assert np.allclose(log_so3(q.rot), [0, 0, np.pi / 2])
