"""Scene generation, the trainer and its diagnostics, and the mode report.

Scenes are checked against the library's own projection on noiseless
specs; the trainer against seeded bit-reproducibility and its documented
trace/abort semantics; the mode report against the dense-grid quadrature
oracle (argmax modes from mc.yaw_mode_masses, basin means recomputed
here for the center comparison).
"""
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from probpnp import loss, mc, toy
from probpnp.errors import BehindCamera, DegenerateSet, NonFiniteGradient
from probpnp.geometry import (
    Camera,
    Quat6DoF,
    YawOnly,
    normalize_angle,
    project,
    rot_y,
    transform,
)
from probpnp.mc import McConfig

from helpers import DEFAULT_CAM, four_fold_set, make_instance
from probpnp.geometry import SPACE_YAW1


def sorted_rows(pts):
    pts = np.asarray(pts)
    return pts[np.lexsort(pts.T)]


class TestSceneSpec:
    @pytest.mark.parametrize("kw", [
        dict(n_views=0),
        dict(n_val=-1),
        dict(pixel_noise_sigma=-0.1),
        dict(symmetry=0),
        dict(half_extent=0.0),
        dict(xy_range=-1.0),
        dict(depth_range=(2.0, 1.0)),
        dict(yaw_range=(1.0, -1.0)),
        dict(n_points=7, symmetry=2),
        dict(shape=[[1.0, 2.0], [3.0, 4.0]]),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            toy.SceneSpec(**kw)

    def test_shape_override_sets_n_points(self):
        pts = np.arange(15, dtype=np.float64).reshape(5, 3)
        spec = toy.SceneSpec(shape=pts, n_points=99)
        assert spec.n_points == 5
        np.testing.assert_array_equal(spec.shape, pts)


class TestGenerateScene:
    def test_counts_and_cameras(self):
        spec = toy.SceneSpec(n_views=5, n_val=3)
        scene = toy.generate_scene(spec, rng=1)
        assert len(scene.train_views) == 5 and len(scene.val_views) == 3
        assert scene.truth.shape == (spec.n_points, 3)
        assert all(v.camera is spec.camera
                   for v in scene.train_views + scene.val_views)

    def test_noiseless_views_are_exact_projections(self):
        spec = toy.SceneSpec(n_views=3, n_val=2, pixel_noise_sigma=0.0)
        scene = toy.generate_scene(spec, rng=2)
        for view in scene.train_views + scene.val_views:
            uv = np.stack([
                project(view.camera, transform(view.y_gt, p))
                for p in scene.truth
            ])
            np.testing.assert_allclose(view.x2d, uv, atol=1e-12)

    def test_seeded_reproducibility(self):
        a = toy.generate_scene(toy.SceneSpec(n_views=4, n_val=2), rng=3)
        b = toy.generate_scene(toy.SceneSpec(n_views=4, n_val=2), rng=3)
        np.testing.assert_array_equal(a.truth, b.truth)
        for va, vb in zip(a.train_views + a.val_views,
                          b.train_views + b.val_views):
            np.testing.assert_array_equal(va.x2d, vb.x2d)
            assert va.y_gt.theta == vb.y_gt.theta
            np.testing.assert_array_equal(va.y_gt.t, vb.y_gt.t)

    def test_symmetric_shape_is_rotation_invariant(self):
        spec = toy.SceneSpec(n_points=8, symmetry=4, n_views=1, n_val=0)
        truth = toy.generate_scene(spec, rng=4).truth
        rotated = truth @ rot_y(2.0 * np.pi / 4).T
        np.testing.assert_allclose(
            sorted_rows(rotated), sorted_rows(truth), atol=1e-12
        )

    def test_shape_override_used_verbatim(self):
        pts = np.array([[0.1, 0.0, 0.2], [-0.1, 0.05, -0.2], [0.0, -0.1, 0.0]])
        scene = toy.generate_scene(toy.SceneSpec(shape=pts, n_views=2, n_val=0))
        np.testing.assert_array_equal(scene.truth, pts)

    def test_behind_camera_when_depth_collapses(self):
        spec = toy.SceneSpec(depth_range=(0.0, 0.0), xy_range=0.0)
        with pytest.raises(BehindCamera):
            toy.generate_scene(spec, rng=0)


class TestInitParams:
    def test_head_kinds_start_at_identical_weights(self):
        sm = toy.init_params(8, rng=0, head_kind="softmax", log_scale=-1.2)
        ex = toy.init_params(8, rng=0, head_kind="exp", log_scale=-1.2)
        np.testing.assert_allclose(sm.weights(), ex.weights(), rtol=1e-12)
        np.testing.assert_allclose(sm.weights(), math.exp(-1.2) / 8, rtol=1e-12)
        np.testing.assert_array_equal(sm.x3d_free, ex.x3d_free)

    def test_params_validation(self):
        head = loss.WeightHead(np.zeros((4, 2)), np.zeros(2))
        with pytest.raises(ValueError, match="mismatch"):
            toy.LearnerParams(np.zeros((5, 3)), head)
        with pytest.raises(ValueError, match="finite"):
            toy.LearnerParams(np.full((4, 3), np.nan), head)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [
        dict(steps=0),
        dict(lr=0.0),
        dict(momentum=1.0),
        dict(minibatch=0),
        dict(val_every=0),
        dict(loss_mode="bogus"),
        dict(head_kind="relu"),
        dict(reg_weight=-0.1),
        dict(lr_decay=0.0),
        dict(lr_decay=1.5),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            toy.TrainConfig(**kw)


@pytest.fixture(scope="module")
def tiny_scene():
    return toy.generate_scene(toy.SceneSpec(n_views=8, n_val=4), rng=0)


SMOKE_CFG = dict(steps=12, minibatch=4, mc=McConfig(T=1, K_prime=32),
                 val_every=6)


@pytest.fixture(scope="module")
def smoke_run(tiny_scene):
    return toy.train(tiny_scene, toy.TrainConfig(**SMOKE_CFG), rng=7)


class TestTrain:
    def test_bitwise_reproducible(self, tiny_scene, smoke_run):
        again = toy.train(tiny_scene, toy.TrainConfig(**SMOKE_CFG), rng=7)
        np.testing.assert_array_equal(
            again.params.x3d_free, smoke_run.params.x3d_free
        )
        np.testing.assert_array_equal(
            again.params.weight_head.logits, smoke_run.params.weight_head.logits
        )
        for name in ("step", "l_tgt", "l_pred", "l_kl", "l_reg",
                     "log_scale", "val_rot_deg", "val_trans"):
            np.testing.assert_array_equal(
                getattr(again.trace, name), getattr(smoke_run.trace, name)
            )

    def test_trace_semantics(self, smoke_run):
        tr = smoke_run.trace
        assert len(tr) == 12
        np.testing.assert_array_equal(tr.step, np.arange(1, 13))
        assert np.all(np.isfinite(tr.l_tgt))
        # monte_carlo: the kl column is the literal sum, reg is not computed
        np.testing.assert_array_equal(tr.l_kl, tr.l_tgt + tr.l_pred)
        assert np.all(np.isnan(tr.l_reg))
        # validation runs at steps 6 and 12 and carries forward in between
        assert np.all(np.isnan(tr.val_rot_deg[:5]))
        assert np.all(tr.val_rot_deg[5:11] == tr.val_rot_deg[5])
        assert not math.isnan(tr.val_rot_deg[11])
        assert tr.val_rot_deg[-1] == smoke_run.final_val.median_rot_deg
        assert tr.val_trans[-1] == smoke_run.final_val.median_trans

    def test_reprojection_mode_columns(self, tiny_scene):
        cfg = toy.TrainConfig(loss_mode=toy.MODE_REPROJECTION,
                              **{**SMOKE_CFG, "steps": 4})
        tr = toy.train(tiny_scene, cfg, rng=7).trace
        assert np.all(np.isfinite(tr.l_tgt))
        for col in (tr.l_pred, tr.l_kl, tr.l_reg):
            assert np.all(np.isnan(col))

    def test_reg_mode_columns(self, tiny_scene):
        cfg = toy.TrainConfig(loss_mode=toy.MODE_MONTE_CARLO_REG,
                              **{**SMOKE_CFG, "steps": 4})
        tr = toy.train(tiny_scene, cfg, rng=7).trace
        assert np.all(np.isfinite(tr.l_reg))
        np.testing.assert_array_equal(tr.l_kl, tr.l_tgt + tr.l_pred)

    def test_no_validation_views(self):
        scene = toy.generate_scene(toy.SceneSpec(n_views=4, n_val=0), rng=1)
        res = toy.train(scene, toy.TrainConfig(**{**SMOKE_CFG, "steps": 3}),
                        rng=2)
        assert res.final_val is None
        assert np.all(np.isnan(res.trace.val_rot_deg))

    def test_minibatch_clamped_to_views(self, tiny_scene):
        cfg = toy.TrainConfig(**{**SMOKE_CFG, "steps": 2, "minibatch": 99})
        assert len(toy.train(tiny_scene, cfg, rng=3).trace) == 2

    def test_divergence_raises_with_diagnostics(self, tiny_scene):
        cfg = toy.TrainConfig(lr=50.0, **{k: v for k, v in SMOKE_CFG.items()
                                          if k != "steps"}, steps=80)
        with pytest.raises(NonFiniteGradient) as exc_info:
            toy.train(tiny_scene, cfg, rng=7)
        err = exc_info.value
        assert 1 <= err.step <= 80
        assert len(err.trace) == err.step
        assert np.all(np.isfinite(err.trace.l_tgt[: err.step - 1]))


class TestEvaluate:
    def test_truth_params_on_noiseless_scene(self):
        spec = toy.SceneSpec(n_views=1, n_val=6, pixel_noise_sigma=0.0)
        scene = toy.generate_scene(spec, rng=5)
        params = toy.LearnerParams(
            scene.truth, loss.WeightHead(np.zeros((8, 2)), np.zeros(2))
        )
        ev = toy.evaluate(params, scene.val_views)
        assert ev.n_failures == 0
        assert ev.median_rot_deg < 1e-2
        assert ev.median_trans < 1e-5

    def test_symmetry_quotient(self):
        t = np.array([0.0, 0.0, 4.0])
        gt = toy.Yaw4DoF(t, 0.31)
        quarter = toy.Yaw4DoF(t, 0.31 + np.pi / 2)
        assert toy._symmetric_rot_err(quarter, gt, 1) == pytest.approx(np.pi / 2)
        assert toy._symmetric_rot_err(quarter, gt, 4) == pytest.approx(0.0, abs=1e-7)

    def test_summary_skips_failures(self):
        ev = toy.EvalSummary(np.array([1.0, np.nan]), np.array([np.nan, 2.0]), 1)
        assert ev.median_rot_deg == 1.0
        assert ev.median_trans == 2.0
        empty = toy.EvalSummary(np.full(2, np.nan), np.full(2, np.nan), 2)
        assert empty.median_rot_deg == math.inf


class TestDiagnostics:
    def test_ema_hand_computed(self):
        # alpha = 0.5 at window 3; acc seeded with the first value
        np.testing.assert_allclose(
            toy.ema([1.0, 2.0, 3.0], window=3), [1.0, 1.5, 2.25]
        )

    def test_loss_nonincreasing(self):
        down = np.linspace(5.0, 1.0, 200)
        assert toy.loss_nonincreasing(down)
        noisy = down + np.random.default_rng(0).normal(0.0, 0.01, 200)
        assert toy.loss_nonincreasing(noisy)
        # flagged only when the smoothed loss climbs back above its level
        # at the start of the checked tail
        up = np.concatenate([down[:150], np.full(50, 8.0)])
        assert not toy.loss_nonincreasing(up)
        rebound = np.concatenate([down[:150], np.linspace(1.0, 2.0, 50)])
        assert toy.loss_nonincreasing(rebound)
        nan_tail = down.copy()
        nan_tail[190] = np.nan
        assert not toy.loss_nonincreasing(nan_tail)

    def test_collapse_detected(self):
        truth = np.random.default_rng(1).uniform(-0.25, 0.25, (8, 3))
        assert toy.collapse_detected(truth * 0.05, truth)
        assert not toy.collapse_detected(truth, truth)
        assert not toy.collapse_detected(truth * 0.5, truth)
        assert toy.collapse_detected(truth * 0.5, truth, ratio=0.6)


class TestTraceIO:
    def test_round_trip(self, smoke_run, tmp_path):
        path = tmp_path / "trace.jsonl"
        toy.write_trace(smoke_run.trace, path)
        back = toy.read_trace(path)
        for name in ("step", "l_tgt", "l_pred", "l_kl", "l_reg",
                     "log_scale", "val_rot_deg", "val_trans"):
            np.testing.assert_array_equal(
                getattr(back, name), getattr(smoke_run.trace, name)
            )

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(ValueError, match="empty"):
            toy.read_trace(path)


EDGES36 = np.linspace(-np.pi, np.pi, 37)


def bump(indices, weights):
    mass = np.zeros(36)
    mass[np.asarray(indices) % 36] = weights
    return mass


class TestCircularModes:
    def test_no_mass(self):
        assert toy._circular_modes(np.zeros(36), EDGES36, 0.05).shape == (0, 2)

    def test_single_mode_below_threshold(self):
        mass = bump([5], [0.03])
        assert toy._circular_modes(mass, EDGES36, 0.05).shape == (0, 2)

    def test_two_clear_modes_sorted_by_mass(self):
        centers = (EDGES36[:-1] + EDGES36[1:]) / 2
        mass = bump([4, 5, 6], [0.15, 0.3, 0.15]) \
            + bump([22, 23, 24], [0.1, 0.2, 0.1])
        modes = toy._circular_modes(mass, EDGES36, 0.05)
        assert modes.shape == (2, 2)
        np.testing.assert_allclose(modes[:, 1], [0.6, 0.4], atol=1e-12)
        assert modes[0, 0] == pytest.approx(centers[5])
        assert modes[1, 0] == pytest.approx(centers[23])

    def test_shallow_notch_is_merged(self):
        mass = bump([10, 11, 12, 13, 14], [0.2, 0.2, 0.16, 0.2, 0.2])
        modes = toy._circular_modes(mass, EDGES36, 0.05)
        assert modes.shape == (1, 2)
        assert modes[0, 1] == pytest.approx(0.96)

    def test_minor_peak_dropped_by_min_mass(self):
        mass = bump([4, 5, 6], [0.32, 0.32, 0.32]) + bump([22], [0.04])
        modes = toy._circular_modes(mass, EDGES36, 0.05)
        assert modes.shape == (1, 2)
        assert modes[0, 1] == pytest.approx(0.96)

    def test_wraparound_mode(self):
        mass = bump([34, 35, 0, 1], [0.2, 0.3, 0.3, 0.2])
        modes = toy._circular_modes(mass, EDGES36, 0.05)
        assert modes.shape == (1, 2)
        assert abs(modes[0, 0]) == pytest.approx(np.pi)
        assert modes[0, 1] == pytest.approx(1.0)


def quadrature_basin_means(X, t_fixed, n=16384):
    """Mass-weighted circular mean per likelihood basin, on the dense grid.

    Same basin decomposition as mc.yaw_mode_masses, but reporting the
    center the sampled report estimates (the basin mean, not the argmax;
    they differ when the in-basin density is skewed).
    """
    thetas, ll = mc.yaw_grid_loglik(X, t_fixed, n)
    post = np.exp(ll - logsumexp(ll))
    left, right = np.roll(ll, 1), np.roll(ll, -1)
    vs = np.sort(np.flatnonzero((ll < left) & (ll <= right)))
    out = []
    for p in np.flatnonzero((ll > left) & (ll >= right)):
        nxt = vs[np.searchsorted(vs, p) % vs.size]
        prv = vs[np.searchsorted(vs, p) - 1]
        idx = (np.arange(prv, nxt) if prv < nxt
               else np.concatenate([np.arange(prv, len(ll)), np.arange(nxt)]))
        w, ang = post[idx], thetas[idx]
        mean = math.atan2(float((w * np.sin(ang)).sum()),
                          float((w * np.cos(ang)).sum()))
        out.append((mean, float(w.sum())))
    out.sort(key=lambda kv: -kv[1])
    return out


def circ_dist(a, b):
    return abs(normalize_angle(a - b))


@pytest.fixture(scope="module")
def square():
    X, t = four_fold_set(w=0.15)
    view = toy.View(X.x2d, YawOnly(0.223, t), DEFAULT_CAM)
    return X, t, view


class TestPosteriorModesReport:
    CFG = McConfig(T=4, K_prime=128)

    def test_four_fold_fixture_has_four_modes(self, square):
        X, t, view = square
        oracle = mc.yaw_mode_masses(X, t)
        assert len(oracle) == 4
        means = quadrature_basin_means(X, t)
        for seed in range(3):
            rep = toy.posterior_modes_report(X, view, cfg=self.CFG, seed=seed)
            assert rep.mass.sum() == pytest.approx(1.0)
            assert rep.modes.shape == (4, 2)
            assert np.all(rep.modes[:, 1] >= 0.15)
            np.testing.assert_allclose(rep.modes[:, 1], 0.25, atol=0.09)
            # every oracle basin mean is matched by exactly one report mode
            for mean, _ in means:
                hits = [m for m in rep.modes[:, 0] if circ_dist(m, mean) < 0.15]
                assert len(hits) == 1, (mean, rep.modes)

    def test_modes_are_quarter_turn_spaced(self, square):
        X, _, view = square
        rep = toy.posterior_modes_report(X, view, cfg=self.CFG, seed=0)
        yaw = np.sort(rep.modes[:, 0])
        gaps = np.diff(np.concatenate([yaw, [yaw[0] + 2 * np.pi]]))
        np.testing.assert_allclose(gaps, np.pi / 2, atol=0.15)

    def test_asymmetric_instance_is_unimodal(self):
        X, gt = make_instance(np.random.default_rng(5), SPACE_YAW1, n=8)
        oracle = mc.yaw_mode_masses(X, gt.t_fixed)
        assert len(oracle) == 1
        view = toy.View(X.x2d, gt, DEFAULT_CAM)
        rep = toy.posterior_modes_report(X, view, cfg=self.CFG, seed=1)
        assert rep.modes.shape == (1, 2)
        assert rep.modes[0, 1] >= 0.9
        assert circ_dist(rep.modes[0, 0], oracle[0][0]) < 0.1

    def test_seed_changes_the_sample(self, square):
        X, _, view = square
        a = toy.posterior_modes_report(X, view, cfg=self.CFG, seed=0)
        b = toy.posterior_modes_report(X, view, cfg=self.CFG, seed=1)
        assert not np.array_equal(a.mass, b.mass)

    def test_quat_space_rejected(self, square):
        X, t, _ = square
        q_view = toy.View(X.x2d, Quat6DoF(t, np.array([1.0, 0, 0, 0])),
                          DEFAULT_CAM)
        with pytest.raises(ValueError, match="yaw"):
            toy.posterior_modes_report(X, q_view)

    def test_zero_weights_degenerate(self, square):
        X, t, view = square
        Xz = X.replace(w2d=np.zeros_like(X.w2d))
        with pytest.raises(DegenerateSet):
            toy.posterior_modes_report(Xz, view)
