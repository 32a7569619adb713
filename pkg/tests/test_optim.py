"""Adam stepping, schedule state machine, basis adaptation, and fit."""

import math

import numpy as np
import pytest

from serbf.cli import encode_model
from serbf.core import ErbfModel, SampleSet, SURFACE_LAYER, normalize_with
from serbf.initialization import axis_length_init, inscribed_sphere_init
from serbf.optim import (
    OptimState,
    TrainConfig,
    TrainingAbort,
    adam_step,
    add_basis,
    advance_layer,
    basis_stability_check,
    default_start_layer,
    fit,
    l1_activation_check,
    prune_basis,
)
from serbf.spatial import build_octree


def sphere_octree(depth, surface_count, seed=0, radius=0.4):
    rng = np.random.default_rng(seed)
    vec = rng.normal(size=(surface_count, 3))
    vec /= np.linalg.norm(vec, axis=1, keepdims=True)
    surface = radius * vec
    grid = build_octree(surface, depth)
    for lay in grid.layers:
        lay.sdf = np.linalg.norm(lay.points, axis=1) - radius
    return grid, surface


def small_config(**over):
    base = dict(
        batch_size=4096,
        max_epochs=40,
        l1_cutoff_epoch=30,
        k_l1=5,
        k_l2=3,
        seed=0,
    )
    base.update(over)
    return TrainConfig(**base)


class TestAdamStep:
    def test_matches_reference_sequence(self):
        """Three hand-rolled bias-corrected updates."""
        p = np.array([1.0, -2.0])
        m = np.zeros(2)
        v = np.zeros(2)
        mom = (m, v)
        pp = p.copy()
        grads = [np.array([0.5, -1.0]), np.array([-0.25, 2.0]), np.array([1.5, 0.5])]
        for step, g in enumerate(grads, start=1):
            p, mom = adam_step(p, g, mom, 0.01, step)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9**step)
            vh = v / (1 - 0.999**step)
            pp = pp - 0.01 * mh / (np.sqrt(vh) + 1e-8)
            np.testing.assert_allclose(p, pp, rtol=1e-14)

    def test_first_step_moves_by_lr_in_sign_direction(self):
        p = np.zeros(3)
        g = np.array([3.0, -0.5, 0.0])
        out, _ = adam_step(p, g, (np.zeros(3), np.zeros(3)), 0.01, 1)
        np.testing.assert_allclose(out[:2], [-0.01, 0.01], rtol=1e-6)
        assert out[2] == 0.0

    def test_rejects_non_finite_gradient(self):
        with pytest.raises(TrainingAbort):
            adam_step(np.zeros(2), np.array([1.0, np.nan]), (np.zeros(2), np.zeros(2)), 0.01, 1)


class TestScheduleChecks:
    def test_l1_activation_needs_flat_loss_and_small_error(self):
        cfg = small_config()
        flat = [1.0, 1.0, 1.0]
        assert l1_activation_check(flat, 0.01, cfg)
        assert not l1_activation_check(flat, 0.5, cfg)
        assert not l1_activation_check([1.0, 9.0, 1.0], 0.01, cfg)
        assert not l1_activation_check([1.0, 1.0], 0.01, cfg)

    def test_basis_stability_window(self):
        cfg = small_config()
        assert basis_stability_check([10, 10, 11, 12, 10], cfg)
        assert not basis_stability_check([10, 10, 11, 30, 10], cfg)
        assert not basis_stability_check([10, 10], cfg)


class TestPrune:
    def model_with_weights(self, weights):
        m = len(weights)
        return ErbfModel(
            centers=np.arange(3 * m, dtype=float).reshape(m, 3),
            axes=np.ones((m, 3)),
            angles=np.zeros((m, 3)),
            weights=np.asarray(weights, dtype=float),
            norm_m=-1.0,
            norm_h=math.log(2.0),
        )

    def test_removes_only_weak_weights_in_order(self):
        model = self.model_with_weights([0.5, 0.005, -0.02, 1e-6, -0.9])
        out = prune_basis(model, 0.01)
        np.testing.assert_array_equal(out.weights, [0.5, -0.02, -0.9])
        np.testing.assert_array_equal(out.centers[1], model.centers[2])
        assert np.min(np.abs(out.weights)) >= 0.01

    def test_no_op_returns_same_object(self):
        model = self.model_with_weights([0.5, -0.9])
        assert prune_basis(model, 0.01) is model

    def test_collapse_raises(self):
        model = self.model_with_weights([1e-6, -1e-5])
        with pytest.raises(TrainingAbort):
            prune_basis(model, 0.01)


class TestAddBasis:
    def line_points(self):
        pts = np.zeros((7, 3))
        pts[:, 0] = np.arange(7) * 0.1
        return pts

    def test_local_maximum_survives_and_cancels_error(self):
        """One kernel appears at the |E| peak with weight -E."""
        cfg = small_config()
        pts = self.line_points()
        err = np.array([0.02, 0.03, 0.06, 0.11, 0.05, 0.02, 0.01])
        surface = np.array([[0.3, 0.5, 0.0]])
        c, d, a, w = add_basis(err, pts, cfg, surface, neighborhood_radius=0.15)
        np.testing.assert_allclose(c, [[0.3, 0.0, 0.0]], atol=1e-15)
        assert w[0] == pytest.approx(-0.11)
        np.testing.assert_array_equal(a, [[0.0, 0.0, 0.0]])
        dbar = 0.5
        want = math.sqrt(-math.log(cfg.epsilon / 0.11)) / dbar
        np.testing.assert_allclose(d, [[want] * 3], rtol=1e-12)

    def test_sign_opposition_for_negative_errors(self):
        cfg = small_config()
        pts = self.line_points()
        err = np.array([0.0, 0.0, 0.0, -0.3, 0.0, 0.0, 0.0])
        surface = np.array([[10.0, 0, 0]])
        _, _, _, w = add_basis(err, pts, cfg, surface, neighborhood_radius=0.15)
        assert w[0] == pytest.approx(0.3)

    def test_small_errors_produce_nothing(self):
        cfg = small_config()
        pts = self.line_points()
        err = np.full(7, cfg.tau_m / 2.0)  # at the cutoff, not above it
        out = add_basis(err, pts, cfg, surface_points=np.array([[5.0, 0, 0]]), neighborhood_radius=0.15)
        assert all(len(part) == 0 for part in out)

    def test_equal_plateau_keeps_all_candidates(self):
        """Ties survive the >= comparison on both sides."""
        cfg = small_config()
        pts = self.line_points()[:2]
        err = np.array([0.5, 0.5])
        surface = np.array([[0.0, 1.0, 0.0]])
        c, _, _, _ = add_basis(err, pts, cfg, surface, neighborhood_radius=1.0)
        assert len(c) == 2

    def test_zero_surface_distance_falls_back_to_positive(self):
        cfg = small_config()
        pts = self.line_points()[:1]
        err = np.array([0.4])
        surface = np.array([[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]])
        _, d, _, _ = add_basis(err, pts, cfg, surface, neighborhood_radius=0.5)
        want = math.sqrt(-math.log(cfg.epsilon / 0.4)) / 0.2
        np.testing.assert_allclose(d, [[want] * 3], rtol=1e-12)


class TestAdvanceLayer:
    def test_appends_next_layer_with_run_constants(self):
        grid, surface = sphere_octree(3, 200, seed=1)
        all_sdf = np.concatenate([l.sdf for l in grid.layers])
        m = float(all_sdf.min())
        h = math.log(2.0) / (m * m)
        samples = SampleSet(
            points=grid.layers[0].points,
            labels=normalize_with(grid.layers[0].sdf, m, h),
            layer=np.full(len(grid.layers[0].points), 1, dtype=np.int64),
        )
        state = OptimState(current_layer=1, max_layer=3, norm_m=m, norm_h=h)
        state.add_point_pending = True
        out = advance_layer(state, grid, samples)
        assert state.current_layer == 2
        assert not state.add_point_pending
        added = out.layer == 2
        assert added.sum() == len(grid.layers[1].points)
        np.testing.assert_allclose(
            out.labels[added], normalize_with(grid.layers[1].sdf, m, h), rtol=1e-15
        )

    def test_no_op_at_deepest_layer(self):
        grid, _ = sphere_octree(2, 100, seed=2)
        samples = SampleSet(
            points=np.zeros((1, 3)),
            labels=np.array([1.0]),
            layer=np.array([SURFACE_LAYER]),
        )
        state = OptimState(current_layer=2, max_layer=2, norm_m=-1.0, norm_h=math.log(2.0))
        state.add_point_pending = True
        out = advance_layer(state, grid, samples)
        assert out is samples
        assert not state.add_point_pending

    def test_requires_pending_flag(self):
        grid, _ = sphere_octree(2, 100, seed=3)
        samples = SampleSet(
            points=np.zeros((1, 3)), labels=np.array([1.0]), layer=np.array([SURFACE_LAYER])
        )
        state = OptimState(current_layer=1, max_layer=2, norm_m=-1.0, norm_h=math.log(2.0))
        with pytest.raises(ValueError):
            advance_layer(state, grid, samples)


class TestTrainConfig:
    def test_cutoff_must_precede_end_when_training(self):
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=100, l1_cutoff_epoch=100)
        TrainConfig(max_epochs=0, l1_cutoff_epoch=1600)  # zero-epoch run allowed

    def test_band_must_straddle_one(self):
        with pytest.raises(ValueError):
            TrainConfig(tau1=1.2, tau2=1.3)

    def test_positive_thresholds(self):
        with pytest.raises(ValueError):
            TrainConfig(tau_d=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)


class TestDefaultStartLayer:
    def test_third_from_deepest_with_enough_interior(self):
        grid, _ = sphere_octree(6, 4000, seed=4)
        l_s = default_start_layer(grid)
        assert 4 <= l_s <= 6
        interior = int(np.sum(grid.layers[l_s - 1].sdf < 0.0))
        assert interior > 100 or l_s == 6


class TestFit:
    def test_zero_epochs_returns_initialization(self):
        grid, surface = sphere_octree(4, 400, seed=5)
        cfg = small_config(max_epochs=0)
        model = fit(grid, surface, cfg)
        all_sdf = np.concatenate([l.sdf for l in grid.layers])
        m = float(all_sdf.min())
        h = math.log(2.0) / (m * m)
        l_s = default_start_layer(grid)
        pts = np.vstack([l.points for l in grid.layers[:l_s]])
        sdf = np.concatenate([l.sdf for l in grid.layers[:l_s]])
        labels = normalize_with(sdf, m, h)
        inside = (labels > 1.0) & (labels < 2.0)
        want_c, want_w = inscribed_sphere_init(pts[inside], labels[inside], surface)
        want_d = axis_length_init(want_c, want_w, cfg.gamma, surface)
        np.testing.assert_allclose(model.centers, want_c, atol=1e-15)
        np.testing.assert_allclose(model.weights, want_w, atol=1e-15)
        np.testing.assert_allclose(model.axes, want_d, atol=1e-15)
        np.testing.assert_array_equal(model.angles, np.zeros_like(want_c))
        assert model.norm_m == m

    def test_progress_epochs_and_final_model_shape(self):
        grid, surface = sphere_octree(4, 600, seed=6)
        records = []
        model = fit(grid, surface, small_config(), progress_sink=records.append)
        assert [r.epoch for r in records] == list(range(2, 41))
        assert model.basis_count >= 1
        assert np.all(model.axes > 0.0)
        assert np.all(np.isfinite(model.weights))

    def test_loss_decreases_overall(self):
        grid, surface = sphere_octree(4, 600, seed=7)
        records = []
        fit(grid, surface, small_config(max_epochs=60, l1_cutoff_epoch=50),
            progress_sink=records.append)
        assert records[-1].l2 < records[0].l2

    def test_deterministic_across_runs_and_threads(self):
        """Same seed and config give byte-identical models, regardless of
        worker count."""
        grid, surface = sphere_octree(4, 500, seed=8)
        a = fit(grid, surface, small_config(threads=1))
        b = fit(grid, surface, small_config(threads=1))
        c = fit(grid, surface, small_config(threads=4))
        assert encode_model(a) == encode_model(b) == encode_model(c)

    def test_seed_changes_the_batch_split(self):
        """With several batches per epoch the shuffle order matters; sum
        accumulation makes single-batch runs seed-independent."""
        grid, surface = sphere_octree(4, 500, seed=9)
        a = fit(grid, surface, small_config(batch_size=64, seed=1))
        b = fit(grid, surface, small_config(batch_size=64, seed=2))
        assert encode_model(a) != encode_model(b)

    def test_rejects_empty_surface(self):
        grid, _ = sphere_octree(3, 100, seed=10)
        with pytest.raises(ValueError):
            fit(grid, np.empty((0, 3)), small_config())

    def test_rejects_unfilled_octree(self):
        grid, surface = sphere_octree(3, 100, seed=11)
        grid.layers[1].sdf = None
        with pytest.raises(ValueError):
            fit(grid, surface, small_config())
