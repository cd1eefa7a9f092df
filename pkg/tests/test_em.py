"""Tests for bandwidth estimation, the weighted KDE, and the EM loop."""

import numpy as np
import pytest
from scipy.stats import norm

import latticefdr.em as em
from latticefdr.errors import DegenerateInputError
from latticefdr.em import (
    EmConfig,
    WeightedKde,
    derive_seed,
    em_fit,
    estimate_bandwidths,
    estimate_f1,
    kish_effective_size,
    optimize_w,
    q1_value,
    q2_gradient,
    q2_loss,
    sample_labels,
)
from latticefdr.meanfield import (
    FieldWeights,
    KernelBandwidths,
    build_field_lattices,
)


def test_derived_seeds_are_deterministic_and_distinct():
    a = derive_seed(12345, 0)
    assert a == derive_seed(12345, 0)
    streams = {derive_seed(12345, k) for k in range(100)}
    assert len(streams) == 100
    assert derive_seed(12346, 0) not in streams


class TestWeightedKde:
    def test_single_center_evaluation(self):
        # phi(0)/0.5 with one kernel of bandwidth 0.5 centered at 2
        kde = WeightedKde(np.array([2.0]), np.array([1.0]), 0.5)
        assert kde.density(np.array([2.0]))[0] == pytest.approx(
            0.7978845608028654, rel=1e-12
        )

    def test_density_integrates_to_one(self):
        rng = np.random.default_rng(0)
        centers = rng.normal(0, 2, 60)
        weights = rng.random(60)
        weights /= weights.sum()
        kde = WeightedKde(centers, weights, 0.7)
        lo = centers.min() - 8 * kde.bandwidth
        hi = centers.max() + 8 * kde.bandwidth
        grid = np.linspace(lo, hi, 4001)
        mass = np.trapezoid(kde.density(grid), grid)
        assert mass == pytest.approx(1.0, abs=1e-3)

    def test_log_density_consistency(self):
        kde = WeightedKde(np.array([0.0, 1.0]), np.array([0.25, 0.75]), 0.4)
        t = np.linspace(-3, 4, 50)
        np.testing.assert_allclose(np.log(kde.density(t)), kde.log_density(t))

    def test_unnormalized_weights_are_normalized(self):
        kde = WeightedKde(np.array([0.0, 1.0]), np.array([2.0, 6.0]), 0.4)
        np.testing.assert_allclose(kde.weights, [0.25, 0.75])

    def test_invalid_inputs_rejected(self):
        with pytest.raises(DegenerateInputError):
            WeightedKde(np.array([0.0]), np.array([1.0]), 0.0)
        with pytest.raises(DegenerateInputError):
            WeightedKde(np.array([0.0]), np.array([-1.0]), 0.5)
        with pytest.raises(DegenerateInputError):
            WeightedKde(np.array([0.0, 1.0]), np.array([0.0, 0.0]), 0.5)


class TestEstimateBandwidths:
    def test_three_point_line_enumerates_all_pairs(self):
        # channels all on {0,1,2}: signed differences (-1, -2, -1),
        # sample SD = sqrt(1/3)
        coords = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
        delta_mu = np.array([0.0, 1.0, 2.0])
        bw = estimate_bandwidths(coords, delta_mu)
        expected = 0.5773502691896258
        np.testing.assert_allclose(bw.theta_alpha, expected, rtol=1e-12)
        np.testing.assert_allclose(bw.theta_beta, expected, rtol=1e-12)
        np.testing.assert_allclose(bw.theta_gamma, expected, rtol=1e-12)

    def test_spatial_bandwidths_shared_between_kernels(self):
        rng = np.random.default_rng(1)
        coords = rng.uniform(0, 10, (40, 3))
        bw = estimate_bandwidths(coords, rng.standard_normal(40))
        assert bw.theta_alpha == bw.theta_gamma

    def test_sampled_pairs_deterministic_given_seed(self):
        rng = np.random.default_rng(2)
        coords = rng.uniform(0, 10, (800, 3))
        delta_mu = rng.standard_normal(800)
        a = estimate_bandwidths(coords, delta_mu, pair_budget=5000, seed=9)
        b = estimate_bandwidths(coords, delta_mu, pair_budget=5000, seed=9)
        assert a == b
        c = estimate_bandwidths(coords, delta_mu, pair_budget=5000, seed=10)
        assert a != c

    def test_sampled_close_to_exhaustive(self):
        rng = np.random.default_rng(3)
        coords = rng.uniform(0, 10, (700, 3))
        delta_mu = rng.standard_normal(700)
        full = estimate_bandwidths(coords, delta_mu, pair_budget=300_000)
        sub = estimate_bandwidths(coords, delta_mu, pair_budget=20_000, seed=4)
        np.testing.assert_allclose(sub.theta_alpha, full.theta_alpha, rtol=0.05)
        np.testing.assert_allclose(sub.theta_beta, full.theta_beta, rtol=0.05)

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(DegenerateInputError):
            # a single pair cannot carry a sample SD
            estimate_bandwidths(
                np.array([[0.0, 0.0, 0.0], [2.0, 1.0, 1.0]]), np.array([0.0, 1.0])
            )
        rng = np.random.default_rng(5)
        coords = rng.uniform(0, 5, (30, 3))
        with pytest.raises(DegenerateInputError, match="delta-mu"):
            estimate_bandwidths(coords, np.zeros(30))
        with pytest.raises(DegenerateInputError, match="x channel"):
            flat = coords.copy()
            flat[:, 0] = 2.5
            estimate_bandwidths(flat, rng.standard_normal(30))
        with pytest.raises(DegenerateInputError):
            estimate_bandwidths(coords, rng.standard_normal(30), pair_budget=10)


class TestEstimateF1:
    def test_uniform_weights_reduce_to_plain_kish_count(self):
        q = np.full(50, 0.37)
        assert kish_effective_size(q) == pytest.approx(50.0, rel=1e-12)

    def test_kish_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            q = rng.random(30)
            m_eff = kish_effective_size(q)
            assert 1.0 - 1e-9 <= m_eff <= 30.0 + 1e-9

    def test_rule_of_thumb_bandwidth(self):
        # SD 1 and IQR 1.34 with effective size 100:
        # 0.9 * 1 * 100^(-1/5) = 0.35830 (the plug-in value)
        rng = np.random.default_rng(7)
        x = rng.standard_normal(100)
        x = (x - x.mean()) / x.std(ddof=1)
        q75, q25 = np.percentile(x, [75, 25])
        assert q75 - q25 < 1.34  # IQR governs for this draw
        x = x * (1.34 / (q75 - q25))
        q = np.full(100, 0.5)
        f1 = estimate_f1(x, q)
        sd = np.std(x, ddof=1)
        assert f1.bandwidth == pytest.approx(
            0.9 * min(sd, 1.0) * 100 ** (-0.2), rel=1e-12
        )
        direct = 0.9 * 1.0 * 100 ** (-0.2)
        assert direct == pytest.approx(0.3582964535, rel=1e-9)

    def test_weights_proportional_to_marginals(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(40)
        q = rng.random(40)
        f1 = estimate_f1(x, q)
        np.testing.assert_allclose(f1.weights, q / q.sum())

    def test_degenerate_marginals_rejected(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal(20)
        with pytest.raises(DegenerateInputError):
            estimate_f1(x, np.zeros(20))
        with pytest.raises(DegenerateInputError):
            estimate_f1(np.full(20, 1.5), np.full(20, 0.5))


class TestQ1Value:
    def test_two_point_standard_normal_value(self):
        x = np.array([0.0, 1.0])
        q = np.array([0.5, 0.5])
        value = q1_value(x, q, lambda t: norm.pdf(t))
        assert value == pytest.approx(-2.337877066409345, rel=1e-12)

    def test_null_only_reduction(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal(30)
        value = q1_value(x, np.zeros(30), lambda t: norm.pdf(t))
        assert value == pytest.approx(norm.logpdf(x).sum(), rel=1e-12)

    def test_matched_density_is_symmetric_in_q(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(30)
        all_null = q1_value(x, np.zeros(30), lambda t: norm.pdf(t))
        all_alt = q1_value(x, np.ones(30), lambda t: norm.pdf(t))
        assert all_alt == pytest.approx(all_null, rel=1e-12)

    def test_zero_density_with_mass_rejected(self):
        with pytest.raises(DegenerateInputError):
            q1_value(
                np.array([0.0]), np.array([0.5]), lambda t: np.zeros_like(t)
            )


class TestSampleLabels:
    def test_deterministic_extremes(self):
        q = np.array([0.0, 1.0, 0.0])
        labels = sample_labels(q, 50, seed=1)
        assert labels.shape == (50, 3)
        assert set(np.unique(labels)) <= {0, 1}
        np.testing.assert_array_equal(labels[:, 0], 0)
        np.testing.assert_array_equal(labels[:, 1], 1)

    def test_fair_coin_concentration(self):
        labels = sample_labels(np.array([0.5]), 10_000, seed=2)
        assert abs(labels.mean() - 0.5) <= 0.02

    def test_seed_determinism(self):
        q = np.linspace(0.1, 0.9, 7)
        np.testing.assert_array_equal(
            sample_labels(q, 20, seed=3), sample_labels(q, 20, seed=3)
        )
        assert not np.array_equal(
            sample_labels(q, 20, seed=3), sample_labels(q, 20, seed=4)
        )


def _small_field(rng, m=40):
    coords = rng.uniform(0, 6, (m, 3))
    delta_mu = rng.standard_normal(m) * 0.3
    bw = KernelBandwidths((2.2, 2.2, 2.2), 0.35, (2.2, 2.2, 2.2))
    return build_field_lattices(coords, delta_mu, bw)


class TestQ2:
    def test_zero_weights_give_uniform_field_loss(self):
        rng = np.random.default_rng(12)
        lattices = _small_field(rng, 30)
        labels = sample_labels(rng.random(30), 8, seed=5)
        loss = q2_loss(FieldWeights(0.0, 0.0, 0.0), labels, lattices)
        assert loss == pytest.approx(30 * np.log(2.0), rel=1e-12)

    def test_matched_strong_prior_drives_loss_to_zero(self):
        rng = np.random.default_rng(13)
        lattices = _small_field(rng, 25)
        labels = np.zeros((10, 25), dtype=np.uint8)
        loss = q2_loss(FieldWeights(20.0, 0.0, 0.0), labels, lattices)
        assert 0.0 < loss < 1e-6

    def test_lattice_matches_dense_path_small_chain(self):
        from latticefdr.meanfield import (
            dense_mean_field,
            kernel_positions,
            unary_prior,
        )

        rng = np.random.default_rng(14)
        coords = np.array([[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [3.0, 0.0, 0.0]])
        delta_mu = np.array([0.1, -0.2, 0.15])
        bw = KernelBandwidths((1.5, 1.5, 1.5), 0.3, (1.5, 1.5, 1.5))
        w = FieldWeights(0.4, 0.6, 0.6)
        lattices = build_field_lattices(coords, delta_mu, bw)
        labels = sample_labels(np.array([0.3, 0.6, 0.4]), 30, seed=6)

        loss_lat = q2_loss(w, labels, lattices, iterations=5)
        q_dense = dense_mean_field(
            unary_prior(w.w0, 3), kernel_positions(coords, delta_mu, bw), w, 5
        )
        ones = labels.sum(axis=0)
        expected = -(
            ones @ np.log(q_dense) + (30 - ones) @ np.log(1 - q_dense)
        ) / 30
        assert loss_lat == pytest.approx(expected, abs=0.02 * abs(expected) + 1e-6)

    def test_gradient_matches_five_point_stencil(self):
        rng = np.random.default_rng(15)
        lattices = _small_field(rng, 35)
        labels = sample_labels(rng.random(35), 12, seed=7)
        w = FieldWeights(0.3, 0.5, 0.8)
        grad = q2_gradient(w, labels, lattices, iterations=3)
        base = w.as_array()
        for k in range(3):
            step = max(1e-3 * abs(base[k]), 1e-4)

            def loss_at(delta, k=k):
                shifted = base.copy()
                shifted[k] += delta
                return q2_loss(FieldWeights(*shifted), labels, lattices, 3)

            stencil = (
                -loss_at(2 * step)
                + 8 * loss_at(step)
                - 8 * loss_at(-step)
                + loss_at(-2 * step)
            ) / (12 * step)
            assert grad[k] == pytest.approx(stencil, rel=1e-3, abs=1e-6)

    def test_gradient_step_size_consistency(self):
        rng = np.random.default_rng(16)
        lattices = _small_field(rng, 30)
        labels = sample_labels(rng.random(30), 10, seed=8)
        w = FieldWeights(0.2, 0.4, 0.4)
        grad = q2_gradient(w, labels, lattices, iterations=2)
        base = w.as_array()
        coarse = np.empty(3)
        for k in range(3):
            step = 4.0 * max(1e-4 * abs(base[k]), 1e-5)
            hi, lo = base.copy(), base.copy()
            hi[k] += step
            lo[k] -= step
            coarse[k] = (
                q2_loss(FieldWeights(*hi), labels, lattices, 2)
                - q2_loss(FieldWeights(*lo), labels, lattices, 2)
            ) / (2 * step)
        np.testing.assert_allclose(grad, coarse, rtol=1e-3, atol=1e-6)

    def test_symmetric_labels_zero_prior_gradient_in_w0(self):
        rng = np.random.default_rng(17)
        lattices = _small_field(rng, 20)
        half = np.zeros((2, 20), dtype=np.uint8)
        half[1] = 1
        grad = q2_gradient(FieldWeights(0.0, 0.0, 0.0), half, lattices, 2)
        assert abs(grad[0]) <= 1e-6


class TestOptimizeW:
    def test_first_step_closed_form(self, monkeypatch):
        monkeypatch.setattr(em, "q2_loss", lambda *a, **k: 0.0)
        monkeypatch.setattr(
            em, "q2_gradient", lambda *a, **k: np.array([1.0, 0.0, 0.0])
        )
        out = optimize_w(
            FieldWeights(1.0, 1.0, 1.0),
            labels=np.zeros((1, 2), dtype=np.uint8),
            lattices=None,
            epochs=1,
            lr=0.1,
            weight_decay=0.0,
        )
        assert out.w0 == pytest.approx(0.9, abs=1e-6)
        assert out.w1 == pytest.approx(1.0, abs=1e-12)
        assert out.w2 == pytest.approx(1.0, abs=1e-12)

    def test_zero_gradient_leaves_pure_decay(self, monkeypatch):
        monkeypatch.setattr(em, "q2_loss", lambda *a, **k: 0.0)
        monkeypatch.setattr(em, "q2_gradient", lambda *a, **k: np.zeros(3))
        out = optimize_w(
            FieldWeights(2.0, 1.0, 0.5),
            labels=np.zeros((1, 2), dtype=np.uint8),
            lattices=None,
            epochs=3,
            lr=0.1,
            weight_decay=0.01,
        )
        shrink = (1.0 - 0.1 * 0.01) ** 3
        np.testing.assert_allclose(
            out.as_array(), np.array([2.0, 1.0, 0.5]) * shrink, rtol=1e-12
        )

    def test_projection_keeps_pairwise_weights_nonnegative(self, monkeypatch):
        monkeypatch.setattr(em, "q2_loss", lambda *a, **k: 0.0)
        monkeypatch.setattr(
            em, "q2_gradient", lambda *a, **k: np.array([0.0, 5.0, 5.0])
        )
        out = optimize_w(
            FieldWeights(0.0, 0.001, 0.0),
            labels=np.zeros((1, 2), dtype=np.uint8),
            lattices=None,
            epochs=2,
            lr=0.1,
            weight_decay=0.0,
        )
        assert out.w1 == 0.0
        assert out.w2 == 0.0

    def test_descent_usually_improves_the_loss(self):
        improvements = 0
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            lattices = _small_field(rng, 30)
            labels = sample_labels(rng.random(30), 10, seed=seed)
            w0 = FieldWeights(0.5, 1.0, 1.0)
            before = q2_loss(w0, labels, lattices, 2)
            tuned = optimize_w(
                w0, labels, lattices, iterations=2, epochs=5, lr=0.05
            )
            after = q2_loss(tuned, labels, lattices, 2)
            improvements += after <= before
        assert improvements >= 18


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(77)
    m = 150
    coords = rng.uniform(0, 8, (m, 3))
    nonnull = rng.random(m) < 0.3
    x = np.where(nonnull, rng.normal(-2.0, 1.0, m), rng.standard_normal(m))
    delta_mu = np.where(nonnull, -0.5, 0.0) + rng.normal(0, 0.05, m)
    config = EmConfig(iterations=6, mc_samples=20, epochs=2, seed=3)
    return (x, coords, delta_mu, config), em_fit(x, coords, delta_mu, config)


class TestEmFit:
    def test_returns_consistent_state(self, fitted):
        (_, _, _, config), (w, f1, state) = fitted
        assert state.iteration == len(state.loss_history)
        assert state.iteration <= config.iterations
        assert state.best_loss == min(state.loss_history)
        assert w.w1 >= 0 and w.w2 >= 0
        assert np.isfinite(state.best_loss)

    def test_f1_integrates_to_one(self, fitted):
        _, (_, f1, _) = fitted
        lo = f1.centers.min() - 8 * f1.bandwidth
        hi = f1.centers.max() + 8 * f1.bandwidth
        grid = np.linspace(lo, hi, 4001)
        assert np.trapezoid(f1.density(grid), grid) == pytest.approx(1.0, abs=1e-3)

    def test_bitwise_reproducible(self, fitted):
        (x, coords, delta_mu, config), (w, f1, state) = fitted
        w2, f12, state2 = em_fit(x, coords, delta_mu, config)
        assert np.array_equal(w.as_array(), w2.as_array())
        assert np.array_equal(f1.weights, f12.weights)
        assert f1.bandwidth == f12.bandwidth
        assert state.loss_history == state2.loss_history

    def test_weak_signal_mode_starts_smoothness_high(self):
        rng = np.random.default_rng(78)
        m = 60
        coords = rng.uniform(0, 5, (m, 3))
        x = rng.standard_normal(m)
        delta_mu = rng.normal(0, 0.05, m)
        config = EmConfig(iterations=1, mc_samples=5, epochs=1, weak_signal=True)
        w, _, _ = em_fit(x, coords, delta_mu, config)
        # one iteration of tiny steps cannot move w2 far from its start
        assert w.w2 > 4.5
