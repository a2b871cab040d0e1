"""Privacy barrier primitives: clipping, masks, histograms, noise correction."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2

from dpcollab.errors import ConfigurationError, ProtocolError
from dpcollab.privacy import (
    MaskSet,
    NoiseCorrectionState,
    NormHistogram,
    aggregate_histograms,
    bin_index,
    build_norm_histogram,
    clip_gradient,
    correction_matrices,
    default_bin_edges,
    generate_masks,
    matrix_mechanism_outputs,
    next_effective_noise,
    per_step_sigma,
    select_clip_bound,
)


class TestClipGradient:
    def test_small_gradient_unchanged(self):
        g = np.array([0.3, -0.4])
        out = clip_gradient(g, 2.0)
        assert np.array_equal(out, g)
        assert out is not g  # caller keeps ownership

    def test_three_four_scales_to_bound(self):
        out = clip_gradient(np.array([3.0, 4.0]), 2.5)
        np.testing.assert_allclose(out, [1.5, 2.0], rtol=0, atol=1e-15)
        assert np.linalg.norm(out) == pytest.approx(2.5, abs=1e-12)

    def test_zero_vector_unchanged(self):
        assert np.array_equal(clip_gradient(np.zeros(4), 1.0), np.zeros(4))

    def test_bound_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            clip_gradient(np.ones(2), 0.0)

    @given(
        values=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8),
        bound=st.floats(0.01, 1e3),
    )
    @settings(max_examples=200, deadline=None)
    def test_idempotent_and_bounded(self, values, bound):
        g = np.array(values)
        once = clip_gradient(g, bound)
        twice = clip_gradient(once, bound)
        assert np.linalg.norm(once) <= bound * (1 + 1e-12)
        np.testing.assert_allclose(twice, once, rtol=1e-12, atol=0)


class TestMasks:
    def test_single_worker_gets_the_noise(self):
        noise = np.array([1.0, -2.0, 3.0])
        ms = generate_masks(1, noise, blinding_std=5.0, rng=np.random.default_rng(0))
        assert np.array_equal(ms.masks[0], noise)
        assert np.array_equal(ms.realized_noise, noise)

    def test_zero_blinding_equal_shares(self):
        noise = np.array([4.0, -8.0])
        ms = generate_masks(4, noise, 0.0, np.random.default_rng(0))
        for m in ms.masks:
            np.testing.assert_array_equal(m, noise / 4)

    def test_sum_exactness(self):
        rng = np.random.default_rng(7)
        for n in (2, 3, 8):
            noise = rng.normal(0, 20.0, size=256)
            ms = generate_masks(n, noise, blinding_std=2000.0, rng=rng)
            err = np.max(np.abs(np.sum(ms.masks, axis=0) - ms.realized_noise))
            assert err < 1e-9

    def test_aggregation_identity(self):
        # sum(g_i + m_i) - sum(g_i) recovers the realized noise.
        rng = np.random.default_rng(8)
        n, dim = 4, 64
        grads = [rng.normal(size=dim) for _ in range(n)]
        noise = rng.normal(0, 10.0, size=dim)
        ms = generate_masks(n, noise, blinding_std=1000.0, rng=rng)
        masked_total = np.zeros(dim)
        for g, m in zip(grads, ms.masks):
            masked_total += g + m
        clean_total = np.zeros(dim)
        for g in grads:
            clean_total += g
        np.testing.assert_allclose(masked_total - clean_total, ms.realized_noise, atol=1e-9, rtol=0)

    def test_empty_worker_count_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_masks(0, np.ones(3), 1.0, np.random.default_rng(0))

    def test_mask_set_invariant_checked(self):
        with pytest.raises(ConfigurationError):
            MaskSet(masks=[np.zeros(2), np.zeros(3)], realized_noise=np.zeros(2))

    def test_individual_mask_marginal_variance_floor(self):
        # Var(mask_i) = blinding^2 (1 - 1/n) + (scale/n)^2 per coordinate: no
        # single mask exposes its small noise share.
        rng = np.random.default_rng(9)
        n, dim, trials = 4, 4, 20_000
        blinding, scale = 2.0, 1.0
        floor = blinding**2 * (1 - 1 / n)
        samples = np.empty((trials, dim))
        for t in range(trials):
            noise = rng.normal(0, scale, size=dim)
            samples[t] = generate_masks(n, noise, blinding, rng).masks[0]
        est = np.mean(samples**2, axis=0)
        # 5-sigma-ish sampling slack on a variance estimate over `trials` draws.
        slack = 5.0 * np.sqrt(2.0 / trials)
        assert np.all(est >= floor * (1 - slack))

    def test_mask_sum_variance_matches_generator(self):
        # n=4, dim=1000, 1e4 trials: per-coordinate variance of sum(masks)
        # sits inside the 99% chi-square band around sigma^2 C^2 for ~99% of
        # coordinates (the sum is exactly the realized draw).
        rng = np.random.default_rng(10)
        n, dim, trials = 4, 1000, 10_000
        sigma_c = 3.0
        second_moment = np.zeros(dim)
        for _ in range(trials):
            noise = rng.normal(0, sigma_c, size=dim)
            ms = generate_masks(n, noise, blinding_std=10.0 * sigma_c, rng=rng)
            second_moment += np.sum(ms.masks, axis=0) ** 2
        est = second_moment / trials
        lo = chi2.ppf(0.005, trials) / trials * sigma_c**2
        hi = chi2.ppf(0.995, trials) / trials * sigma_c**2
        coverage = np.mean((est >= lo) & (est <= hi))
        assert coverage >= 0.98


class TestNoiseCorrection:
    def test_per_step_sigma_examples(self):
        assert per_step_sigma(20.0, 0.0) == 20.0
        assert per_step_sigma(20.0, 0.7) == pytest.approx(20.0 / 0.3)
        lam = 0.7
        assert (1 - lam) * per_step_sigma(20.0, lam) == pytest.approx(20.0, abs=1e-12)

    def test_per_step_sigma_rejects_lambda_one(self):
        with pytest.raises(ConfigurationError):
            per_step_sigma(1.0, 1.0)

    def test_lambda_zero_returns_fresh_draws(self):
        state = NoiseCorrectionState(lam=0.0, step_sigma=2.0)
        replay = np.random.default_rng(3)
        rng = np.random.default_rng(3)
        for _ in range(4):
            effective, state = next_effective_noise(state, 16, rng)
            np.testing.assert_array_equal(effective, replay.normal(0, 2.0, size=16))

    def test_zero_sigma_forever_zero(self):
        state = NoiseCorrectionState(lam=0.9, step_sigma=0.0)
        rng = np.random.default_rng(0)
        for _ in range(3):
            effective, state = next_effective_noise(state, 8, rng)
            assert np.array_equal(effective, np.zeros(8))

    def test_state_starts_without_previous_noise(self):
        state = NoiseCorrectionState(lam=0.5, step_sigma=1.0)
        assert state.prev_noise is None
        _, state = next_effective_noise(state, 4, np.random.default_rng(0))
        assert state.prev_noise is not None

    def test_telescoping_identity_t3(self):
        lam, scale, dim, seed = 0.7, 5.0, 32, 11
        state = NoiseCorrectionState(lam=lam, step_sigma=scale)
        rng = np.random.default_rng(seed)
        total = np.zeros(dim)
        for _ in range(3):
            effective, state = next_effective_noise(state, dim, rng)
            total += effective
        replay = np.random.default_rng(seed)
        xi = [replay.normal(0, scale, size=dim) for _ in range(3)]
        expected = (1 - lam) * (xi[0] + xi[1]) + xi[2]
        np.testing.assert_allclose(total, expected, atol=1e-9, rtol=0)

    @given(lam=st.floats(0.0, 0.95), steps=st.integers(1, 12), seed=st.integers(0, 1000))
    @settings(max_examples=60, deadline=None)
    def test_telescoping_identity_property(self, lam, steps, seed):
        scale, dim = 3.0, 8
        state = NoiseCorrectionState(lam=lam, step_sigma=scale)
        rng = np.random.default_rng(seed)
        total = np.zeros(dim)
        for _ in range(steps):
            effective, state = next_effective_noise(state, dim, rng)
            total += effective
        replay = np.random.default_rng(seed)
        xi = [replay.normal(0, scale, size=dim) for _ in range(steps)]
        expected = (1 - lam) * np.sum(xi[:-1], axis=0) + xi[-1] if steps > 1 else xi[0]
        np.testing.assert_allclose(total, expected, atol=1e-9, rtol=0)


def _norm_grads(norms, dim=6):
    out = []
    for v in norms:
        g = np.zeros(dim)
        g[0] = v
        out.append(g)
    return out


class TestNormHistogram:
    def test_direct_binning(self):
        hist = build_norm_histogram(_norm_grads([0.5, 1.5, 2.5]), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(hist.counts, [1, 1, 1])
        assert hist.total == 3

    def test_edge_value_belongs_to_its_bin(self):
        hist = build_norm_histogram(_norm_grads([1.0, 2.0]), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(hist.counts, [1, 1, 0])

    def test_overflow_goes_to_last_bin(self):
        hist = build_norm_histogram(_norm_grads([99.0]), [1.0, 2.0])
        np.testing.assert_array_equal(hist.counts, [0, 1])

    def test_identical_norms_single_bin(self):
        hist = build_norm_histogram(_norm_grads([1.5] * 7), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(hist.counts, [0, 7, 0])
        assert hist.total == 7

    def test_bin_index_convention(self):
        edges = np.array([1.0, 2.0, 4.0])
        assert bin_index(edges, 0.0) == 0
        assert bin_index(edges, 1.0) == 0
        assert bin_index(edges, 1.0001) == 1
        assert bin_index(edges, 4.0) == 2
        assert bin_index(edges, 100.0) == 2

    def test_aggregate_exact_sum_when_noiseless(self):
        a = NormHistogram([1.0, 2.0], [1.0, 2.0], total=3)
        b = NormHistogram([1.0, 2.0], [3.0, 4.0], total=7)
        agg = aggregate_histograms([a, b], 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(agg.counts, [4.0, 6.0])
        assert agg.total == 10

    def test_aggregate_single_identity(self):
        a = NormHistogram([1.0, 2.0], [5.0, 1.0], total=6)
        agg = aggregate_histograms([a], 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(agg.counts, a.counts)

    def test_aggregate_rejects_mismatched_edges(self):
        a = NormHistogram([1.0, 2.0], [1.0, 2.0], total=3)
        b = NormHistogram([1.0, 3.0], [1.0, 2.0], total=3)
        with pytest.raises(ProtocolError):
            aggregate_histograms([a, b], 0.0, np.random.default_rng(0))

    def test_noise_is_added_per_bin(self):
        a = NormHistogram([1.0, 2.0, 3.0], [10.0, 10.0, 10.0], total=30)
        agg = aggregate_histograms([a], 5.0, np.random.default_rng(1))
        assert not np.array_equal(agg.counts, a.counts)


class TestSelectClipBound:
    def test_all_mass_first_bin(self):
        hist = NormHistogram([1.0, 2.0, 3.0], [9.0, 0.0, 0.0], total=9)
        for r in (0.01, 0.5, 1.0):
            assert select_clip_bound(hist, r) == 1.0

    def test_uniform_quartiles(self):
        hist = NormHistogram([1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 10.0], total=40)
        assert select_clip_bound(hist, 0.75) == 3.0

    def test_negative_counts_clamped(self):
        hist = NormHistogram([1.0, 2.0, 3.0], [-50.0, 10.0, 10.0], total=20)
        assert select_clip_bound(hist, 0.5) == 2.0

    def test_degenerate_returns_largest_edge(self):
        hist = NormHistogram([1.0, 2.0, 3.0], [-4.0, -1.0, -2.0], total=0)
        assert select_clip_bound(hist, 0.5) == 3.0

    @given(r_lo=st.floats(0.05, 1.0), r_hi=st.floats(0.05, 1.0), seed=st.integers(0, 99))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_r(self, r_lo, r_hi, seed):
        if r_lo > r_hi:
            r_lo, r_hi = r_hi, r_lo
        rng = np.random.default_rng(seed)
        hist = NormHistogram([1.0, 2.0, 3.0, 4.0], rng.normal(5, 4, size=4), total=20)
        assert select_clip_bound(hist, r_lo) <= select_clip_bound(hist, r_hi)

    def test_matches_brute_force_quantile_oracle(self):
        # sigma_g = 0 pipeline vs the sort-based r-quantile rounded up to its
        # bin edge, over 50 random norm sets.
        edges = default_bin_edges(2.0)
        rng = np.random.default_rng(42)
        for trial in range(50):
            norms = rng.lognormal(mean=0.0, sigma=0.8, size=rng.integers(10, 400))
            r = float(rng.uniform(0.05, 1.0))
            hist = build_norm_histogram(_norm_grads(norms.tolist()), edges)
            agg = aggregate_histograms([hist], 0.0, rng)
            got = select_clip_bound(agg, r)

            ranked = np.sort(norms)
            k = int(np.ceil(r * len(norms)))
            quantile_norm = ranked[k - 1]
            idx = min(int(np.searchsorted(edges, quantile_norm, side="left")), len(edges) - 1)
            assert got == edges[idx], f"trial {trial}: r={r}, n={len(norms)}"


class TestCorrectionMatrices:
    def test_lambda_zero_identity(self):
        decoder, encoder_inv = correction_matrices(5, 0.0)
        np.testing.assert_array_equal(decoder, np.eye(5))
        np.testing.assert_array_equal(encoder_inv, np.eye(5))

    def test_two_by_two(self):
        decoder, encoder_inv = correction_matrices(2, 0.5)
        np.testing.assert_array_equal(decoder, [[1.0, 0.0], [-0.5, 1.0]])
        np.testing.assert_array_equal(encoder_inv, [[1.0, 0.0], [0.5, 1.0]])

    @pytest.mark.parametrize("lam", [0.3, 0.7, 0.9])
    @pytest.mark.parametrize("n", [1, 2, 5, 16])
    def test_product_is_identity(self, n, lam):
        decoder, encoder_inv = correction_matrices(n, lam)
        deviation = np.max(np.abs(decoder @ encoder_inv - np.eye(n)))
        assert deviation < 1e-12

    def test_matrix_path_matches_recurrence(self):
        n, lam, dim, seed = 5, 0.7, 24, 17
        rng = np.random.default_rng(seed)
        grads = [rng.normal(size=dim) for _ in range(n)]

        state = NoiseCorrectionState(lam=lam, step_sigma=3.0)
        noise_rng = np.random.default_rng(seed + 1)
        recurrence = []
        for g in grads:
            effective, state = next_effective_noise(state, dim, noise_rng)
            recurrence.append(g + effective)

        replay = np.random.default_rng(seed + 1)
        noise_rows = [replay.normal(0, 3.0, size=dim) for _ in range(n)]
        matrix = matrix_mechanism_outputs(grads, noise_rows, lam)
        for a, b in zip(matrix, recurrence):
            np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)

    def test_lambda_zero_is_plain_noise_addition(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=4) for _ in range(3)]
        noise = [rng.normal(size=4) for _ in range(3)]
        out = matrix_mechanism_outputs(grads, noise, 0.0)
        for o, g, z in zip(out, grads, noise):
            np.testing.assert_allclose(o, g + z, atol=1e-12)

    def test_single_step_ignores_lambda(self):
        g = [np.array([1.0, 2.0])]
        z = [np.array([0.5, -0.5])]
        out = matrix_mechanism_outputs(g, z, 0.9)
        np.testing.assert_allclose(out[0], [1.5, 1.5], atol=1e-12)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            matrix_mechanism_outputs([np.zeros(3)], [np.zeros(4)], 0.5)
