"""Dense attention baselines: masks, oracle, heads, sampling, permutations."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from localattn.attention import (
    AttnConfig,
    attention_band_mass,
    band_mask,
    band_mass_per_row,
    count_multihead_params,
    full_attention,
    _full_attention,
    init_head_weights,
    masked_full_attention_oracle,
    multi_head,
    permute_rows,
    prob_attention,
    sample_count,
)
from localattn.tensor import DimensionError, EAGER, Tensor

NEG_INF = float("-inf")


class TestAttnConfig:
    def test_d_head_defaults_to_dv_over_heads(self):
        cfg = AttnConfig(n=8, d_q=4, d_v=6, window=3, heads=2)
        assert cfg.d_head == 3

    def test_indivisible_dv_requires_explicit_d_head(self):
        with pytest.raises(ValueError, match="divisible"):
            AttnConfig(n=8, d_q=4, d_v=5, window=3, heads=2)
        cfg = AttnConfig(n=8, d_q=4, d_v=5, window=3, heads=2, d_head=4)
        assert cfg.d_head == 4

    def test_window_bounds(self):
        with pytest.raises(ValueError):
            AttnConfig(n=4, d_q=1, d_v=1, window=5)
        with pytest.raises(ValueError):
            AttnConfig(n=4, d_q=1, d_v=1, window=0)

    def test_positivity(self):
        with pytest.raises(ValueError):
            AttnConfig(n=0, d_q=1, d_v=1, window=1)
        with pytest.raises(ValueError):
            AttnConfig(n=2, d_q=0, d_v=1, window=1)


class TestBandMask:
    def test_window1_keeps_diagonal_only(self):
        m = band_mask(3, 1).data
        assert_array_equal(np.isfinite(m), np.eye(3, dtype=bool))

    def test_window_n_is_causal_lower_triangle(self):
        m = band_mask(3, 3).data
        assert_array_equal(np.isfinite(m), np.tril(np.ones((3, 3), dtype=bool)))

    def test_n6_window2_rows(self):
        m = band_mask(6, 2).data
        assert list(np.nonzero(np.isfinite(m[0]))[0]) == [0]
        for i in range(1, 6):
            assert list(np.nonzero(np.isfinite(m[i]))[0]) == [i - 1, i]

    def test_row_zero_counts(self):
        for n, window in [(5, 2), (7, 3), (4, 4), (6, 1)]:
            m = band_mask(n, window).data
            for i in range(n):
                assert np.isfinite(m[i]).sum() == min(i + 1, window)

    def test_kept_entries_are_exact_zero(self):
        m = band_mask(5, 3).data
        assert (m[np.isfinite(m)] == 0.0).all()

    def test_window_out_of_range(self):
        with pytest.raises(ValueError):
            band_mask(3, 4)
        with pytest.raises(ValueError):
            band_mask(3, 0)


class TestFullAttention:
    def test_single_row_returns_value(self):
        q = Tensor([[2.0, -1.0]])
        k = Tensor([[0.5, 0.5]])
        v = Tensor([[7.0, 8.0, 9.0]])
        assert_array_equal(full_attention(q, k, v).data, v.data)

    def test_zero_keys_give_column_mean(self):
        rng = np.random.default_rng(42)
        q = Tensor(rng.standard_normal((5, 3)))
        k = Tensor.zeros((5, 3))
        v = Tensor(rng.standard_normal((5, 2)))
        out = full_attention(q, k, v)
        assert_allclose(out.data, np.tile(v.data.mean(axis=0), (5, 1)), atol=1e-15)

    def test_banded_case_matches_per_row_manual(self):
        rng = np.random.default_rng(7)
        q = Tensor(rng.standard_normal((4, 2)))
        k = Tensor(rng.standard_normal((4, 2)))
        v = Tensor(rng.standard_normal((4, 3)))
        out = full_attention(q, k, v, band_mask(4, 2))
        for i in range(4):
            lo = max(0, i - 1)
            raw = q.data[i] @ k.data[lo : i + 1].T / math.sqrt(2.0)
            w = np.exp(raw - raw.max())
            w /= w.sum()
            assert_allclose(out.data[i], w @ v.data[lo : i + 1], atol=1e-12)

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(DimensionError):
            full_attention(
                Tensor.zeros((3, 2)), Tensor.zeros((4, 2)), Tensor.zeros((3, 1))
            )
        with pytest.raises(DimensionError):
            full_attention(
                Tensor.zeros((3, 2)), Tensor.zeros((3, 2)), Tensor.zeros((2, 1))
            )

    def test_generic_path_bitwise_equals_fused(self):
        rng = np.random.default_rng(11)
        q = Tensor(rng.standard_normal((6, 3)))
        k = Tensor(rng.standard_normal((6, 3)))
        v = Tensor(rng.standard_normal((6, 2)))
        for mask in (None, band_mask(6, 2)):
            fused = full_attention(q, k, v, mask)
            generic = _full_attention(EAGER, q, k, v, mask)
            assert_array_equal(fused.data, generic.data)


class TestMaskedOracle:
    def test_window_n_equals_causal_full(self):
        rng = np.random.default_rng(3)
        q = Tensor(rng.standard_normal((5, 2)))
        k = Tensor(rng.standard_normal((5, 2)))
        v = Tensor(rng.standard_normal((5, 2)))
        causal = Tensor._wrap(
            np.where(np.tril(np.ones((5, 5), dtype=bool)), 0.0, -np.inf)
        )
        assert_array_equal(
            masked_full_attention_oracle(q, k, v, 5).data,
            full_attention(q, k, v, causal).data,
        )

    def test_window1_returns_values(self):
        rng = np.random.default_rng(4)
        q = Tensor(rng.standard_normal((6, 3)))
        k = Tensor(rng.standard_normal((6, 3)))
        v = Tensor(rng.standard_normal((6, 2)))
        assert_allclose(
            masked_full_attention_oracle(q, k, v, 1).data, v.data, atol=1e-15
        )

    def test_two_term_rows_by_hand(self):
        rng = np.random.default_rng(5)
        q = Tensor(rng.standard_normal((6, 2)))
        k = Tensor(rng.standard_normal((6, 2)))
        v = Tensor(rng.standard_normal((6, 3)))
        out = masked_full_attention_oracle(q, k, v, 2)
        for i in range(1, 6):
            raw = np.array(
                [q.data[i] @ k.data[i - 1], q.data[i] @ k.data[i]]
            ) / math.sqrt(2.0)
            w = np.exp(raw - raw.max())
            w /= w.sum()
            assert_allclose(out.data[i], w[0] * v.data[i - 1] + w[1] * v.data[i],
                            atol=1e-12)

    def test_rows_stay_in_value_hull(self):
        rng = np.random.default_rng(6)
        q = Tensor(rng.standard_normal((9, 2)))
        k = Tensor(rng.standard_normal((9, 2)))
        v = Tensor(rng.standard_normal((9, 3)))
        window = 3
        out = masked_full_attention_oracle(q, k, v, window)
        for i in range(9):
            lo = max(0, i - window + 1)
            hull = v.data[lo : i + 1]
            assert (out.data[i] >= hull.min(axis=0) - 1e-12).all()
            assert (out.data[i] <= hull.max(axis=0) + 1e-12).all()


class TestMultiHead:
    def test_identity_projections_reduce_to_full(self):
        from localattn.attention import HeadWeights

        rng = np.random.default_rng(8)
        q = Tensor(rng.standard_normal((5, 3)))
        k = Tensor(rng.standard_normal((5, 3)))
        v = Tensor(rng.standard_normal((5, 3)))
        eye = Tensor(np.eye(3))
        w = HeadWeights((eye,), (eye,), (eye,), eye)
        assert_array_equal(
            multi_head(q, k, v, w, kind="full").data,
            full_attention(q, k, v).data,
        )

    def test_zero_output_projection_annihilates(self):
        cfg = AttnConfig(n=4, d_q=3, d_v=2, window=2, heads=2, d_head=1)
        w = init_head_weights(cfg, seed=0)
        from localattn.attention import HeadWeights

        w = HeadWeights(w.w_q, w.w_k, w.w_v, Tensor.zeros((2, 2)))
        rng = np.random.default_rng(9)
        out = multi_head(
            Tensor(rng.standard_normal((4, 3))),
            Tensor(rng.standard_normal((4, 3))),
            Tensor(rng.standard_normal((4, 2))),
            w,
        )
        assert_array_equal(out.data, np.zeros((4, 2)))

    def test_full_attention_is_permutation_equivariant(self):
        cfg = AttnConfig(n=12, d_q=4, d_v=4, window=3, heads=2)
        w = init_head_weights(cfg, seed=1)
        rng = np.random.default_rng(10)
        q = Tensor(rng.standard_normal((12, 4)))
        k = Tensor(rng.standard_normal((12, 4)))
        v = Tensor(rng.standard_normal((12, 4)))
        base = multi_head(q, k, v, w, kind="full")
        for trial in range(10):
            pi = np.random.default_rng(100 + trial).permutation(12)
            permuted = multi_head(
                permute_rows(q, pi), permute_rows(k, pi), permute_rows(v, pi),
                w, kind="full",
            )
            dev = np.max(np.abs(permuted.data - permute_rows(base, pi).data))
            assert dev <= 1e-10

    def test_banded_attention_is_not_equivariant(self):
        cfg = AttnConfig(n=12, d_q=4, d_v=4, window=3, heads=2)
        w = init_head_weights(cfg, seed=2)
        hits = 0
        for trial in range(10):
            rng = np.random.default_rng(200 + trial)
            q = Tensor(rng.standard_normal((12, 4)))
            k = Tensor(rng.standard_normal((12, 4)))
            v = Tensor(rng.standard_normal((12, 4)))
            pi = rng.permutation(12)
            while (pi == np.arange(12)).all():
                pi = rng.permutation(12)
            base = multi_head(q, k, v, w, kind="lam", window=3)
            permuted = multi_head(
                permute_rows(q, pi), permute_rows(k, pi), permute_rows(v, pi),
                w, kind="lam", window=3,
            )
            if np.max(np.abs(permuted.data - permute_rows(base, pi).data)) > 1e-3:
                hits += 1
        assert hits >= 9

    def test_unknown_kind_rejected(self):
        cfg = AttnConfig(n=4, d_q=2, d_v=2, window=2)
        w = init_head_weights(cfg)
        z = Tensor.zeros((4, 2))
        with pytest.raises(ValueError, match="kind"):
            multi_head(z, z, z, w, kind="banded")

    def test_lam_kind_needs_window(self):
        cfg = AttnConfig(n=4, d_q=2, d_v=2, window=2)
        w = init_head_weights(cfg)
        z = Tensor.zeros((4, 2))
        with pytest.raises(ValueError, match="window"):
            multi_head(z, z, z, w, kind="lam")


class TestParamCount:
    def test_unit_case_enumerates_four_matrices(self):
        cfg = AttnConfig(n=2, d_q=1, d_v=1, window=1, heads=1, d_head=1)
        got = count_multihead_params(cfg)
        assert got.exact == 4
        # at heads=1 the collapsed form folds to the same total
        assert got.collapsed == 4

    def test_counts_agree_iff_single_head(self):
        one = count_multihead_params(
            AttnConfig(n=2, d_q=5, d_v=7, window=1, heads=1, d_head=3)
        )
        assert one.exact == one.collapsed == 3 * (2 * 5 + 2 * 7)
        many = count_multihead_params(
            AttnConfig(n=2, d_q=5, d_v=7, window=1, heads=3, d_head=2)
        )
        assert many.exact != many.collapsed

    def test_large_case(self):
        cfg = AttnConfig(n=2, d_q=64, d_v=64, window=1, heads=8, d_head=8)
        got = count_multihead_params(cfg)
        assert got.exact == 8 * 8 * (128 + 64) + 8 * 8 * 64 == 16384
        assert got.collapsed == 8 * (128 + 9 * 64) == 5632


class TestProbAttention:
    def test_saturated_selection_equals_full(self):
        # n=8: 5*ceil(log2 8) = 15 >= 8, every query selected
        rng = np.random.default_rng(12)
        q = Tensor(rng.standard_normal((8, 3)))
        k = Tensor(rng.standard_normal((8, 3)))
        v = Tensor(rng.standard_normal((8, 2)))
        assert sample_count(8) >= 8
        assert_array_equal(
            prob_attention(q, k, v, seed=0).data, full_attention(q, k, v).data
        )

    def test_zero_queries_give_column_mean_everywhere(self):
        rng = np.random.default_rng(13)
        n = 64
        q = Tensor.zeros((n, 3))
        k = Tensor(rng.standard_normal((n, 3)))
        v = Tensor(rng.standard_normal((n, 2)))
        out = prob_attention(q, k, v, seed=0)
        assert_allclose(out.data, np.tile(v.data.mean(axis=0), (n, 1)), atol=1e-15)

    def test_non_selected_rows_are_exact_value_mean(self):
        rng = np.random.default_rng(14)
        n = 64
        u = sample_count(n)
        assert u < n
        q = Tensor(rng.standard_normal((n, 4)))
        k = Tensor(rng.standard_normal((n, 4)))
        v = Tensor(rng.standard_normal((n, 3)))
        out = prob_attention(q, k, v, seed=5)
        mean = v.data.mean(axis=0)
        mean_rows = [i for i in range(n) if np.array_equal(out.data[i], mean)]
        assert len(mean_rows) == n - u

    def test_seed_reproducibility(self):
        rng = np.random.default_rng(15)
        n = 64
        q = Tensor(rng.standard_normal((n, 4)))
        k = Tensor(rng.standard_normal((n, 4)))
        v = Tensor(rng.standard_normal((n, 3)))
        a = prob_attention(q, k, v, seed=9)
        b = prob_attention(q, k, v, seed=9)
        assert_array_equal(a.data, b.data)


class TestBandMass:
    def test_single_position_is_one(self):
        q = Tensor([[1.0]])
        k = Tensor([[2.0]])
        assert attention_band_mass(q, k, 1) == 1.0

    def test_zero_keys_closed_form(self):
        rng = np.random.default_rng(16)
        n, window = 10, 3
        q = Tensor(rng.standard_normal((n, 2)))
        k = Tensor.zeros((n, 2))
        expect = np.mean([min(i + 1, window) / n for i in range(n)])
        assert_allclose(attention_band_mass(q, k, window), expect, atol=1e-12)

    def test_monotone_in_window(self):
        rng = np.random.default_rng(17)
        q = Tensor(rng.standard_normal((12, 3)))
        k = Tensor(rng.standard_normal((12, 3)))
        masses = [attention_band_mass(q, k, w) for w in range(1, 13)]
        assert all(a <= b + 1e-15 for a, b in zip(masses, masses[1:]))

    def test_last_row_with_full_window_has_unit_mass(self):
        rng = np.random.default_rng(18)
        n = 7
        q = Tensor(rng.standard_normal((n, 2)))
        k = Tensor(rng.standard_normal((n, 2)))
        rows = band_mass_per_row(q, k, n).data
        assert_allclose(rows[-1], 1.0, atol=1e-12)


class TestPermuteRows:
    def test_identity(self):
        x = Tensor([[1.0], [2.0]])
        assert_array_equal(permute_rows(x, [0, 1]).data, x.data)

    def test_reversal(self):
        x = Tensor([[1.0], [2.0]])
        assert_array_equal(permute_rows(x, [1, 0]).data, [[2.0], [1.0]])

    def test_composition_with_inverse_restores(self):
        rng = np.random.default_rng(19)
        x = Tensor(rng.standard_normal((6, 2)))
        pi = rng.permutation(6)
        inv = np.argsort(pi)
        assert_array_equal(permute_rows(permute_rows(x, inv), pi).data, x.data)

    def test_non_bijection_rejected(self):
        x = Tensor([[1.0], [2.0]])
        with pytest.raises(ValueError):
            permute_rows(x, [0, 0])
        with pytest.raises(ValueError):
            permute_rows(x, [0])
