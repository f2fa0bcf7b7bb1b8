import numpy as np
import pytest

from sparseft import exposer as E
from sparseft import model as M
from sparseft.patterns import build_pool
from sparseft.tensor_core import make_rng, softmax_rows


def small_dims():
    return M.ModelDims(d_model=32, n_heads=2, d_ff=64, seq_len=32, n_layers=2, vocab=17, blk_size=16, attn_blk=16)


class TestShadowyCombine:
    def test_or_semantics(self):
        out = E.shadowy_combine([np.array([1, 0, 0, 1], bool), np.array([0, 0, 1, 1], bool)])
        np.testing.assert_array_equal(out, [True, False, True, True])

    def test_single_vector_identity(self):
        v = np.array([True, False, True])
        np.testing.assert_array_equal(E.shadowy_combine([v]), v)

    def test_unit_skipped_only_if_all_tokens_skip(self):
        rng = make_rng(0)
        vecs = [rng.random(16) < 0.3 for _ in range(8)]
        out = E.shadowy_combine(vecs)
        stacked = np.stack(vecs)
        np.testing.assert_array_equal(out, stacked.any(axis=0))
        np.testing.assert_array_equal(~out, (~stacked).all(axis=0))

    def test_sparsity_never_increases_with_more_tokens(self):
        rng = make_rng(1)
        vecs = [rng.random(64) < 0.2 for _ in range(10)]
        ratios = [E.sparsity_ratio(E.shadowy_combine(vecs[: k + 1])) for k in range(10)]
        assert all(a >= b for a, b in zip(ratios, ratios[1:]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            E.shadowy_combine([np.zeros(3, bool), np.zeros(4, bool)])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            E.shadowy_combine([])


class TestSparsityRatio:
    def test_values(self):
        assert E.sparsity_ratio(np.array([True, False, False, False])) == 0.75
        assert E.sparsity_ratio(np.ones(5, bool)) == 0.0
        assert E.sparsity_ratio(np.zeros(5, bool)) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            E.sparsity_ratio(np.zeros(0, bool))


class TestExactAttention:
    def test_matches_manual_dense(self):
        dims = small_dims()
        model = M.build_model(dims, seed=2)
        rng = make_rng(3)
        x = rng.standard_normal((dims.seq_len, dims.d_model)).astype(np.float32)
        lw = model.weights.layers[0]
        probs, raws = E.exact_attention(x, lw, dims)
        assert len(probs) == dims.n_heads
        q = x @ lw.wq + lw.bq
        k = x @ lw.wk + lw.bk
        hd = dims.head_dim
        for h in range(dims.n_heads):
            sl = slice(h * hd, (h + 1) * hd)
            raw = (q[:, sl] @ k[:, sl].T) / np.sqrt(hd)
            np.testing.assert_allclose(raws[h], raw, atol=1e-6)
            np.testing.assert_allclose(probs[h], softmax_rows(raw), atol=1e-6)
            np.testing.assert_allclose(probs[h].sum(axis=1), np.ones(dims.seq_len), atol=1e-6)


class TestBlockMass:
    def test_uniform_matrix(self):
        out = E.block_mass(np.ones((8, 8)), 2)
        np.testing.assert_array_equal(out, np.full((2, 2), 16.0))

    def test_concentrated_mass(self):
        m = np.zeros((8, 8))
        m[0, 0] = 5.0
        m[5, 6] = 3.0
        out = E.block_mass(m, 2)
        np.testing.assert_array_equal(out, [[5.0, 0.0], [0.0, 3.0]])

    def test_total_preserved(self):
        rng = make_rng(4)
        m = np.abs(rng.standard_normal((16, 16)))
        assert E.block_mass(m, 4).sum() == pytest.approx(m.sum(), rel=1e-9)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            E.block_mass(np.ones((9, 9)), 2)


class TestPatternSelection:
    def test_diagonal_mass_picks_blockdiag(self):
        pool = build_pool(4)
        grid = np.eye(4) * 10.0 + 0.01
        assert E.select_pattern_by_coverage(grid, pool, 0.95) == "blockdiag"

    def test_uniform_mass_needs_dense(self):
        pool = build_pool(4)
        grid = np.ones((4, 4))
        assert E.select_pattern_by_coverage(grid, pool, 0.99) == "dense"

    def test_band_structure_picks_band(self):
        pool = build_pool(4)
        grid = np.array([[abs(i - j) <= 1 for j in range(4)] for i in range(4)], float)
        assert E.select_pattern_by_coverage(grid, pool, 0.99) == "band1"

    def test_coverage_threshold_monotone(self):
        # lower tau admits sparser patterns
        pool = build_pool(4)
        grid = np.eye(4) * 10.0 + 1.0  # diagonal holds 40/56 of the mass
        assert E.select_pattern_by_coverage(grid, pool, 0.5) == "blockdiag"
        assert E.select_pattern_by_coverage(grid, pool, 0.99) == "dense"

    def test_tau_one_accepts_dense(self):
        pool = build_pool(4)
        rng = make_rng(5)
        grid = np.abs(rng.standard_normal((4, 4)))
        assert E.select_pattern_by_coverage(grid, pool, 1.0) == "dense"

    def test_zero_mass_falls_back_dense(self):
        assert E.select_pattern_by_coverage(np.zeros((4, 4)), build_pool(4), 0.95) == "dense"

    def test_bad_tau_rejected(self):
        with pytest.raises(ValueError):
            E.select_pattern_by_coverage(np.ones((4, 4)), build_pool(4), 0.0)


class TestNeuronFilter:
    def test_importance_is_max_over_tokens(self):
        z = np.array([[1.0, -5.0, 0.5, -1.0], [-2.0, -1.0, 3.0, -0.5]])
        imp = E.block_importance(z, blk_size=2)
        np.testing.assert_array_equal(imp, [1.0, 3.0])

    def test_negative_only_block_zero_importance(self):
        z = np.array([[-1.0, -2.0, 4.0, 1.0]])
        np.testing.assert_array_equal(E.block_importance(z, 2), [0.0, 4.0])

    def test_theta_zero_keeps_every_positive_block(self):
        imp = np.array([0.0, 1e-6, 2.0, 0.5])
        np.testing.assert_array_equal(E.filter_neuron_blocks(imp, 0.0), [False, True, True, True])

    def test_theta_filters_relative_to_peak(self):
        imp = np.array([0.05, 1.0, 0.4, 0.11])
        np.testing.assert_array_equal(E.filter_neuron_blocks(imp, 0.1), [False, True, True, True])
        np.testing.assert_array_equal(E.filter_neuron_blocks(imp, 0.5), [False, True, False, False])

    def test_all_zero_importance_all_inactive(self):
        np.testing.assert_array_equal(E.filter_neuron_blocks(np.zeros(4), 0.1), [False] * 4)

    def test_sparsity_monotone_in_theta(self):
        rng = make_rng(6)
        imp = np.abs(rng.standard_normal(64))
        ratios = [E.sparsity_ratio(E.filter_neuron_blocks(imp, t)) for t in (0.0, 0.1, 0.3, 0.6, 0.9)]
        assert all(a <= b for a, b in zip(ratios, ratios[1:]))

    def test_bad_theta_rejected(self):
        with pytest.raises(ValueError):
            E.filter_neuron_blocks(np.ones(4), 1.5)


class TestUnionMask:
    def test_union_covers_every_head(self):
        dims = small_dims()
        model = M.build_model(dims, seed=7)
        rng = make_rng(8)
        x = rng.standard_normal((dims.seq_len, dims.d_model)).astype(np.float32)
        probs, _ = E.exact_attention(x, model.weights.layers[0], dims)
        assignment, union = E.head_masks_and_union(probs, model.pool, 0.95)
        assert len(assignment) == dims.n_heads
        for pid in assignment:
            for br, bc in model.pool[pid].coords:
                assert union[br, bc]

    def test_union_at_least_as_dense_as_each_head(self):
        pool = build_pool(4)
        probs = [np.eye(16) + 1e-3, np.ones((16, 16)) / 16]
        assignment, union = E.head_masks_and_union(probs, pool, 0.95)
        assert assignment[1] == "dense"
        assert union.all()  # dense head forces the union dense


class TestReport:
    def test_report_rows_and_csv(self):
        dims = small_dims()
        model = M.build_model(dims, seed=9)
        toks = make_rng(10).integers(0, dims.vocab, size=dims.seq_len)
        rows = E.layer_sparsity_report(model, toks, thetas=(0.0, 0.1), tau=0.95)
        # per layer: attention shadowy + head_specific, mlp shadowy, 2 thetas
        assert len(rows) == dims.n_layers * 5
        for r in rows:
            assert 0.0 <= r["sparsity_ratio"] <= 1.0
        csv = E.report_to_csv(rows)
        lines = csv.strip().split("\n")
        assert lines[0] == "layer,component,method,theta,sparsity_ratio"
        assert len(lines) == len(rows) + 1
        assert lines[1].count(",") == 4

    def test_head_specific_at_least_as_sparse_as_shadowy(self):
        # the per-head assignment never uses more blocks than H copies of the union
        dims = small_dims()
        model = M.build_model(dims, seed=11)
        toks = make_rng(12).integers(0, dims.vocab, size=dims.seq_len)
        rows = E.layer_sparsity_report(model, toks, thetas=(), tau=0.95)
        by = {}
        for r in rows:
            if r["component"] == "attention":
                by.setdefault(r["layer"], {})[r["method"]] = r["sparsity_ratio"]
        for layer, d in by.items():
            assert d["head_specific"] >= d["shadowy"] - 1e-12
