import numpy as np
import pytest

from sparseft import block_sparse as bs
from sparseft.counters import MacCounter
from sparseft.patterns import build_pool
from sparseft.tensor_core import make_rng, randn, softmax_rows


def dense_coords(n_b):
    return tuple((i, j) for i in range(n_b) for j in range(n_b))


def random_layout(rng, n_b):
    """Random coords that always include the diagonal (softmax precondition)."""
    keep = {(i, i) for i in range(n_b)}
    for i in range(n_b):
        for j in range(n_b):
            if rng.random() < 0.4:
                keep.add((i, j))
    return tuple(sorted(keep))


class TestSdd:
    def test_dense_layout_equals_dense_matmul(self):
        rng = make_rng(0)
        q = randn(rng, (16, 8), 1.0)
        k = randn(rng, (16, 8), 1.0)
        out = bs.sdd(q, k, dense_coords(4), blk=4, scale=0.5)
        np.testing.assert_allclose(out.to_dense(), (q @ k.T) * 0.5, atol=1e-6)

    def test_single_block_hand_case(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
        k = np.array([[2.0, 3.0], [4.0, 5.0]], np.float32)
        out = bs.sdd(q, k, [(0, 0)], blk=2, scale=1.0)
        np.testing.assert_array_equal(out.blocks[0], [[2.0, 4.0], [3.0, 5.0]])

    def test_inactive_blocks_are_zero_in_dense_view(self):
        rng = make_rng(1)
        q = randn(rng, (8, 4), 1.0)
        k = randn(rng, (8, 4), 1.0)
        out = bs.sdd(q, k, [(0, 0), (1, 1)], blk=4, scale=1.0).to_dense()
        np.testing.assert_array_equal(out[:4, 4:], np.zeros((4, 4)))
        np.testing.assert_array_equal(out[4:, :4], np.zeros((4, 4)))

    def test_counter_counts_active_blocks_only(self):
        rng = make_rng(2)
        q = randn(rng, (16, 8), 1.0)
        k = randn(rng, (16, 8), 1.0)
        c = MacCounter()
        bs.sdd(q, k, [(0, 0), (2, 1), (3, 3)], blk=4, scale=1.0, counter=c)
        assert c.total == 3 * 4 * 4 * 8

    def test_bad_grid_rejected(self):
        with pytest.raises(bs.LayoutError):
            bs.sdd(np.zeros((10, 4)), np.zeros((10, 4)), [(0, 0)], blk=4, scale=1.0)
        with pytest.raises(bs.LayoutError):
            bs.sdd(np.zeros((8, 4)), np.zeros((8, 4)), [(2, 0)], blk=4, scale=1.0)


class TestSparseSoftmax:
    def test_dense_layout_matches_dense_softmax(self):
        rng = make_rng(3)
        scores = bs.sdd(randn(rng, (16, 8), 1.0), randn(rng, (16, 8), 1.0), dense_coords(4), 4, 1.0)
        sp = bs.sparse_softmax(scores).to_dense()
        np.testing.assert_allclose(sp, softmax_rows(scores.to_dense()), atol=1e-6)

    def test_rows_sum_to_one_over_active_entries(self):
        rng = make_rng(4)
        coords = random_layout(rng, 4)
        scores = bs.sdd(randn(rng, (16, 8), 1.0), randn(rng, (16, 8), 1.0), coords, 4, 1.0)
        dense = bs.sparse_softmax(scores).to_dense()
        np.testing.assert_allclose(dense.sum(axis=1), np.ones(16), atol=1e-6)

    def test_inactive_entries_zero_probability(self):
        rng = make_rng(5)
        coords = ((0, 0), (1, 0), (1, 1))
        scores = bs.sdd(randn(rng, (8, 4), 1.0), randn(rng, (8, 4), 1.0), coords, 4, 1.0)
        dense = bs.sparse_softmax(scores).to_dense()
        np.testing.assert_array_equal(dense[:4, 4:], np.zeros((4, 4)))

    def test_matches_masked_dense_oracle(self):
        rng = make_rng(6)
        for trial in range(20):
            coords = random_layout(rng, 4)
            q = randn(rng, (16, 8), 1.0)
            k = randn(rng, (16, 8), 1.0)
            sp = bs.sparse_softmax(bs.sdd(q, k, coords, 4, 0.25)).to_dense()
            mask = np.full((16, 16), -np.inf)
            for br, bc in coords:
                mask[br * 4 : br * 4 + 4, bc * 4 : bc * 4 + 4] = 0.0
            scores = (q.astype(np.float64) @ k.T.astype(np.float64)) * 0.25 + mask
            shifted = scores - scores.max(axis=1, keepdims=True)
            e = np.where(np.isfinite(scores), np.exp(shifted), 0.0)
            ref = e / e.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(sp, ref, atol=1e-6)

    def test_empty_block_row_rejected(self):
        m = bs.BlockSparseMatrix(n_b=2, blk=2, coords=((0, 0),), blocks=np.zeros((1, 2, 2), np.float32))
        with pytest.raises(bs.LayoutError):
            bs.sparse_softmax(m)

    def test_large_scores_stable(self):
        m = bs.BlockSparseMatrix(n_b=1, blk=2, coords=((0, 0),),
                                 blocks=np.array([[[500.0, 500.0], [500.0, -500.0]]], np.float32))
        out = bs.sparse_softmax(m).blocks[0]
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out[0], [0.5, 0.5])
        np.testing.assert_allclose(out[1], [1.0, 0.0], atol=1e-6)


class TestDsd:
    def test_dense_layout_equals_dense_matmul(self):
        rng = make_rng(7)
        p = bs.sparse_softmax(bs.sdd(randn(rng, (16, 8), 1.0), randn(rng, (16, 8), 1.0), dense_coords(4), 4, 1.0))
        v = randn(rng, (16, 8), 1.0)
        np.testing.assert_allclose(bs.dsd(p, v), p.to_dense() @ v, atol=1e-6)

    def test_sparse_layout_equals_dense_view_matmul(self):
        rng = make_rng(8)
        coords = random_layout(rng, 4)
        p = bs.sparse_softmax(bs.sdd(randn(rng, (16, 8), 1.0), randn(rng, (16, 8), 1.0), coords, 4, 1.0))
        v = randn(rng, (16, 8), 1.0)
        np.testing.assert_allclose(bs.dsd(p, v), p.to_dense() @ v, atol=1e-6)

    def test_counter(self):
        p = bs.BlockSparseMatrix(n_b=2, blk=4, coords=((0, 0), (1, 1)), blocks=np.zeros((2, 4, 4), np.float32))
        c = MacCounter()
        bs.dsd(p, np.zeros((8, 16), np.float32), counter=c)
        assert c.total == 2 * 4 * 4 * 16

    def test_shape_mismatch_rejected(self):
        p = bs.BlockSparseMatrix(n_b=2, blk=4, coords=((0, 0),), blocks=np.zeros((1, 4, 4), np.float32))
        with pytest.raises(bs.LayoutError):
            bs.dsd(p, np.zeros((10, 3), np.float32))


class TestEndToEndChain:
    def test_matches_dense_masked_attention_oracle(self):
        rng = make_rng(9)
        for trial in range(30):
            coords = random_layout(rng, 4)
            q = randn(rng, (16, 8), 1.0)
            k = randn(rng, (16, 8), 1.0)
            v = randn(rng, (16, 8), 1.0)
            scale = 1.0 / np.sqrt(8)
            out = bs.dsd(bs.sparse_softmax(bs.sdd(q, k, coords, 4, scale)), v)
            ref = bs.dense_masked_attention(q, k, v, coords, 4, scale)
            np.testing.assert_allclose(out, ref, atol=1e-5)

    def test_pool_patterns_all_run(self):
        rng = make_rng(10)
        pool = build_pool(4)
        q = randn(rng, (16, 8), 1.0)
        k = randn(rng, (16, 8), 1.0)
        v = randn(rng, (16, 8), 1.0)
        for pid, table in pool.items():
            out = bs.dsd(bs.sparse_softmax(bs.sdd(q, k, table.coords, 4, 0.35)), v)
            ref = bs.dense_masked_attention(q, k, v, table.coords, 4, 0.35)
            np.testing.assert_allclose(out, ref, atol=1e-5, err_msg=pid)


class TestBackward:
    def _fd(self, fn, x, dx, eps=1e-4):
        # directional finite difference in float64
        return (fn(x + eps * dx) - fn(x - eps * dx)) / (2 * eps)

    def test_sdd_backward_fd(self):
        rng = make_rng(11)
        coords = ((0, 0), (1, 0), (1, 1))
        q = rng.standard_normal((8, 4))
        k = rng.standard_normal((8, 4))
        d_blocks = rng.standard_normal((3, 4, 4))
        dq, dk = bs.sdd_backward(d_blocks, q, k, coords, 4, 0.5)
        for name, x, g in (("q", q, dq), ("k", k, dk)):
            direction = rng.standard_normal(x.shape)
            if name == "q":
                fn = lambda xx: float((bs.sdd(xx, k, coords, 4, 0.5).blocks * d_blocks).sum())
            else:
                fn = lambda xx: float((bs.sdd(q, xx, coords, 4, 0.5).blocks * d_blocks).sum())
            fd = self._fd(fn, x, direction)
            np.testing.assert_allclose(float((g * direction).sum()), fd, rtol=1e-6)

    def test_softmax_backward_fd(self):
        rng = make_rng(12)
        coords = ((0, 0), (1, 0), (1, 1))
        blocks = rng.standard_normal((3, 4, 4))
        dp = rng.standard_normal((3, 4, 4))

        def loss(b):
            m = bs.BlockSparseMatrix(2, 4, coords, b)
            return float((bs.sparse_softmax(m).blocks * dp).sum())

        p = bs.sparse_softmax(bs.BlockSparseMatrix(2, 4, coords, blocks))
        ds = bs.sparse_softmax_backward(p, dp)
        direction = rng.standard_normal(blocks.shape)
        fd = self._fd(loss, blocks, direction)
        np.testing.assert_allclose(float((ds * direction).sum()), fd, rtol=1e-5, atol=1e-9)

    def test_dsd_backward_fd(self):
        rng = make_rng(13)
        coords = ((0, 0), (1, 0), (1, 1))
        blocks = np.abs(rng.standard_normal((3, 4, 4)))
        v = rng.standard_normal((8, 6))
        d_out = rng.standard_normal((8, 6))
        p = bs.BlockSparseMatrix(2, 4, coords, blocks)
        d_blocks, dv = bs.dsd_backward(p, v, d_out)
        dirb = rng.standard_normal(blocks.shape)
        fd = self._fd(lambda b: float((bs.dsd(bs.BlockSparseMatrix(2, 4, coords, b), v) * d_out).sum()), blocks, dirb)
        np.testing.assert_allclose(float((d_blocks * dirb).sum()), fd, rtol=1e-6)
        dirv = rng.standard_normal(v.shape)
        fd = self._fd(lambda vv: float((bs.dsd(p, vv) * d_out).sum()), v, dirv)
        np.testing.assert_allclose(float((dv * dirv).sum()), fd, rtol=1e-6)

    def test_inactive_blocks_get_no_gradient(self):
        # gradients w.r.t. q rows never touched by any active block stay zero
        rng = make_rng(14)
        coords = ((0, 0), (1, 1))
        q = rng.standard_normal((8, 4))
        k = rng.standard_normal((8, 4))
        d_blocks = rng.standard_normal((2, 4, 4))
        d_blocks[1] = 0.0  # kill upstream for block (1,1)
        dq, dk = bs.sdd_backward(d_blocks, q, k, coords, 4, 1.0)
        np.testing.assert_array_equal(dq[4:], np.zeros((4, 4)))
        np.testing.assert_array_equal(dk[4:], np.zeros((4, 4)))
