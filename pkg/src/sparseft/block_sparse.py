"""Dynamic block-sparse attention operators: SDD, sparse softmax, DSD.

Values live in contiguous per-block storage ordered exactly as the layout
coordinate list, so no data-format conversion happens at runtime. Each
value block is attn_blk x attn_blk. Inactive blocks are never computed;
the sparse softmax treats them as -inf (zero probability, zero gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Coord = tuple[int, int]


class LayoutError(ValueError):
    """Layout inconsistent with operand shapes or softmax preconditions."""


@dataclass
class BlockSparseMatrix:
    """Block-sparse s x s matrix over an n_b x n_b grid."""

    n_b: int
    blk: int
    coords: tuple[Coord, ...]
    blocks: np.ndarray  # (len(coords), blk, blk), layout order

    def to_dense(self) -> np.ndarray:
        s = self.n_b * self.blk
        out = np.zeros((s, s), dtype=self.blocks.dtype)
        for idx, (br, bc) in enumerate(self.coords):
            out[br * self.blk : (br + 1) * self.blk, bc * self.blk : (bc + 1) * self.blk] = self.blocks[idx]
        return out


def _check_grid(s: int, blk: int, coords, n_b: int) -> None:
    if s != n_b * blk:
        raise LayoutError(f"sequence length {s} != n_b*blk = {n_b}*{blk}")
    for br, bc in coords:
        if not (0 <= br < n_b and 0 <= bc < n_b):
            raise LayoutError(f"block ({br},{bc}) outside {n_b}x{n_b} grid")


def sdd(q: np.ndarray, k: np.ndarray, coords, blk: int, scale: float, counter=None) -> BlockSparseMatrix:
    """Sparse = Dense x Dense: scaled q @ k.T restricted to active blocks."""
    s, head_dim = q.shape
    n_b = s // blk
    coords = tuple(coords)
    _check_grid(s, blk, coords, n_b)
    blocks = np.empty((len(coords), blk, blk), dtype=np.result_type(q, k))
    for idx, (br, bc) in enumerate(coords):
        qb = q[br * blk : (br + 1) * blk]
        kb = k[bc * blk : (bc + 1) * blk]
        blocks[idx] = (qb @ kb.T) * scale
    if counter is not None:
        counter.add(len(coords) * blk * blk * head_dim)
    return BlockSparseMatrix(n_b=n_b, blk=blk, coords=coords, blocks=blocks)


def sdd_backward(d_blocks: np.ndarray, q: np.ndarray, k: np.ndarray, coords, blk: int, scale: float):
    """Gradients of sdd w.r.t. q and k given per-block upstream gradients."""
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    for idx, (br, bc) in enumerate(coords):
        g = d_blocks[idx] * scale
        dq[br * blk : (br + 1) * blk] += g @ k[bc * blk : (bc + 1) * blk]
        dk[bc * blk : (bc + 1) * blk] += g.T @ q[br * blk : (br + 1) * blk]
    return dq, dk


def _row_segments(m: BlockSparseMatrix):
    """Block indices grouped by block-row, in layout order."""
    rows: list[list[int]] = [[] for _ in range(m.n_b)]
    for idx, (br, _) in enumerate(m.coords):
        rows[br].append(idx)
    return rows

def sparse_softmax(m: BlockSparseMatrix) -> BlockSparseMatrix:
    """Per-token-row softmax over the union of active-block entries.

    Entries in inactive blocks are treated as -inf and get zero probability.
    Every token row must be covered by at least one active block; the
    pattern pool guarantees this by always including the diagonal.
    """
    rows = _row_segments(m)
    out = np.empty_like(m.blocks)
    for br, idxs in enumerate(rows):
        if not idxs:
            raise LayoutError(f"block-row {br} has no active blocks (pattern pool violation)")
        seg = np.concatenate([m.blocks[i] for i in idxs], axis=1)  # (blk, blk*len)
        shifted = seg - seg.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        for j, i in enumerate(idxs):
            out[i] = p[:, j * m.blk : (j + 1) * m.blk]
    return BlockSparseMatrix(n_b=m.n_b, blk=m.blk, coords=m.coords, blocks=out)


def sparse_softmax_backward(p: BlockSparseMatrix, d_blocks: np.ndarray) -> np.ndarray:
    """ds = p * (dp - sum(dp * p)) per token row over active entries."""
    rows = _row_segments(p)
    out = np.empty_like(d_blocks)
    for idxs in rows:
        pseg = np.concatenate([p.blocks[i] for i in idxs], axis=1)
        dseg = np.concatenate([d_blocks[i] for i in idxs], axis=1)
        inner = (dseg * pseg).sum(axis=1, keepdims=True)
        ds = pseg * (dseg - inner)
        for j, i in enumerate(idxs):
            out[i] = ds[:, j * p.blk : (j + 1) * p.blk]
    return out


def dsd(p: BlockSparseMatrix, v: np.ndarray, counter=None) -> np.ndarray:
    """Dense = Sparse x Dense: probability blocks times value rows."""
    s, head_dim = v.shape
    if s != p.n_b * p.blk:
        raise LayoutError(f"value rows {s} != grid {p.n_b}*{p.blk}")
    out = np.zeros((s, head_dim), dtype=np.result_type(p.blocks, v))
    for idx, (br, bc) in enumerate(p.coords):
        out[br * p.blk : (br + 1) * p.blk] += p.blocks[idx] @ v[bc * p.blk : (bc + 1) * p.blk]
    if counter is not None:
        counter.add(len(p.coords) * p.blk * p.blk * head_dim)
    return out


def dsd_backward(p: BlockSparseMatrix, v: np.ndarray, d_out: np.ndarray):
    """Gradients of dsd: per-block dP and dense dV."""
    d_blocks = np.empty_like(p.blocks)
    dv = np.zeros_like(v)
    for idx, (br, bc) in enumerate(p.coords):
        g = d_out[br * p.blk : (br + 1) * p.blk]
        d_blocks[idx] = g @ v[bc * p.blk : (bc + 1) * p.blk].T
        dv[bc * p.blk : (bc + 1) * p.blk] += p.blocks[idx].T @ g
    return d_blocks, dv


def dense_masked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, coords, blk: int, scale: float) -> np.ndarray:
    """Oracle: dense attention with an explicit -inf mask from the layout."""
    s = q.shape[0]
    mask = np.full((s, s), -np.inf, dtype=np.float64)
    for br, bc in coords:
        mask[br * blk : (br + 1) * blk, bc * blk : (bc + 1) * blk] = 0.0
    scores = (q.astype(np.float64) @ k.astype(np.float64).T) * scale + mask
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.where(np.isfinite(scores), np.exp(shifted), 0.0)
    probs = e / e.sum(axis=1, keepdims=True)
    return (probs @ v.astype(np.float64)).astype(np.result_type(q, v))
