"""Neuron-centric MLP matmuls with coalescing-friendly weight layouts.

MLP activation sparsity is block-wise over hidden units: an inactive
neuron block inactivates the matching column block of the first linear
weight and the matching row block of the second. The first weight is
stored column-major so a neuron's column is contiguous; the second is
stored row-major so a neuron's row is contiguous. Only active blocks are
gathered and multiplied; inactive blocks are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MaskError(ValueError):
    """Neuron-block mask inconsistent with weight shapes."""


def block_slices(d_ff: int, blk_size: int) -> list[slice]:
    """Hidden-unit slices per neuron block; the final block may be partial."""
    return [slice(lo, min(lo + blk_size, d_ff)) for lo in range(0, d_ff, blk_size)]


def n_blocks(d_ff: int, blk_size: int) -> int:
    return (d_ff + blk_size - 1) // blk_size


@dataclass
class LayeredWeights:
    """W1 (d x d_ff) column-major, W2 (d_ff x d) row-major, with layout tags."""

    w1: np.ndarray
    w2: np.ndarray
    layout_w1: str = "col"
    layout_w2: str = "row"

    @classmethod
    def from_row_major(cls, w1: np.ndarray, w2: np.ndarray) -> "LayeredWeights":
        return cls(w1=np.asfortranarray(w1), w2=np.ascontiguousarray(w2))

    def to_row_major(self) -> tuple[np.ndarray, np.ndarray]:
        return np.ascontiguousarray(self.w1), np.ascontiguousarray(self.w2)


@dataclass
class ActiveHidden:
    """Packed active hidden columns plus which neuron blocks they cover."""

    values: np.ndarray  # (s, active_width)
    active_blocks: tuple[int, ...]
    col_index: np.ndarray  # hidden-unit indices backing each packed column
    blk_size: int
    d_ff: int


def _check_mask(mask, d_ff: int, blk_size: int):
    mask = np.asarray(mask, dtype=bool)
    nb = n_blocks(d_ff, blk_size)
    if mask.shape != (nb,):
        raise MaskError(f"mask length {mask.shape} != n_blk ({nb},)")
    return mask


def active_columns(mask, d_ff: int, blk_size: int) -> tuple[tuple[int, ...], np.ndarray]:
    mask = _check_mask(mask, d_ff, blk_size)
    slices = block_slices(d_ff, blk_size)
    active = tuple(int(b) for b in np.flatnonzero(mask))
    cols = np.concatenate([np.arange(slices[b].start, slices[b].stop) for b in active]) if active else np.empty(0, dtype=int)
    return active, cols


def neuron_matmul_fwd1(x: np.ndarray, weights: LayeredWeights, mask, blk_size: int, counter=None) -> ActiveHidden:
    """x @ W1 restricted to active column blocks."""
    d, d_ff = weights.w1.shape
    active, cols = active_columns(mask, d_ff, blk_size)
    values = x @ weights.w1[:, cols] if cols.size else np.zeros((x.shape[0], 0), dtype=x.dtype)
    if counter is not None:
        counter.add(x.shape[0] * d * cols.size)
    return ActiveHidden(values=values, active_blocks=active, col_index=cols, blk_size=blk_size, d_ff=d_ff)


def neuron_matmul_fwd2(hidden: ActiveHidden, weights: LayeredWeights, mask, counter=None) -> np.ndarray:
    """Sum over active blocks of packed hidden columns times active W2 rows."""
    d_ff, d = weights.w2.shape
    active, cols = active_columns(mask, d_ff, hidden.blk_size)
    if active != hidden.active_blocks or not np.array_equal(cols, hidden.col_index):
        raise MaskError("mask does not match the mask the hidden activations were computed with")
    if cols.size == 0:
        return np.zeros((hidden.values.shape[0], d), dtype=hidden.values.dtype)
    if counter is not None:
        counter.add(hidden.values.shape[0] * cols.size * d)
    return hidden.values @ weights.w2[cols, :]
