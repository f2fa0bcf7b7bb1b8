"""Operator microbenchmarks: sparse kernels against same-kernel dense
baselines, so measured speedups reflect sparsity rather than kernel
quality differences. Monotonic clock, median of >= 5 runs after 2
warmups."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import block_sparse, neuron_ops
from .neuron_ops import LayeredWeights
from .tensor_core import make_rng

OPS = ("neuron_mlp", "sdd", "dsd")


@dataclass
class TimingRecord:
    op: str
    size: int
    sparsity: float
    active_blocks: int
    median_ns: int
    dense_median_ns: int

    @property
    def speedup(self) -> float:
        return self.dense_median_ns / self.median_ns


def _median_ns(fn, repetitions: int, warmups: int = 2) -> int:
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(np.median(samples))


def _spread_mask(n_blk: int, sparsity: float) -> np.ndarray:
    """Evenly spread active blocks at the requested sparsity, >= 1 active."""
    n_active = max(1, round((1.0 - sparsity) * n_blk))
    idx = np.unique((np.arange(n_active) * n_blk) // n_active)
    mask = np.zeros(n_blk, dtype=bool)
    mask[idx] = True
    return mask


def _attn_layout(n_b: int, sparsity: float, rng) -> list[tuple[int, int]]:
    """Random layout at the requested block sparsity, diagonal always kept."""
    coords = {(i, i) for i in range(n_b)}
    want = max(n_b, round((1.0 - sparsity) * n_b * n_b))
    off_diag = [(i, j) for i in range(n_b) for j in range(n_b) if i != j]
    rng.shuffle(off_diag)
    for c in off_diag[: max(0, want - n_b)]:
        coords.add(c)
    return sorted(coords)


def bench(
    op: str,
    sizes: list[int],
    sparsity_grid: list[float],
    repetitions: int = 5,
    s: int = 256,
    d: int = 256,
    head_dim: int = 64,
    attn_blk: int = 16,
    blk_size: int = 16,
    seed: int = 0,
) -> list[TimingRecord]:
    """Time one sparse op across sizes and sparsity ratios.

    For neuron_mlp, `sizes` are hidden widths (d_ff); for sdd/dsd they are
    sequence lengths. The dense baseline is the identical kernel with a
    full mask/layout.
    """
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}; choose from {OPS}")
    if repetitions < 5:
        raise ValueError("repetitions must be >= 5")
    rng = make_rng(seed)
    records = []
    for size in sizes:
        if op == "neuron_mlp":
            d_ff = size
            n_blk = neuron_ops.n_blocks(d_ff, blk_size)
            x = rng.standard_normal((s, d)).astype(np.float32)
            lw = LayeredWeights.from_row_major(
                rng.standard_normal((d, d_ff)).astype(np.float32),
                rng.standard_normal((d_ff, d)).astype(np.float32),
            )
            full = np.ones(n_blk, dtype=bool)

            def run(mask):
                hidden = neuron_ops.neuron_matmul_fwd1(x, lw, mask, blk_size)
                hidden.values = np.maximum(hidden.values, 0)
                return neuron_ops.neuron_matmul_fwd2(hidden, lw, mask)

            dense_ns = _median_ns(lambda: run(full), repetitions)
            for sp in sparsity_grid:
                mask = _spread_mask(n_blk, sp)
                ns = _median_ns(lambda: run(mask), repetitions)
                records.append(TimingRecord(op, size, float(sp), int(mask.sum()), ns, dense_ns))
        else:
            seq = size
            n_b = seq // attn_blk
            q = rng.standard_normal((seq, head_dim)).astype(np.float32)
            k = rng.standard_normal((seq, head_dim)).astype(np.float32)
            v = rng.standard_normal((seq, head_dim)).astype(np.float32)
            scale = 1.0 / np.sqrt(head_dim)
            full_coords = [(i, j) for i in range(n_b) for j in range(n_b)]

            def run(coords):
                scores = block_sparse.sdd(q, k, coords, attn_blk, scale)
                if op == "sdd":
                    return scores
                probs = block_sparse.sparse_softmax(scores)
                return block_sparse.dsd(probs, v)

            dense_ns = _median_ns(lambda: run(full_coords), repetitions)
            for sp in sparsity_grid:
                coords = _attn_layout(n_b, sp, rng)
                ns = _median_ns(lambda: run(coords), repetitions)
                records.append(TimingRecord(op, size, float(sp), len(coords), ns, dense_ns))
    return records


def records_to_csv(records: list[TimingRecord]) -> str:
    lines = ["op,size,sparsity,active_blocks,median_ns,dense_median_ns,speedup"]
    for r in records:
        lines.append(
            f"{r.op},{r.size},{r.sparsity:.6f},{r.active_blocks},{r.median_ns},{r.dense_median_ns},{r.speedup:.9g}"
        )
    return "\n".join(lines) + "\n"


def linear_fit_r2(records: list[TimingRecord]) -> float:
    """R^2 of median time vs. active-block fraction for one op/size group."""
    xs = np.array([r.active_blocks for r in records], dtype=np.float64)
    ys = np.array([r.median_ns for r in records], dtype=np.float64)
    a, b = np.polyfit(xs, ys, 1)
    resid = ys - (a * xs + b)
    ss_tot = ((ys - ys.mean()) ** 2).sum()
    return float(1.0 - (resid**2).sum() / ss_tot) if ss_tot > 0 else 1.0
