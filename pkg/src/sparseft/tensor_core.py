"""Dense numeric core: float32 tensors, matmul kernels, softmax, seeded init.

All tensors are plain numpy ndarrays. The main path runs in float32; the
functions here are dtype-preserving so gradient-check utilities can rerun
the identical code in float64.
"""

from __future__ import annotations

import numpy as np

DEFAULT_TILE = 32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed yields an identical stream."""
    return np.random.Generator(np.random.PCG64(seed))


def randn(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    """Deterministic Gaussian init with standard deviation `scale` (> 0)."""
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def _check_matmul(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shape-checked dense matmul (BLAS-backed, internally cache-blocked)."""
    _check_matmul(a, b)
    return a @ b


def matmul_tiled(a: np.ndarray, b: np.ndarray, tile: int = DEFAULT_TILE) -> np.ndarray:
    """Explicit cache-blocked tiling kernel.

    Correctness is layout-independent; tested against the naive triple loop.
    This is the same tiling scheme the block-sparse operators iterate over,
    so dense benchmark baselines share the kernel structure.
    """
    _check_matmul(a, b)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i0 in range(0, m, tile):
        i1 = min(i0 + tile, m)
        for p0 in range(0, k, tile):
            p1 = min(p0 + tile, k)
            a_blk = a[i0:i1, p0:p1]
            for j0 in range(0, n, tile):
                j1 = min(j0 + tile, n)
                out[i0:i1, j0:j1] += a_blk @ b[p0:p1, j0:j1]
    return out


def matmul_naive(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference triple loop. Oracle only; quadratic-time slow."""
    _check_matmul(a, b)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = out.dtype.type(0)
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 tensor, got shape {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def transpose(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a rank-2 tensor, got shape {x.shape}")
    return x.T
