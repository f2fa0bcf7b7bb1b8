"""Ground-truth sparsity extraction.

Computes exact attention scores and MLP activations densely, quantifies
the sequence-level ("shadowy") sparsity left after combining per-token
patterns, selects a per-head atomic pattern covering enough attention
mass, and filters neuron blocks by a peak-relative importance threshold.
"""

from __future__ import annotations

import numpy as np

from . import model as M
from .neuron_ops import block_slices
from .patterns import LayoutTable
from .tensor_core import relu, softmax_rows


def shadowy_combine(per_token_active: list[np.ndarray]) -> np.ndarray:
    """Sequence-level active set: a unit is skippable only if every token
    skips it, i.e. active = elementwise OR of per-token active vectors."""
    if not per_token_active:
        raise ValueError("need at least one per-token activity vector")
    out = np.asarray(per_token_active[0], dtype=bool).copy()
    for vec in per_token_active[1:]:
        vec = np.asarray(vec, dtype=bool)
        if vec.shape != out.shape:
            raise ValueError("activity vectors differ in length")
        out |= vec
    return out


def sparsity_ratio(mask) -> float:
    """Fraction of inactive units in a boolean mask (vector or grid)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        raise ValueError("empty mask")
    return float(1.0 - mask.sum() / mask.size)


def exact_attention_scores(x: np.ndarray, lw: M.LayerWeights, dims: M.ModelDims) -> list[np.ndarray]:
    """Dense per-head softmax(Q K^T / sqrt(head_dim)) probabilities."""
    probs, _ = exact_attention(x, lw, dims)
    return probs


def exact_attention(x: np.ndarray, lw: M.LayerWeights, dims: M.ModelDims):
    """Per-head (probabilities, raw scaled scores), both dense."""
    q = x @ lw.wq + lw.bq
    k = x @ lw.wk + lw.bk
    hd = dims.head_dim
    scale = 1.0 / np.sqrt(hd)
    probs, raws = [], []
    for h in range(dims.n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        raw = (q[:, sl] @ k[:, sl].T) * scale
        raws.append(raw)
        probs.append(softmax_rows(raw))
    return probs, raws


def block_mass(weight: np.ndarray, n_b: int) -> np.ndarray:
    """Sum an s x s (or m x m) nonnegative matrix into an n_b x n_b block grid."""
    s = weight.shape[0]
    blk = s // n_b
    if blk * n_b != s:
        raise ValueError(f"matrix side {s} not divisible by grid side {n_b}")
    return weight.reshape(n_b, blk, n_b, blk).sum(axis=(1, 3))


def select_pattern_by_coverage(grid_weight: np.ndarray, pool: dict[str, LayoutTable], tau: float) -> str:
    """Fewest-active-blocks pattern whose blocks carry >= tau of the total
    weight; ties broken by fixed pool order. Falls back to dense."""
    if not (0 < tau <= 1):
        raise ValueError(f"coverage tau must be in (0, 1], got {tau}")
    total = grid_weight.sum()
    if total <= 0:
        return "dense"
    best = None
    for pid, table in pool.items():  # insertion order is the tiebreak
        mass = sum(grid_weight[br, bc] for br, bc in table.coords)
        # tiny slack so a full pattern is never rejected at tau = 1 by summation roundoff
        if mass / total >= tau - 1e-9 and (best is None or table.active_blocks < pool[best].active_blocks):
            best = pid
    return best if best is not None else "dense"


def select_head_pattern(scores_h: np.ndarray, pool: dict[str, LayoutTable], tau: float = 0.95) -> str:
    """Pattern for one head from its dense attention probabilities."""
    n_b = next(iter(pool.values())).n_b
    return select_pattern_by_coverage(block_mass(scores_h, n_b), pool, tau)


def block_importance(z: np.ndarray, blk_size: int) -> np.ndarray:
    """Per-block importance: max |ReLU(z)| over all tokens and neurons in
    the block. Max never under-reports a strongly active neuron."""
    act = np.abs(relu(z))
    return np.array([act[:, sl].max() if act[:, sl].size else 0.0 for sl in block_slices(z.shape[1], blk_size)])


def filter_neuron_blocks(importance: np.ndarray, theta: float) -> np.ndarray:
    """Block b active iff importance[b] > theta * peak; all-zero importance
    yields an all-inactive mask. Strict > keeps every positive block at
    theta = 0."""
    if not (0 <= theta <= 1):
        raise ValueError(f"theta must be in [0, 1], got {theta}")
    importance = np.asarray(importance, dtype=np.float64)
    peak = importance.max() if importance.size else 0.0
    if peak <= 0:
        return np.zeros(importance.shape, dtype=bool)
    return importance > theta * peak


def head_masks_and_union(probs: list[np.ndarray], pool: dict[str, LayoutTable], tau: float):
    """Per-head chosen patterns plus the uniform union ("shadowy") mask
    that covers all heads at once."""
    assignment = [select_head_pattern(p, pool, tau) for p in probs]
    n_b = next(iter(pool.values())).n_b
    union = np.zeros((n_b, n_b), dtype=bool)
    for pid in assignment:
        for br, bc in pool[pid].coords:
            union[br, bc] = True
    return assignment, union


def layer_activations(model: M.Model, tokens: np.ndarray):
    """Dense forward collecting per-layer attention inputs/probabilities
    and MLP inputs/pre-activations (all exact, no sparsity applied)."""
    masks = M.dense_masks(model.dims)
    _, cache = M.model_forward(model, tokens, masks)
    records = []
    for layer in range(model.dims.n_layers):
        bc = cache["blocks"][layer]
        x_attn = bc["attn"]["x"]
        lw = model.weights.layers[layer]
        probs, raw = exact_attention(x_attn, lw, model.dims)
        x_mlp = bc["mlp"]["x"]
        z = bc["mlp"]["z"]  # full mask: packed columns cover all of d_ff
        records.append({"x_attn": x_attn, "probs": probs, "raw_scores": raw, "x_mlp": x_mlp, "z": z})
    return records


def layer_sparsity_report(model: M.Model, tokens: np.ndarray, thetas, tau: float = 0.95) -> list[dict]:
    """CSV-ready per-layer sparsity rows for shadowy, head-specific, and a
    theta grid of neuron filters."""
    rows = []
    records = layer_activations(model, tokens)
    for layer, rec in enumerate(records):
        assignment, union = head_masks_and_union(rec["probs"], model.pool, tau)
        head_active = sum(model.pool[pid].active_blocks for pid in assignment)
        rows.append({"layer": layer, "component": "attention", "method": "shadowy", "theta": 0.0,
                     "sparsity_ratio": sparsity_ratio(np.tile(union, (model.dims.n_heads, 1)))})
        rows.append({"layer": layer, "component": "attention", "method": "head_specific", "theta": 0.0,
                     "sparsity_ratio": 1.0 - head_active / (model.dims.n_heads * model.dims.n_b**2)})
        per_token_active = [rec["z"][t] > 0 for t in range(rec["z"].shape[0])]
        seq_active = shadowy_combine(per_token_active)
        rows.append({"layer": layer, "component": "mlp", "method": "shadowy", "theta": 0.0,
                     "sparsity_ratio": sparsity_ratio(seq_active)})
        imp = block_importance(rec["z"], model.dims.blk_size)
        for theta in thetas:
            mask = filter_neuron_blocks(imp, theta)
            rows.append({"layer": layer, "component": "mlp", "method": "neuron_filter", "theta": float(theta),
                         "sparsity_ratio": sparsity_ratio(mask)})
    return rows


def report_to_csv(rows: list[dict]) -> str:
    lines = ["layer,component,method,theta,sparsity_ratio"]
    for r in rows:
        lines.append(f"{r['layer']},{r['component']},{r['method']},{r['theta']:.6f},{r['sparsity_ratio']:.6f}")
    return "\n".join(lines) + "\n"
