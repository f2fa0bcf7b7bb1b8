"""Sequence-oriented runtime sparsity predictors.

Low-rank approximators run before the real computation: per head, a pair
of d x r factors estimates the attention score map on a sqrt(s)-
downsampled sequence; for the MLP, a single d x n_blk matrix scores
neuron blocks per token. Binarized outputs are OR-reduced over batch
(and, for the MLP, sequence) so that a unit is skipped only when every
token in every batch item skips it.

Offline training distills traces collected from dense model inference,
with Gaussian noise augmentation for robustness to parameter drift and a
recall-priority loss for the MLP (a missed active block harms the model,
a false positive only wastes compute).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .patterns import LayoutTable
from .exposer import select_pattern_by_coverage
from .tensor_core import make_rng, randn


@dataclass
class AttnPredictorParams:
    """One (wq_hat, wk_hat) low-rank pair per attention head."""

    wq_hat: list[np.ndarray]  # per head, (d, r)
    wk_hat: list[np.ndarray]

    @property
    def rank(self) -> int:
        return self.wq_hat[0].shape[1]


@dataclass
class MlpPredictorParams:
    wa_hat: np.ndarray  # (d, n_blk)


@dataclass
class PredictorTrainConfig:
    noise_std: float = 0.05
    recall_weight: float = 4.0  # false-negative weight, >= 1
    epochs: int = 200
    lr: float = 1e-3
    attn_threshold_frac: float = 0.5  # binarize at this fraction of per-matrix max
    mlp_threshold: float = 0.0  # on the logit scale
    tau_pred: float = 0.9  # categorization coverage on the binary mask

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.recall_weight < 1:
            raise ValueError("recall_weight must be >= 1")


def downsample_indices(s: int) -> np.ndarray:
    """ceil(sqrt(s)) row indices at uniform stride starting from 0."""
    m = math.isqrt(s)
    if m * m < s:
        m += 1
    return np.minimum((np.arange(m) * s) // m, s - 1)


def downsample(x: np.ndarray) -> np.ndarray:
    return x[downsample_indices(x.shape[0])]


def approx_attention_scores(x_small: np.ndarray, wq_hat: np.ndarray, wk_hat: np.ndarray) -> np.ndarray:
    """S_hat = (X Wq_hat)(X Wk_hat)^T on the already-downsampled input."""
    return (x_small @ wq_hat) @ (x_small @ wk_hat).T


def upsample_mask(cell_mask: np.ndarray, n_b: int) -> np.ndarray:
    """Nearest-cell replication from an m x m grid onto the n_b x n_b
    attention block grid."""
    m = cell_mask.shape[0]
    src = np.minimum((np.arange(n_b) * m) // n_b, m - 1)
    return cell_mask[np.ix_(src, src)]


def binarize_scores(s_hat: np.ndarray, threshold_frac: float) -> np.ndarray:
    """Active cells are those above threshold_frac of the matrix max."""
    peak = s_hat.max()
    return s_hat > threshold_frac * peak


def predict_attention_patterns(
    x_batch: list[np.ndarray],
    params: AttnPredictorParams,
    pool: dict[str, LayoutTable],
    cfg: PredictorTrainConfig,
    counter=None,
) -> list[str]:
    """Per-head pattern ids for a batch: binarize each item's approximate
    score map, OR-reduce active cells over the batch, upsample to the
    block grid, and categorize into the pool."""
    n_b = next(iter(pool.values())).n_b
    assignment = []
    for h in range(len(params.wq_hat)):
        active = None
        for x in x_batch:
            xs = downsample(x)
            m = xs.shape[0]
            s_hat = approx_attention_scores(xs, params.wq_hat[h], params.wk_hat[h])
            if counter is not None:
                d, r = params.wq_hat[h].shape
                counter.add(2 * m * d * r + m * m * r)
            cell = binarize_scores(s_hat, cfg.attn_threshold_frac)
            active = cell if active is None else (active | cell)
        grid = upsample_mask(active, n_b).astype(np.float64)
        assignment.append(select_pattern_by_coverage(grid, pool, cfg.tau_pred))
    return assignment


def approx_mlp_scores(x: np.ndarray, params: MlpPredictorParams, counter=None) -> np.ndarray:
    """S_hat = X Wa_hat, per token, no downsampling."""
    if counter is not None:
        counter.add(x.shape[0] * params.wa_hat.shape[0] * params.wa_hat.shape[1])
    return x @ params.wa_hat


def predict_mlp_mask(s_hat_batch: list[np.ndarray], threshold: float, counter=None) -> np.ndarray:
    """Binarize per entry and OR-reduce over sequence and batch: a block is
    active for the sequence iff active for any token in any item."""
    mask = None
    for s_hat in s_hat_batch:
        active = (s_hat > threshold).any(axis=0)
        if counter is not None:
            counter.add(s_hat.shape[0])  # sequence reduction counted as s units
        mask = active if mask is None else (mask | active)
    if mask is None:
        raise ValueError("empty batch")
    return mask


def eval_recall_precision(predicted: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise ValueError("mask lengths differ")
    hit = (predicted & truth).sum()
    recall = hit / truth.sum() if truth.any() else 1.0
    precision = hit / predicted.sum() if predicted.any() else 1.0
    return float(recall), float(precision)


def predictor_cost_flops(s: int, d: int, r: int) -> tuple[int, int]:
    """Analytic multiply-accumulate cost of one prediction.

    cost_attn = sqrt(s)*d*r + sqrt(s)*d*r + s*r; cost_mlp = s*d*r + s.
    The instrumented counter matches these with sqrt(s) taken as
    ceil(sqrt(s)) and, for the MLP, r read as n_blk (the width of the
    block-scoring matrix).
    """
    if s < 1 or d < 1 or r < 1:
        raise ValueError("sizes must be positive")
    root = math.isqrt(s)
    if root * root < s:
        root += 1
    cost_attn = root * d * r + root * d * r + s * r
    cost_mlp = s * d * r + s
    return cost_attn, cost_mlp


# ---------------------------------------------------------------------------
# offline training


class _Adam:
    def __init__(self, arrays: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.arrays = arrays
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(a, dtype=np.float64) for a in arrays]
        self.v = [np.zeros_like(a, dtype=np.float64) for a in arrays]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        for p, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def init_attn_predictor(d: int, n_heads: int, rank: int | None = None, seed: int = 0) -> AttnPredictorParams:
    if rank is None:
        rank = max(4, d // 16)
    rng = make_rng(seed)
    return AttnPredictorParams(
        wq_hat=[randn(rng, (d, rank), 0.1) for _ in range(n_heads)],
        wk_hat=[randn(rng, (d, rank), 0.1) for _ in range(n_heads)],
    )


def init_mlp_predictor(d: int, n_blk: int, seed: int = 0) -> MlpPredictorParams:
    rng = make_rng(seed)
    return MlpPredictorParams(wa_hat=randn(rng, (d, n_blk), 0.1))


def train_attn_predictor(
    xs: list[np.ndarray],
    raw_scores: list[list[np.ndarray]],
    params: AttnPredictorParams,
    cfg: PredictorTrainConfig,
    seed: int = 0,
):
    """Distill downsampled exact scores with mean-squared error on
    noise-augmented inputs. Returns final mean loss over heads."""
    if not xs:
        raise ValueError("no traces")
    rng = make_rng(seed)
    n_heads = len(params.wq_hat)
    idx = downsample_indices(xs[0].shape[0])
    x_small = np.stack([x[idx] for x in xs])  # (n, m, d)
    targets = [np.stack([raw_scores[i][h][np.ix_(idx, idx)] for i in range(len(xs))]) for h in range(n_heads)]
    final_losses = []
    for h in range(n_heads):
        wq, wk = params.wq_hat[h], params.wk_hat[h]
        opt = _Adam([wq, wk], cfg.lr)
        t_h = targets[h]
        loss = np.inf
        for _ in range(cfg.epochs):
            x_in = x_small
            if cfg.noise_std > 0:
                x_in = x_small + rng.normal(0, cfg.noise_std, x_small.shape).astype(x_small.dtype)
            qh = x_in @ wq  # (n, m, r)
            kh = x_in @ wk
            s_hat = qh @ kh.transpose(0, 2, 1)
            diff = s_hat - t_h
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise FloatingPointError("attention predictor loss diverged")
            scale = 2.0 / diff.size
            d_s = diff * scale
            g_wq = np.einsum("nmd,nmk->dk", x_in, d_s @ kh)
            g_wk = np.einsum("nmd,nmk->dk", x_in, d_s.transpose(0, 2, 1) @ qh)
            opt.step([g_wq, g_wk])
        final_losses.append(loss)
    return float(np.mean(final_losses)) if final_losses else 0.0


def mlp_truth_labels(z: np.ndarray, blk_size: int) -> np.ndarray:
    """Per-token block activity: block active for a token iff any neuron in
    the block has positive pre-activation for that token."""
    s, d_ff = z.shape
    n_blk = (d_ff + blk_size - 1) // blk_size
    labels = np.zeros((s, n_blk), dtype=bool)
    for b in range(n_blk):
        labels[:, b] = (z[:, b * blk_size : min((b + 1) * blk_size, d_ff)] > 0).any(axis=1)
    return labels


def train_mlp_predictor(
    xs: list[np.ndarray],
    zs: list[np.ndarray],
    blk_size: int,
    params: MlpPredictorParams,
    cfg: PredictorTrainConfig,
    seed: int = 0,
):
    """Weighted logistic regression against per-token block activity.

    False negatives (active block scored inactive) are weighted by
    recall_weight; false positives by 1. Returns the final loss."""
    if not xs:
        raise ValueError("no traces")
    rng = make_rng(seed)
    x_all = np.concatenate(xs, axis=0)
    y_all = np.concatenate([mlp_truth_labels(z, blk_size) for z in zs], axis=0).astype(np.float64)
    w = params.wa_hat
    opt = _Adam([w], cfg.lr)
    pos_w = cfg.recall_weight
    loss = np.inf
    for _ in range(cfg.epochs):
        x_in = x_all
        if cfg.noise_std > 0:
            x_in = x_all + rng.normal(0, cfg.noise_std, x_all.shape).astype(x_all.dtype)
        logits = x_in @ w
        # weighted binary cross-entropy on a stable log-sum-exp form
        log_sig = -np.logaddexp(0.0, -logits)
        log_one_minus = -np.logaddexp(0.0, logits)
        losses = -(pos_w * y_all * log_sig + (1 - y_all) * log_one_minus)
        loss = float(losses.mean())
        if not np.isfinite(loss):
            raise FloatingPointError("mlp predictor loss diverged")
        sig = 1.0 / (1.0 + np.exp(-logits))
        d_logits = (pos_w * y_all * (sig - 1) + (1 - y_all) * sig) / losses.size
        opt.step([x_in.T @ d_logits])
    return loss
