"""A small pre-norm transformer block stack with frozen backbone weights
and pluggable PEFT adapters (LoRA, bottleneck adapter, bias-only).

Forward passes accept sparsity inputs: a per-head attention pattern
assignment resolved against the atomic pattern pool, and a neuron-block
mask shared by both MLP linears. Dense execution is just the degenerate
case (all heads "dense", all blocks active) through the same code path.

All forward code is dtype-preserving; `Model.astype(np.float64)` yields
the shadow copy used by gradient checking.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import neuron_ops
from .block_sparse import BlockSparseMatrix, dsd, sdd, sparse_softmax
from .containers import load_tensors, save_tensors
from .neuron_ops import ActiveHidden, LayeredWeights
from .patterns import CombinedLayout, LayoutTable, build_pool, combine_layouts
from .tensor_core import ShapeError, make_rng, randn, relu

LORA_TARGET_SHAPES = {"wq": "attn", "wk": "attn", "wv": "attn", "wo": "attn", "w1": "mlp_in", "w2": "mlp_out"}
PEFT_METHODS = ("lora", "adapter", "bitfit")
BIAS_NAMES = ("bq", "bk", "bv", "bo", "b1", "b2")


@dataclass(frozen=True)
class ModelDims:
    d_model: int
    n_heads: int
    d_ff: int
    seq_len: int
    n_layers: int = 4
    vocab: int = 256
    blk_size: int = 16
    attn_blk: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ShapeError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.seq_len % self.attn_blk:
            raise ShapeError(f"seq_len {self.seq_len} not divisible by attn_blk {self.attn_blk}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_blk(self) -> int:
        return neuron_ops.n_blocks(self.d_ff, self.blk_size)

    @property
    def n_b(self) -> int:
        return self.seq_len // self.attn_blk


@dataclass
class LoraAdapter:
    """z = Wx + scaling * B(Ax); a: (d_in, r), b: (r, d_out), b zero-init."""

    a: np.ndarray
    b: np.ndarray
    scaling: float = 1.0

    @property
    def rank(self) -> int:
        return self.a.shape[1]


@dataclass
class AdapterLayer:
    """Bottleneck adapter with ReLU inside and a residual around it."""

    w_down: np.ndarray
    b_down: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    mlp: LayeredWeights
    b1: np.ndarray
    b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class FrozenWeights:
    emb: np.ndarray  # tied embedding / unembedding
    layers: list[LayerWeights]
    lnf_g: np.ndarray
    lnf_b: np.ndarray


@dataclass
class PeftState:
    """Trainable parameter set with Adam moments. Arrays are shared with
    the model structure, so optimizer updates are visible to the forward."""

    method: str
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p, dtype=np.float64))
            self.v.setdefault(name, np.zeros_like(p, dtype=np.float64))


@dataclass
class LayerMasks:
    head_patterns: list[str]
    neuron_mask: np.ndarray


def dense_masks(dims: ModelDims) -> list[LayerMasks]:
    return [
        LayerMasks(["dense"] * dims.n_heads, np.ones(dims.n_blk, dtype=bool))
        for _ in range(dims.n_layers)
    ]


@dataclass
class Model:
    dims: ModelDims
    weights: FrozenWeights
    pool: dict[str, LayoutTable]
    peft_method: str
    lora: dict[tuple[int, str], LoraAdapter] = field(default_factory=dict)
    adapters: dict[tuple[int, str], AdapterLayer] = field(default_factory=dict)
    lora_targets: tuple[str, ...] = ()

    def astype(self, dtype) -> "Model":
        clone = copy.deepcopy(self)

        def cast(obj):
            for name, val in vars(obj).items():
                if isinstance(val, np.ndarray):
                    setattr(obj, name, val.astype(dtype))

        cast(clone.weights)
        for lw in clone.weights.layers:
            cast(lw)
            lw.mlp = LayeredWeights(
                np.asfortranarray(lw.mlp.w1.astype(dtype)), np.ascontiguousarray(lw.mlp.w2.astype(dtype))
            )
        for ad in clone.lora.values():
            cast(ad)
        for ad in clone.adapters.values():
            cast(ad)
        return clone


def build_model(
    dims: ModelDims,
    seed: int,
    peft: str = "lora",
    lora_rank: int = 8,
    lora_targets: tuple[str, ...] = ("wq", "wv", "w1", "w2"),
    adapter_rank: int = 8,
    init_scale: float = 0.02,
) -> Model:
    if peft not in PEFT_METHODS:
        raise ValueError(f"unknown peft method {peft!r}")
    rng = make_rng(seed)
    d, d_ff = dims.d_model, dims.d_ff

    def proj():
        return randn(rng, (d, d), init_scale)

    layers = []
    for _ in range(dims.n_layers):
        layers.append(
            LayerWeights(
                wq=proj(), wk=proj(), wv=proj(), wo=proj(),
                bq=np.zeros(d, np.float32), bk=np.zeros(d, np.float32),
                bv=np.zeros(d, np.float32), bo=np.zeros(d, np.float32),
                mlp=LayeredWeights.from_row_major(randn(rng, (d, d_ff), init_scale), randn(rng, (d_ff, d), init_scale)),
                b1=np.zeros(d_ff, np.float32), b2=np.zeros(d, np.float32),
                ln1_g=np.ones(d, np.float32), ln1_b=np.zeros(d, np.float32),
                ln2_g=np.ones(d, np.float32), ln2_b=np.zeros(d, np.float32),
            )
        )
    weights = FrozenWeights(
        emb=randn(rng, (dims.vocab, d), init_scale),
        layers=layers,
        lnf_g=np.ones(d, np.float32),
        lnf_b=np.zeros(d, np.float32),
    )
    model = Model(
        dims=dims, weights=weights, pool=build_pool(dims.n_b),
        peft_method=peft, lora_targets=tuple(lora_targets) if peft == "lora" else (),
    )
    if peft == "lora":
        for i in range(dims.n_layers):
            for target in model.lora_targets:
                d_in, d_out = {"attn": (d, d), "mlp_in": (d, d_ff), "mlp_out": (d_ff, d)}[LORA_TARGET_SHAPES[target]]
                model.lora[(i, target)] = LoraAdapter(
                    a=randn(rng, (d_in, lora_rank), init_scale),
                    b=np.zeros((lora_rank, d_out), np.float32),
                )
    elif peft == "adapter":
        for i in range(dims.n_layers):
            for sub in ("attn", "mlp"):
                model.adapters[(i, sub)] = AdapterLayer(
                    w_down=randn(rng, (d, adapter_rank), init_scale),
                    b_down=np.zeros(adapter_rank, np.float32),
                    w_up=np.zeros((adapter_rank, d), np.float32),  # identity start
                    b_up=np.zeros(d, np.float32),
                )
    return model


def trainable_params(model: Model) -> dict[str, np.ndarray]:
    """Named references to every trainable array of the active PEFT method."""
    out: dict[str, np.ndarray] = {}
    if model.peft_method == "lora":
        for (i, target), ad in sorted(model.lora.items()):
            out[f"layers.{i}.{target}.lora_a"] = ad.a
            out[f"layers.{i}.{target}.lora_b"] = ad.b
    elif model.peft_method == "adapter":
        for (i, sub), ad in sorted(model.adapters.items()):
            for field_name in ("w_down", "b_down", "w_up", "b_up"):
                out[f"layers.{i}.{sub}_adapter.{field_name}"] = getattr(ad, field_name)
    elif model.peft_method == "bitfit":
        for i, lw in enumerate(model.weights.layers):
            for bias in BIAS_NAMES:
                out[f"layers.{i}.{bias}"] = getattr(lw, bias)
    return out


def backbone_param_count(model: Model) -> int:
    total = model.weights.emb.size + model.weights.lnf_g.size + model.weights.lnf_b.size
    for lw in model.weights.layers:
        total += sum(
            getattr(lw, n).size
            for n in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo", "b1", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")
        )
        total += lw.mlp.w1.size + lw.mlp.w2.size
    return total


def make_peft_state(model: Model) -> PeftState:
    return PeftState(method=model.peft_method, params=trainable_params(model))


def frozen_hash(model: Model) -> str:
    """SHA-256 over the frozen backbone bytes.

    Under bitfit the linear biases are the trainable set, so they are
    excluded from the digest.
    """
    h = hashlib.sha256()
    skip = set(BIAS_NAMES) if model.peft_method == "bitfit" else set()
    h.update(np.ascontiguousarray(model.weights.emb).tobytes())
    h.update(np.ascontiguousarray(model.weights.lnf_g).tobytes())
    h.update(np.ascontiguousarray(model.weights.lnf_b).tobytes())
    for lw in model.weights.layers:
        for n in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo", "b1", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            if n in skip:
                continue
            h.update(np.ascontiguousarray(getattr(lw, n)).tobytes())
        h.update(np.ascontiguousarray(lw.mlp.w1).tobytes())
        h.update(np.ascontiguousarray(lw.mlp.w2).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# forward passes


def lora_linear_forward(x: np.ndarray, w: np.ndarray, bias, adapter: LoraAdapter | None):
    """z = xW (+ bias) + scaling * (xA)B; returns (z, cache)."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shapes disagree: {x.shape} @ {w.shape}")
    z = x @ w
    cache = {"x": x, "ax": None}
    if adapter is not None:
        ax = x @ adapter.a
        z = z + adapter.scaling * (ax @ adapter.b)
        cache["ax"] = ax
    if bias is not None:
        z = z + bias
    return z, cache


def layernorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, {"xhat": xhat, "inv_std": inv_std, "gamma": gamma}


def adapter_forward(x: np.ndarray, ad: AdapterLayer):
    """x + ReLU(x Wd + bd) Wu + bu."""
    z = x @ ad.w_down + ad.b_down
    h = relu(z)
    return x + h @ ad.w_up + ad.b_up, {"x": x, "z": z, "h": h}


def mha_forward(
    x: np.ndarray,
    lw: LayerWeights,
    lora: dict[str, LoraAdapter],
    head_patterns: list[str],
    pool: dict[str, LayoutTable],
    dims: ModelDims,
    counter=None,
):
    """Block-sparse multi-head attention.

    Per head: scores only on that head's active blocks (SDD), sparse
    softmax with -inf outside, probabilities times values (DSD). Heads are
    concatenated and projected through wo.
    """
    if len(head_patterns) != dims.n_heads:
        raise ShapeError(f"expected {dims.n_heads} head patterns, got {len(head_patterns)}")
    layout = combine_layouts(head_patterns, pool)
    q, cq = lora_linear_forward(x, lw.wq, lw.bq, lora.get("wq"))
    k, ck = lora_linear_forward(x, lw.wk, lw.bk, lora.get("wk"))
    v, cv = lora_linear_forward(x, lw.wv, lw.bv, lora.get("wv"))
    hd, blk = dims.head_dim, dims.attn_blk
    scale = 1.0 / np.sqrt(hd)
    probs: list[BlockSparseMatrix] = []
    heads_out = np.empty_like(q)
    for h in range(dims.n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        coords = layout.head_coords(h)
        scores = sdd(q[:, sl], k[:, sl], coords, blk, scale, counter=counter)
        p = sparse_softmax(scores)
        probs.append(p)
        heads_out[:, sl] = dsd(p, v[:, sl], counter=counter)
    out, co = lora_linear_forward(heads_out, lw.wo, lw.bo, lora.get("wo"))
    cache = {
        "x": x, "q": q, "k": k, "v": v, "heads_out": heads_out,
        "probs": probs, "layout": layout, "head_patterns": list(head_patterns),
        "cq": cq, "ck": ck, "cv": cv, "co": co,
    }
    return out, cache


def mlp_forward(
    x: np.ndarray,
    lw: LayerWeights,
    lora: dict[str, LoraAdapter],
    neuron_mask: np.ndarray,
    dims: ModelDims,
    counter=None,
):
    """ReLU MLP restricted to active neuron blocks.

    Inactive blocks contribute exactly zero: their W1 columns are never
    multiplied and their W2 rows are never read.
    """
    hidden = neuron_ops.neuron_matmul_fwd1(x, lw.mlp, neuron_mask, dims.blk_size, counter=counter)
    cols = hidden.col_index
    z = hidden.values + lw.b1[cols]
    ad1 = lora.get("w1")
    ax1 = None
    if ad1 is not None and cols.size:
        ax1 = x @ ad1.a
        z = z + ad1.scaling * (ax1 @ ad1.b[:, cols])
        if counter is not None:
            counter.add(x.shape[0] * (x.shape[1] + cols.size) * ad1.rank)
    a = relu(z)
    act = ActiveHidden(values=a, active_blocks=hidden.active_blocks, col_index=cols, blk_size=dims.blk_size, d_ff=dims.d_ff)
    out = neuron_ops.neuron_matmul_fwd2(act, lw.mlp, neuron_mask, counter=counter) + lw.b2
    ad2 = lora.get("w2")
    ax2 = None
    if ad2 is not None and cols.size:
        ax2 = a @ ad2.a[cols, :]
        out = out + ad2.scaling * (ax2 @ ad2.b)
        if counter is not None:
            counter.add(a.shape[0] * (cols.size + out.shape[1]) * ad2.rank)
    cache = {
        "x": x, "z": z, "a": a, "cols": cols, "active_blocks": hidden.active_blocks,
        "mask": np.asarray(neuron_mask, dtype=bool), "ax1": ax1, "ax2": ax2,
    }
    return out, cache


def block_forward(x: np.ndarray, model: Model, layer: int, masks, counter=None):
    """Pre-norm residual block: y = x + MHA(LN(x)); out = y + MLP(LN(y)).

    `masks` is either a LayerMasks or a provider with attn_patterns(layer,
    h) and mlp_mask(layer, h) methods, letting runtime predictors see the
    normalized sublayer inputs before the real computation runs. The
    resolved LayerMasks are recorded in the cache for the backward pass.
    """
    lw = model.weights.layers[layer]
    lora = {t: model.lora[(layer, t)] for t in model.lora_targets} if model.peft_method == "lora" else {}
    static = isinstance(masks, LayerMasks)
    h1, c_ln1 = layernorm_forward(x, lw.ln1_g, lw.ln1_b)
    head_patterns = masks.head_patterns if static else masks.attn_patterns(layer, h1)
    attn, c_attn = mha_forward(h1, lw, lora, head_patterns, model.pool, model.dims, counter=counter)
    c_attn_ad = None
    if model.peft_method == "adapter":
        attn, c_attn_ad = adapter_forward(attn, model.adapters[(layer, "attn")])
    y = x + attn
    h2, c_ln2 = layernorm_forward(y, lw.ln2_g, lw.ln2_b)
    neuron_mask = masks.neuron_mask if static else masks.mlp_mask(layer, h2)
    mlp, c_mlp = mlp_forward(h2, lw, lora, neuron_mask, model.dims, counter=counter)
    c_mlp_ad = None
    if model.peft_method == "adapter":
        mlp, c_mlp_ad = adapter_forward(mlp, model.adapters[(layer, "mlp")])
    out = y + mlp
    cache = {
        "ln1": c_ln1, "attn": c_attn, "attn_adapter": c_attn_ad,
        "ln2": c_ln2, "mlp": c_mlp, "mlp_adapter": c_mlp_ad,
        "masks": LayerMasks(list(head_patterns), np.asarray(neuron_mask, dtype=bool)),
    }
    return out, cache


def model_forward(model: Model, tokens: np.ndarray, masks, counter=None):
    """Embed, run all blocks, final LN, tied unembedding.

    `masks` is a per-layer LayerMasks list or a single mask provider.
    """
    if tokens.max() >= model.dims.vocab or tokens.min() < 0:
        raise ValueError("token id out of vocab range")
    h = model.weights.emb[tokens]
    caches = []
    for layer in range(model.dims.n_layers):
        layer_masks = masks[layer] if isinstance(masks, list) else masks
        h, cache = block_forward(h, model, layer, layer_masks, counter=counter)
        caches.append(cache)
    hf, c_lnf = layernorm_forward(h, model.weights.lnf_g, model.weights.lnf_b)
    logits = hf @ model.weights.emb.T
    return logits, {"blocks": caches, "lnf": c_lnf, "hf": hf, "tokens": tokens}


def loss_forward(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy over sequence positions."""
    vocab = logits.shape[1]
    if targets.max() >= vocab or targets.min() < 0:
        raise ValueError("target id out of vocab range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(targets)), targets]
    return float(np.mean(logz - picked))


def loss_backward(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d loss / d logits for the mean cross-entropy above."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    grad = probs.copy()
    grad[np.arange(len(targets)), targets] -= 1.0
    return grad / len(targets)


# ---------------------------------------------------------------------------
# checkpoint container


def _named_tensors(model: Model) -> tuple[dict[str, np.ndarray], set[str]]:
    tensors = {"emb": model.weights.emb, "lnf_g": model.weights.lnf_g, "lnf_b": model.weights.lnf_b}
    col_major = set()
    for i, lw in enumerate(model.weights.layers):
        for n in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo", "b1", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            tensors[f"layers.{i}.{n}"] = getattr(lw, n)
        tensors[f"layers.{i}.w1"] = lw.mlp.w1
        tensors[f"layers.{i}.w2"] = lw.mlp.w2
        col_major.add(f"layers.{i}.w1")
    tensors.update(trainable_params(model))
    return tensors, col_major


def save_checkpoint(path, model: Model) -> None:
    tensors, col_major = _named_tensors(model)
    save_tensors(path, tensors, column_major=col_major)


def load_checkpoint(path, model: Model) -> None:
    """Load named tensors into an already-built model of matching config."""
    tensors, _ = load_tensors(path)
    current, _ = _named_tensors(model)
    missing = set(current) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:4]}...")
    for name, arr in current.items():
        np.copyto(arr, tensors[name].reshape(arr.shape))
