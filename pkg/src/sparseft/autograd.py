"""Hand-written backward pass producing gradients only for trainable PEFT
parameters, skipping gradient work for inactive sparse units.

Inactive MLP neuron blocks have zero ReLU derivative for every token, so
their rows of dL/dz are structurally zero and are never materialized:
the backward touches only the packed active columns the forward produced.
Attention gradients flow only through active score blocks; masked blocks
carry zero probability and zero gradient (masked entries are hard -inf,
never renormalized).

dL/dx is always propagated (densely, through active blocks only) so that
trainable parameters in earlier layers receive gradients; frozen backbone
weights never get gradient buffers.
"""

from __future__ import annotations

import numpy as np

from . import model as M
from .block_sparse import dsd_backward, sdd_backward, sparse_softmax_backward


class GradientError(ValueError):
    """Gradient set inconsistent with the trainable parameter set."""


def check_gradient_set(grads: dict[str, np.ndarray], model: M.Model) -> None:
    trainable = M.trainable_params(model)
    if set(grads) != set(trainable):
        missing = set(trainable) - set(grads)
        extra = set(grads) - set(trainable)
        raise GradientError(f"gradient set mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
    for name, g in grads.items():
        if g.shape != trainable[name].shape:
            raise GradientError(f"{name}: gradient shape {g.shape} != param shape {trainable[name].shape}")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"{name}: non-finite gradient")


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def lora_linear_backward(dz: np.ndarray, w: np.ndarray, adapter, cache, grads: dict, prefix: str, bias_name: str | None):
    """Backward of z = xW + bias + scaling*(xA)B. Returns dx."""
    dx = dz @ w.T
    if adapter is not None:
        d_ax = dz @ adapter.b.T * adapter.scaling
        _acc(grads, f"{prefix}.lora_a", cache["x"].T @ d_ax)
        _acc(grads, f"{prefix}.lora_b", adapter.scaling * (cache["ax"].T @ dz))
        dx = dx + d_ax @ adapter.a.T
    if bias_name is not None:
        _acc(grads, bias_name, dz.sum(axis=0))
    return dx


def layernorm_backward(dy: np.ndarray, cache) -> np.ndarray:
    g = dy * cache["gamma"]
    xhat = cache["xhat"]
    mean_g = g.mean(axis=1, keepdims=True)
    mean_gx = (g * xhat).mean(axis=1, keepdims=True)
    return cache["inv_std"] * (g - mean_g - xhat * mean_gx)


def adapter_backward(dy: np.ndarray, ad: M.AdapterLayer, cache, grads: dict, prefix: str) -> np.ndarray:
    _acc(grads, f"{prefix}.w_up", cache["h"].T @ dy)
    _acc(grads, f"{prefix}.b_up", dy.sum(axis=0))
    dh = (dy @ ad.w_up.T) * (cache["z"] > 0)
    _acc(grads, f"{prefix}.w_down", cache["x"].T @ dh)
    _acc(grads, f"{prefix}.b_down", dh.sum(axis=0))
    return dy + dh @ ad.w_down.T


def mlp_backward(
    d_out: np.ndarray,
    cache,
    lw: M.LayerWeights,
    lora: dict,
    neuron_mask: np.ndarray,
    dims: M.ModelDims,
    grads: dict,
    prefix: str = "",
    bitfit: bool = False,
):
    """Backward of mlp_forward. dL/dz has zero rows for inactive neurons;
    only active columns/rows of the LoRA factors receive nonzero terms."""
    if not np.array_equal(cache["mask"], np.asarray(neuron_mask, dtype=bool)):
        raise GradientError("cache was produced with a different neuron mask")
    cols = cache["cols"]
    x, z, a = cache["x"], cache["z"], cache["a"]
    if bitfit:
        _acc(grads, f"{prefix}b2", d_out.sum(axis=0))
    da = d_out @ lw.mlp.w2[cols, :].T if cols.size else np.zeros_like(a)
    ad2 = lora.get("w2")
    if ad2 is not None and cols.size:
        d_ax2 = d_out @ ad2.b.T * ad2.scaling
        _acc(grads, f"{prefix}w2.lora_b", ad2.scaling * (cache["ax2"].T @ d_out))
        da2 = np.zeros_like(ad2.a)
        da2[cols, :] = a.T @ d_ax2
        _acc(grads, f"{prefix}w2.lora_a", da2)
        da = da + d_ax2 @ ad2.a[cols, :].T
    dz = da * (z > 0)
    if bitfit:
        db1 = np.zeros_like(lw.b1)
        if cols.size:
            db1[cols] = dz.sum(axis=0)
        _acc(grads, f"{prefix}b1", db1)
    dx = dz @ lw.mlp.w1[:, cols].T if cols.size else np.zeros_like(x)
    ad1 = lora.get("w1")
    if ad1 is not None:
        db1l = np.zeros_like(ad1.b)
        if cols.size:
            db1l[:, cols] = ad1.scaling * (cache["ax1"].T @ dz)
            d_ax1 = dz @ ad1.b[:, cols].T * ad1.scaling
            _acc(grads, f"{prefix}w1.lora_a", x.T @ d_ax1)
            dx = dx + d_ax1 @ ad1.a.T
        else:
            _acc(grads, f"{prefix}w1.lora_a", np.zeros_like(ad1.a))
        _acc(grads, f"{prefix}w1.lora_b", db1l)
    return dx


def mha_backward(
    d_out: np.ndarray,
    cache,
    lw: M.LayerWeights,
    lora: dict,
    dims: M.ModelDims,
    grads: dict,
    prefix: str = "",
    bitfit: bool = False,
):
    """Backward of mha_forward; score gradients exist only on active blocks."""
    layout = cache["layout"]
    if layout.n_heads != dims.n_heads:
        raise GradientError("cache layout head count does not match model dims")
    d_heads = lora_linear_backward(
        d_out, lw.wo, lora.get("wo"), cache["co"], grads, f"{prefix}wo", f"{prefix}bo" if bitfit else None
    )
    q, k, v = cache["q"], cache["k"], cache["v"]
    hd, blk = dims.head_dim, dims.attn_blk
    scale = 1.0 / np.sqrt(hd)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for h in range(dims.n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        p = cache["probs"][h]
        d_blocks, dv_h = dsd_backward(p, v[:, sl], d_heads[:, sl])
        ds = sparse_softmax_backward(p, d_blocks)
        dq_h, dk_h = sdd_backward(ds, q[:, sl], k[:, sl], p.coords, blk, scale)
        dq[:, sl] = dq_h
        dk[:, sl] = dk_h
        dv[:, sl] = dv_h
    dx = lora_linear_backward(dq, lw.wq, lora.get("wq"), cache["cq"], grads, f"{prefix}wq", f"{prefix}bq" if bitfit else None)
    dx = dx + lora_linear_backward(dk, lw.wk, lora.get("wk"), cache["ck"], grads, f"{prefix}wk", f"{prefix}bk" if bitfit else None)
    dx = dx + lora_linear_backward(dv, lw.wv, lora.get("wv"), cache["cv"], grads, f"{prefix}wv", f"{prefix}bv" if bitfit else None)
    return dx


def block_backward(d_out: np.ndarray, model: M.Model, layer: int, cache, masks: M.LayerMasks, grads: dict):
    lw = model.weights.layers[layer]
    bitfit = model.peft_method == "bitfit"
    lora = {t: model.lora[(layer, t)] for t in model.lora_targets} if model.peft_method == "lora" else {}
    prefix = f"layers.{layer}."

    d_mlp = d_out
    if model.peft_method == "adapter":
        d_mlp = adapter_backward(d_out, model.adapters[(layer, "mlp")], cache["mlp_adapter"], grads, f"{prefix}mlp_adapter")
    dh2 = mlp_backward(d_mlp, cache["mlp"], lw, lora, masks.neuron_mask, model.dims, grads, prefix, bitfit)
    dy = d_out + layernorm_backward(dh2, cache["ln2"])

    d_attn = dy
    if model.peft_method == "adapter":
        d_attn = adapter_backward(dy, model.adapters[(layer, "attn")], cache["attn_adapter"], grads, f"{prefix}attn_adapter")
    dh1 = mha_backward(d_attn, cache["attn"], lw, lora, model.dims, grads, prefix, bitfit)
    return dy + layernorm_backward(dh1, cache["ln1"])


def model_backward(model: M.Model, cache, d_logits: np.ndarray, masks: list[M.LayerMasks]) -> dict[str, np.ndarray]:
    """Full backward from dL/dlogits; returns the GradientSet."""
    grads: dict[str, np.ndarray] = {}
    d_hf = d_logits @ model.weights.emb
    dh = layernorm_backward(d_hf, cache["lnf"])
    for layer in reversed(range(model.dims.n_layers)):
        dh = block_backward(dh, model, layer, cache["blocks"][layer], masks[layer], grads)
    # adapter/lora layers not reached by this input still need (zero) entries
    for name, p in M.trainable_params(model).items():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    check_gradient_set(grads, model)
    return grads


# ---------------------------------------------------------------------------
# optimizer and gradient checking


def optimizer_step(
    state: M.PeftState,
    grads: dict[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> M.PeftState:
    """In-place Adam update over exactly the trainable set."""
    if set(grads) != set(state.params):
        missing = set(state.params) - set(grads)
        extra = set(grads) - set(state.params)
        raise GradientError(f"optimizer grads mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in state.params.items():
        g = grads[name].astype(np.float64)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return state


def finite_diff_check(
    param_name: str,
    params: dict[str, np.ndarray],
    loss_fn,
    analytic: dict[str, np.ndarray],
    eps: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Central-difference check of one trainable parameter's gradient.

    Mutates params[param_name] in place around each sampled coordinate and
    calls loss_fn() to re-evaluate. Intended for the float64 shadow model.
    Returns the max relative error over the sampled coordinates.
    """
    if param_name not in params:
        raise GradientError(f"{param_name!r} is not a trainable parameter")
    if not (1e-5 <= eps <= 1e-2):
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    p = params[param_name]
    grad = analytic[param_name]
    flat = p.reshape(-1)
    n = flat.size
    rng = np.random.Generator(np.random.PCG64(seed))
    idxs = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
    max_rel = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        lp = loss_fn()
        flat[i] = orig - eps
        lm = loss_fn()
        flat[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise ValueError("non-finite loss during finite differencing")
        fd = (lp - lm) / (2 * eps)
        an = grad.reshape(-1)[i]
        denom = max(abs(fd), abs(an))
        if denom > 1e-8:
            max_rel = max(max_rel, abs(fd - an) / denom)
    return max_rel
