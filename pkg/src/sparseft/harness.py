"""Orchestration: synthetic corpus, trace collection, predictor training,
fine-tuning runs with per-phase timing, and report generation.

All runs are driven by a RunConfig (JSON-serializable, unknown keys
rejected) and are fully deterministic for a fixed seed: repeated runs
produce byte-identical CSV/JSON outputs except for wall-clock fields.
Floats are serialized with 9 significant digits.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd, bench as bench_mod, exposer, model as M, predictor as P
from .containers import load_tensors, save_tensors
from .counters import MacCounter
from .tensor_core import make_rng

MODES = ("dense", "shadowy", "exposer-oracle", "predicted", "random")


class ConfigError(ValueError):
    """Malformed run configuration."""


@dataclass
class RunConfig:
    # model
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    seq_len: int = 256
    n_layers: int = 4
    vocab: int = 256
    blk_size: int = 16
    attn_blk: int = 16
    # peft
    peft: str = "lora"
    lora_rank: int = 8
    adapter_rank: int = 8
    # sparsity
    mode: str = "dense"
    theta: float = 0.1
    tau: float = 0.95
    tau_pred: float = 0.9
    attn_threshold_frac: float = 0.5
    mlp_threshold: float = 0.0
    # predictor training
    pred_rank: int = 0  # 0 = auto (d/16, min 4)
    noise_std: float = 0.05
    recall_weight: float = 4.0
    pred_epochs: int = 200
    pred_lr: float = 1e-3
    # optimization
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 4
    # data
    n_sequences: int = 32
    n_trace_sequences: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.peft not in M.PEFT_METHODS:
            raise ConfigError(f"unknown peft method {self.peft!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown sparsity mode {self.mode!r}")

    @property
    def dims(self) -> M.ModelDims:
        return M.ModelDims(
            d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff, seq_len=self.seq_len,
            n_layers=self.n_layers, vocab=self.vocab, blk_size=self.blk_size, attn_blk=self.attn_blk,
        )

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def build_run_model(cfg: RunConfig) -> M.Model:
    return M.build_model(cfg.dims, seed=cfg.seed, peft=cfg.peft, lora_rank=cfg.lora_rank, adapter_rank=cfg.adapter_rank)


# ---------------------------------------------------------------------------
# corpus


def gen_corpus(seed: int, vocab: int, n_sequences: int, s: int) -> np.ndarray:
    """Seeded first-order Markov token sequences, (n_sequences, s).

    Spiky Dirichlet transition rows give the corpus learnable bigram
    structure so fine-tuning loss curves are meaningful.
    """
    if vocab < 2:
        raise ConfigError(f"vocab must be >= 2, got {vocab}")
    rng = make_rng(seed)
    trans = rng.dirichlet(np.full(vocab, 0.5), size=vocab)
    start = rng.dirichlet(np.full(vocab, 0.5))
    out = np.empty((n_sequences, s), dtype=np.int64)
    for i in range(n_sequences):
        out[i, 0] = rng.choice(vocab, p=start)
        for t in range(1, s):
            out[i, t] = rng.choice(vocab, p=trans[out[i, t - 1]])
    return out


# ---------------------------------------------------------------------------
# mask providers


class _TimedProvider:
    """Base provider that accounts its own wall-clock as prediction time."""

    def __init__(self):
        self.elapsed_ns = 0

    def attn_patterns(self, layer: int, h: np.ndarray) -> list[str]:
        t0 = time.perf_counter_ns()
        out = self._attn(layer, h)
        self.elapsed_ns += time.perf_counter_ns() - t0
        return out

    def mlp_mask(self, layer: int, h: np.ndarray) -> np.ndarray:
        t0 = time.perf_counter_ns()
        out = self._mlp(layer, h)
        self.elapsed_ns += time.perf_counter_ns() - t0
        return out


class DenseProvider(_TimedProvider):
    def __init__(self, model: M.Model):
        super().__init__()
        self.model = model

    def _attn(self, layer, h):
        return ["dense"] * self.model.dims.n_heads

    def _mlp(self, layer, h):
        return np.ones(self.model.dims.n_blk, dtype=bool)


class OracleProvider(_TimedProvider):
    """Ground-truth masks from the exact (dense) computation; verification
    mode, pays the dense cost it is meant to avoid."""

    def __init__(self, model: M.Model, theta: float, tau: float):
        super().__init__()
        self.model, self.theta, self.tau = model, theta, tau

    def _attn(self, layer, h):
        probs, _ = exposer.exact_attention(h, self.model.weights.layers[layer], self.model.dims)
        return [exposer.select_head_pattern(p, self.model.pool, self.tau) for p in probs]

    def _mlp(self, layer, h):
        lw = self.model.weights.layers[layer]
        z = h @ lw.mlp.w1 + lw.b1
        ad = self.model.lora.get((layer, "w1"))
        if ad is not None:
            z = z + ad.scaling * ((h @ ad.a) @ ad.b)
        imp = exposer.block_importance(z, self.model.dims.blk_size)
        return exposer.filter_neuron_blocks(imp, self.theta)


class ShadowyProvider(OracleProvider):
    """Uniform attention mask covering all heads at once; MLP keeps every
    block any token activates (theta = 0)."""

    def __init__(self, model: M.Model, tau: float):
        super().__init__(model, theta=0.0, tau=tau)

    def _attn(self, layer, h):
        probs, _ = exposer.exact_attention(h, self.model.weights.layers[layer], self.model.dims)
        mass = sum(exposer.block_mass(p, self.model.dims.n_b) for p in probs)
        pid = exposer.select_pattern_by_coverage(mass, self.model.pool, self.tau)
        return [pid] * self.model.dims.n_heads


class PredictedProvider(_TimedProvider):
    def __init__(self, model: M.Model, predictors: dict, cfg: RunConfig, counter: MacCounter | None = None):
        super().__init__()
        self.model = model
        self.predictors = predictors
        self.pcfg = P.PredictorTrainConfig(
            noise_std=cfg.noise_std, recall_weight=cfg.recall_weight,
            attn_threshold_frac=cfg.attn_threshold_frac, mlp_threshold=cfg.mlp_threshold, tau_pred=cfg.tau_pred,
        )
        self.counter = counter

    def _attn(self, layer, h):
        params = self.predictors["attn"][layer]
        return P.predict_attention_patterns([h], params, self.model.pool, self.pcfg, counter=self.counter)

    def _mlp(self, layer, h):
        params = self.predictors["mlp"][layer]
        s_hat = P.approx_mlp_scores(h, params, counter=self.counter)
        return P.predict_mlp_mask([s_hat], self.pcfg.mlp_threshold, counter=self.counter)


class RandomProvider(_TimedProvider):
    """Seeded random patterns; the convergence-ablation baseline."""

    def __init__(self, model: M.Model, seed: int):
        super().__init__()
        self.model = model
        self.rng = make_rng(seed)
        self.pattern_ids = [pid for pid in model.pool if pid != "dense"]

    def _attn(self, layer, h):
        return [self.pattern_ids[self.rng.integers(len(self.pattern_ids))] for _ in range(self.model.dims.n_heads)]

    def _mlp(self, layer, h):
        mask = self.rng.random(self.model.dims.n_blk) < 0.5
        if not mask.any():
            mask[self.rng.integers(len(mask))] = True
        return mask


def make_provider(cfg: RunConfig, model: M.Model, predictors=None, counter=None) -> _TimedProvider:
    if cfg.mode == "dense":
        return DenseProvider(model)
    if cfg.mode == "shadowy":
        return ShadowyProvider(model, cfg.tau)
    if cfg.mode == "exposer-oracle":
        return OracleProvider(model, cfg.theta, cfg.tau)
    if cfg.mode == "predicted":
        if predictors is None:
            raise ConfigError("mode=predicted requires trained predictors")
        return PredictedProvider(model, predictors, cfg, counter=counter)
    return RandomProvider(model, seed=cfg.seed + 10_000)


# ---------------------------------------------------------------------------
# traces and predictor training


def run_collect_traces(cfg: RunConfig, out_path) -> dict:
    """Dense-mode forward passes; stores per layer the attention input,
    exact per-head probabilities and raw scores, the MLP input, and the
    exact pre-activations."""
    model = build_run_model(cfg)
    corpus = gen_corpus(cfg.seed + 1, cfg.vocab, cfg.n_trace_sequences, cfg.seq_len)
    tensors: dict[str, np.ndarray] = {}
    for i in range(corpus.shape[0]):
        records = exposer.layer_activations(model, corpus[i])
        for layer, rec in enumerate(records):
            base = f"trace{i}.layer{layer}"
            tensors[f"{base}.x_attn"] = rec["x_attn"]
            tensors[f"{base}.x_mlp"] = rec["x_mlp"]
            tensors[f"{base}.z"] = rec["z"]
            for h in range(cfg.n_heads):
                tensors[f"{base}.probs.h{h}"] = rec["probs"][h]
                tensors[f"{base}.raw.h{h}"] = rec["raw_scores"][h]
    save_tensors(out_path, tensors)
    return {"n_traces": int(corpus.shape[0]), "n_layers": cfg.n_layers}


def load_traces(path, cfg: RunConfig):
    tensors, _ = load_tensors(path)
    n_traces = 1 + max(int(k.split(".")[0][5:]) for k in tensors if k.startswith("trace"))
    traces = []
    for i in range(n_traces):
        layers = []
        for layer in range(cfg.n_layers):
            base = f"trace{i}.layer{layer}"
            layers.append({
                "x_attn": tensors[f"{base}.x_attn"],
                "x_mlp": tensors[f"{base}.x_mlp"],
                "z": tensors[f"{base}.z"],
                "probs": [tensors[f"{base}.probs.h{h}"] for h in range(cfg.n_heads)],
                "raw_scores": [tensors[f"{base}.raw.h{h}"] for h in range(cfg.n_heads)],
            })
        traces.append(layers)
    return traces


def save_predictors(path, predictors: dict) -> None:
    tensors = {}
    for layer, params in enumerate(predictors["attn"]):
        for h in range(len(params.wq_hat)):
            tensors[f"layers.{layer}.attn.h{h}.wq_hat"] = params.wq_hat[h]
            tensors[f"layers.{layer}.attn.h{h}.wk_hat"] = params.wk_hat[h]
    for layer, params in enumerate(predictors["mlp"]):
        tensors[f"layers.{layer}.mlp.wa_hat"] = params.wa_hat
    save_tensors(path, tensors)


def load_predictors(path, cfg: RunConfig) -> dict:
    tensors, _ = load_tensors(path)
    attn, mlp = [], []
    for layer in range(cfg.n_layers):
        wq = [tensors[f"layers.{layer}.attn.h{h}.wq_hat"] for h in range(cfg.n_heads)]
        wk = [tensors[f"layers.{layer}.attn.h{h}.wk_hat"] for h in range(cfg.n_heads)]
        attn.append(P.AttnPredictorParams(wq_hat=wq, wk_hat=wk))
        mlp.append(P.MlpPredictorParams(wa_hat=tensors[f"layers.{layer}.mlp.wa_hat"]))
    return {"attn": attn, "mlp": mlp}


def _pattern_from_truth(raw: np.ndarray, pool, pcfg: P.PredictorTrainConfig, n_b: int) -> str:
    """Push exact scores through the same binarize/categorize path the
    predictor output takes; the agreement reference."""
    idx = P.downsample_indices(raw.shape[0])
    cell = P.binarize_scores(raw[np.ix_(idx, idx)], pcfg.attn_threshold_frac)
    grid = P.upsample_mask(cell, n_b).astype(np.float64)
    return exposer.select_pattern_by_coverage(grid, pool, pcfg.tau_pred)


def run_train_predictors(cfg: RunConfig, traces_path, out_path) -> dict:
    """Train per-layer predictors from traces; returns held-out metrics."""
    model = build_run_model(cfg)
    traces = load_traces(traces_path, cfg)
    n_train = max(1, int(0.8 * len(traces)))
    train, held = traces[:n_train], traces[n_train:] or traces[:1]
    pcfg = P.PredictorTrainConfig(
        noise_std=cfg.noise_std, recall_weight=cfg.recall_weight, epochs=cfg.pred_epochs, lr=cfg.pred_lr,
        attn_threshold_frac=cfg.attn_threshold_frac, mlp_threshold=cfg.mlp_threshold, tau_pred=cfg.tau_pred,
    )
    rank = cfg.pred_rank or max(4, cfg.d_model // 16)
    predictors = {"attn": [], "mlp": []}
    attn_losses, mlp_losses = [], []
    for layer in range(cfg.n_layers):
        ap = P.init_attn_predictor(cfg.d_model, cfg.n_heads, rank=rank, seed=cfg.seed + 100 + layer)
        attn_losses.append(P.train_attn_predictor(
            [t[layer]["x_attn"] for t in train], [t[layer]["raw_scores"] for t in train],
            ap, pcfg, seed=cfg.seed + 200 + layer,
        ))
        predictors["attn"].append(ap)
        mp = P.init_mlp_predictor(cfg.d_model, model.dims.n_blk, seed=cfg.seed + 300 + layer)
        mlp_losses.append(P.train_mlp_predictor(
            [t[layer]["x_mlp"] for t in train], [t[layer]["z"] for t in train],
            cfg.blk_size, mp, pcfg, seed=cfg.seed + 400 + layer,
        ))
        predictors["mlp"].append(mp)
    # held-out metrics
    agree = total = 0
    recalls, precisions = [], []
    for t in held:
        for layer in range(cfg.n_layers):
            predicted = P.predict_attention_patterns([t[layer]["x_attn"]], predictors["attn"][layer], model.pool, pcfg)
            for h in range(cfg.n_heads):
                truth = _pattern_from_truth(t[layer]["raw_scores"][h], model.pool, pcfg, model.dims.n_b)
                agree += int(predicted[h] == truth)
                total += 1
            s_hat = P.approx_mlp_scores(t[layer]["x_mlp"], predictors["mlp"][layer])
            pred_mask = P.predict_mlp_mask([s_hat], pcfg.mlp_threshold)
            truth_mask = P.mlp_truth_labels(t[layer]["z"], cfg.blk_size).any(axis=0)
            r, p = P.eval_recall_precision(pred_mask, truth_mask)
            recalls.append(r)
            precisions.append(p)
    save_predictors(out_path, predictors)
    return {
        "attn_final_loss": [round(x, 9) for x in attn_losses],
        "mlp_final_loss": [round(x, 9) for x in mlp_losses],
        "attn_pattern_agreement": round(agree / total, 9),
        "mlp_recall": round(float(np.mean(recalls)), 9),
        "mlp_precision": round(float(np.mean(precisions)), 9),
    }


# ---------------------------------------------------------------------------
# fine-tuning


def run_finetune(cfg: RunConfig, out_dir, predictors=None) -> dict:
    """Fine-tune with the configured PEFT method and sparsity mode.

    Per step: (predict masks) -> forward -> loss -> backward -> optimizer,
    with per-phase wall-clock accounting. Writes loss_curve.csv,
    timing.json and a final checkpoint; returns the timing report.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_run_model(cfg)
    state = M.make_peft_state(model)
    n_train = M.trainable_params(model)
    n_trainable = sum(p.size for p in n_train.values())
    corpus = gen_corpus(cfg.seed + 2, cfg.vocab, cfg.n_sequences, cfg.seq_len + 1)
    provider = make_provider(cfg, model, predictors=predictors)
    phase_ns = {"prediction": 0, "forward": 0, "backward": 0, "optimizer_step": 0}
    curve = []
    t_start = time.perf_counter_ns()
    for step in range(cfg.steps):
        grads_sum: dict[str, np.ndarray] = {}
        losses = []
        pred_before = provider.elapsed_ns
        t_fwd = t_bwd = 0
        for b in range(cfg.batch_size):
            seq = corpus[(step * cfg.batch_size + b) % len(corpus)]
            tokens, targets = seq[:-1], seq[1:]
            t0 = time.perf_counter_ns()
            logits, cache = M.model_forward(model, tokens, provider)
            losses.append(M.loss_forward(logits, targets))
            t_fwd += time.perf_counter_ns() - t0
            t0 = time.perf_counter_ns()
            d_logits = M.loss_backward(logits, targets)
            masks = [c["masks"] for c in cache["blocks"]]
            grads = autograd.model_backward(model, cache, d_logits, masks)
            t_bwd += time.perf_counter_ns() - t0
            for name, g in grads.items():
                grads_sum[name] = grads_sum.get(name, 0) + g
        grads_mean = {name: g / cfg.batch_size for name, g in grads_sum.items()}
        t0 = time.perf_counter_ns()
        autograd.optimizer_step(state, grads_mean, lr=cfg.lr)
        phase_ns["optimizer_step"] += time.perf_counter_ns() - t0
        pred_ns = provider.elapsed_ns - pred_before
        phase_ns["prediction"] += pred_ns
        phase_ns["forward"] += t_fwd - pred_ns  # provider runs inside the forward
        phase_ns["backward"] += t_bwd
        loss = float(np.mean(losses))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        curve.append((step, loss))
    total_ns = time.perf_counter_ns() - t_start
    phase_total = sum(phase_ns.values())
    report = {
        "mode": cfg.mode, "peft": cfg.peft, "steps": cfg.steps, "trainable_params": int(n_trainable),
        "backbone_params": int(M.backbone_param_count(model)),
        "final_loss": round(curve[-1][1], 9),
        "phase_seconds": {k: v / 1e9 for k, v in phase_ns.items()},
        "phase_percent": {k: 100.0 * v / phase_total for k, v in phase_ns.items()},
        "total_seconds": total_ns / 1e9,
    }
    (out_dir / "loss_curve.csv").write_text(
        "step,loss\n" + "".join(f"{s},{l:.9g}\n" for s, l in curve)
    )
    (out_dir / "timing.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    M.save_checkpoint(out_dir / "checkpoint.tnsc", model)
    return report


# ---------------------------------------------------------------------------
# reports


def run_report(cfg: RunConfig, out_dir, thetas=(0.05, 0.1, 0.2, 0.4)) -> dict:
    """Merge exposer sparsity rows, operator benchmarks, and (if present)
    a fine-tuning timing report into publishable CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_run_model(cfg)
    tokens = gen_corpus(cfg.seed + 3, cfg.vocab, 1, cfg.seq_len)[0]
    rows = exposer.layer_sparsity_report(model, tokens, thetas, tau=cfg.tau)
    (out_dir / "sparsity.csv").write_text(exposer.report_to_csv(rows))
    records = bench_mod.bench(
        "neuron_mlp", sizes=[cfg.d_ff], sparsity_grid=[0.0, 0.25, 0.5, 0.75, 0.9],
        s=cfg.seq_len, d=cfg.d_model, blk_size=cfg.blk_size, seed=cfg.seed,
    )
    (out_dir / "bench.csv").write_text(bench_mod.records_to_csv(records))
    result = {"sparsity_rows": len(rows), "bench_rows": len(records)}
    timing_path = out_dir / "timing.json"
    if timing_path.exists():
        timing = json.loads(timing_path.read_text())
        lines = ["phase,seconds,percent"]
        for phase in ("prediction", "forward", "backward", "optimizer_step"):
            lines.append(f"{phase},{timing['phase_seconds'][phase]:.9g},{timing['phase_percent'][phase]:.9g}")
        (out_dir / "breakdown.csv").write_text("\n".join(lines) + "\n")
        result["breakdown"] = True
    else:
        result["breakdown"] = False
        result["missing"] = [str(timing_path)]
    return result
