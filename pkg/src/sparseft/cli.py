"""Command-line entry point.

Subcommands: gen-corpus, collect-traces, train-predictors, finetune,
bench, report. Exit code 0 on success; on failure a machine-readable
error JSON is printed to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod, harness
from .harness import RunConfig


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("seed", "mode", "peft", "theta", "tau"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run config JSON (unknown keys rejected)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--mode", choices=harness.MODES)
    p.add_argument("--peft", choices=("lora", "adapter", "bitfit"))
    p.add_argument("--theta", type=float)
    p.add_argument("--tau", type=float)


def cmd_gen_corpus(args) -> dict:
    cfg = _load_config(args)
    corpus = harness.gen_corpus(cfg.seed, cfg.vocab, cfg.n_sequences, cfg.seq_len)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "corpus.npy"
    np.save(path, corpus)
    return {"path": str(path), "n_sequences": int(corpus.shape[0]), "seq_len": int(corpus.shape[1])}


def cmd_collect_traces(args) -> dict:
    cfg = _load_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "traces.tnsc"
    meta = harness.run_collect_traces(cfg, path)
    return {"path": str(path), **meta}


def cmd_train_predictors(args) -> dict:
    cfg = _load_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    traces = args.out / "traces.tnsc"
    if not traces.exists():
        raise FileNotFoundError(f"traces file not found: {traces} (run collect-traces first)")
    out_path = args.out / "predictors.tnsc"
    metrics = harness.run_train_predictors(cfg, traces, out_path)
    (args.out / "predictor_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return {"path": str(out_path), **metrics}


def cmd_finetune(args) -> dict:
    cfg = _load_config(args)
    predictors = None
    if cfg.mode == "predicted":
        pred_path = args.out / "predictors.tnsc"
        if not pred_path.exists():
            raise FileNotFoundError(f"predictors file not found: {pred_path} (run train-predictors first)")
        predictors = harness.load_predictors(pred_path, cfg)
    return harness.run_finetune(cfg, args.out, predictors=predictors)


def cmd_bench(args) -> dict:
    cfg = _load_config(args)
    records = bench_mod.bench(
        args.op, sizes=args.sizes, sparsity_grid=args.sparsity, repetitions=args.repetitions,
        s=cfg.seq_len, d=cfg.d_model, blk_size=cfg.blk_size, attn_blk=cfg.attn_blk, seed=cfg.seed,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"bench_{args.op}.csv"
    path.write_text(bench_mod.records_to_csv(records))
    return {"path": str(path), "rows": len(records)}


def cmd_report(args) -> dict:
    cfg = _load_config(args)
    return harness.run_report(cfg, args.out)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sparseft")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-corpus": cmd_gen_corpus,
        "collect-traces": cmd_collect_traces,
        "train-predictors": cmd_train_predictors,
        "finetune": cmd_finetune,
        "report": cmd_report,
    }
    for name in commands:
        p = sub.add_parser(name)
        _add_common(p)
    p = sub.add_parser("bench")
    _add_common(p)
    p.add_argument("--op", choices=bench_mod.OPS, default="neuron_mlp")
    p.add_argument("--sizes", type=int, nargs="+", default=[1024])
    p.add_argument("--sparsity", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 0.9])
    p.add_argument("--repetitions", type=int, default=5)
    commands["bench"] = cmd_bench

    args = parser.parse_args(argv)
    try:
        result = commands[args.command](args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump(result, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
