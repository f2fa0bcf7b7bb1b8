"""Training the runtime sparsity predictors from dense traces.

Collects dense-inference traces from a small model, distills per-head
low-rank score approximators (MSE on downsampled exact scores) and a
per-layer MLP block scorer (recall-weighted logistic regression), then
reports held-out pattern agreement, recall/precision, and the analytic
prediction cost next to the full computation it replaces.
"""

import pathlib
import tempfile

from sparseft import harness as H
from sparseft import predictor as P


def main():
    cfg = H.RunConfig(
        d_model=128, n_heads=4, d_ff=512, seq_len=128, n_layers=2, vocab=64,
        n_trace_sequences=12, pred_epochs=150, pred_rank=8, seed=0,
    )
    work = pathlib.Path(tempfile.mkdtemp(prefix="demo02_"))

    print("collecting dense traces ...")
    meta = H.run_collect_traces(cfg, work / "traces.tnsc")
    print(f"  {meta['n_traces']} traces x {meta['n_layers']} layers -> {work / 'traces.tnsc'}")

    print("training predictors (distillation + weighted logistic) ...")
    metrics = H.run_train_predictors(cfg, work / "traces.tnsc", work / "predictors.tnsc")
    print(f"  attention pattern agreement (held out): {metrics['attn_pattern_agreement']:.3f}")
    print(f"  mlp mask recall / precision (held out): "
          f"{metrics['mlp_recall']:.3f} / {metrics['mlp_precision']:.3f}")
    print(f"  final distillation losses per layer:    {metrics['attn_final_loss']}")

    rank = cfg.pred_rank or max(4, cfg.d_model // 16)
    cost_attn, _ = P.predictor_cost_flops(cfg.seq_len, cfg.d_model, rank)
    print("\n=== prediction cost (MACs, one layer) ===")
    print(f"  attention: {cfg.n_heads} heads x {cost_attn} = {cfg.n_heads * cost_attn}")
    print(f"  vs full scores: {cfg.n_heads} x s^2 x head_dim = "
          f"{cfg.n_heads * cfg.seq_len**2 * (cfg.d_model // cfg.n_heads)}")
    n_blk = cfg.d_ff // cfg.blk_size
    _, cost_mlp = P.predictor_cost_flops(cfg.seq_len, cfg.d_model, n_blk)
    print(f"  mlp: {cost_mlp} vs full first linear: {cfg.seq_len * cfg.d_model * cfg.d_ff}")


if __name__ == "__main__":
    main()
