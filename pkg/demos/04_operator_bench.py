"""Do the sparse operators actually get faster with sparsity?

Benchmarks the neuron-centric MLP matmul and the block-sparse attention
chain against same-kernel dense baselines across a sparsity grid. Because
the baseline is the identical kernel with a full mask, the speedup curve
isolates the effect of skipped blocks from kernel quality. Prints the
timing table, the linear fit of time vs active blocks, and writes CSVs.
"""

import pathlib

from sparseft import bench as B


def show(records, label):
    print(f"\n=== {label} ===")
    print(f"{'size':>6} {'sparsity':>9} {'active':>7} {'median ms':>10} {'speedup':>8}")
    for r in records:
        print(f"{r.size:>6} {r.sparsity:>9.2f} {r.active_blocks:>7} "
              f"{r.median_ns / 1e6:>10.3f} {r.speedup:>7.2f}x")
    by_size = {}
    for r in records:
        by_size.setdefault(r.size, []).append(r)
    for size, group in by_size.items():
        print(f"  size {size}: time-vs-active-blocks R^2 = {B.linear_fit_r2(group):.4f}")


def main():
    out = pathlib.Path("demo_out")
    out.mkdir(exist_ok=True)
    grid = [0.0, 0.25, 0.5, 0.75, 0.9]

    records = B.bench("neuron_mlp", sizes=[512, 1024, 2048], sparsity_grid=grid,
                      repetitions=11, s=256, d=256)
    show(records, "neuron-centric MLP matmul (sizes are d_ff)")
    (out / "bench_neuron_mlp.csv").write_text(B.records_to_csv(records))

    records = B.bench("dsd", sizes=[128, 256, 512], sparsity_grid=grid, repetitions=11)
    show(records, "block-sparse attention chain sdd -> softmax -> dsd (sizes are seq len)")
    (out / "bench_attention.csv").write_text(B.records_to_csv(records))

    print(f"\nwrote CSVs under {out}/")


if __name__ == "__main__":
    main()
