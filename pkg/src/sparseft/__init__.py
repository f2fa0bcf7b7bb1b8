"""Sparse parameter-efficient fine-tuning at desk scale.

Library layout:
  tensor_core  dense float32 math (matmul kernels, softmax, seeded init)
  containers   versioned binary tensor files (checkpoints, traces, params)
  patterns     atomic block-sparse pattern pool with precomputed layouts
  block_sparse SDD / sparse softmax / DSD attention operators
  neuron_ops   neuron-centric MLP matmuls with layout-tagged weights
  model        transformer blocks with frozen backbone + PEFT adapters
  autograd     manual sparse-aware backward, Adam, finite differences
  exposer      ground-truth sparsity extraction and reports
  predictor    low-rank runtime sparsity predictors and their training
  bench        operator timing against same-kernel dense baselines
  harness      corpus, trace, training and fine-tuning orchestration
  cli          `sparseft` command-line entry point
"""

__version__ = "0.1.0"
