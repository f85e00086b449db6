#!/usr/bin/env python3
"""Merging a multi-branch spatial operator into one 3x3 depthwise kernel.

The training form of the spatial operator runs seven depthwise branches in
parallel (three 3x3, one 1x3, one 3x1, one 1x1, plus an identity path),
each with its own normalization, and sums the results. Because every
branch is linear once its normalization statistics are frozen, the whole
stack collapses into a single biased 3x3 kernel. This script builds a
random operator, fuses it, and measures how closely the two forms agree,
then prints the average kernel magnitude matrix of the fused kernels:
the center and the cross-shaped skeleton carry most of the weight mass,
which is the observation that motivates this branch mix in the first
place.
"""

import numpy as np

from falconnet import (ConvSpec, RepSOConfig, conv2d, kernel_magnitude_matrix,
                       merge_repso, random_repso_weights, repso_forward)

channels = 32
cfg = RepSOConfig(channels)
rng = np.random.default_rng(0)
weights = random_repso_weights(cfg, rng)

print(f"operator: {cfg.branch_count} branches over {channels} channels")
print(f"branch kinds: {', '.join(cfg.branch_kinds())}")

fused = merge_repso(weights, cfg)
print(f"fused form: one {tuple(fused.kernel.shape)} kernel plus a bias of "
      f"{fused.bias.shape[0]} values")

spec = ConvSpec(channels, channels, 3, 3, 1, 1, 1, 1, groups=channels, has_bias=True)
worst = 0.0
for _ in range(32):
    x = rng.standard_normal((1, channels, 14, 14)).astype(np.float32)
    train = repso_forward(x, weights, cfg)
    infer = conv2d(x, fused.kernel, fused.bias, spec)
    worst = max(worst, float(np.abs(train - infer).max()))
print(f"worst train/inference discrepancy over 32 random inputs: {worst:.2e}")

train_params = sum(br.kernel.size for br in weights.branches if br.kernel is not None)
train_params += 2 * channels * cfg.branch_count
print(f"training parameters: {train_params}, fused parameters: "
      f"{fused.kernel.size + fused.bias.size}")

print("\naverage magnitude of the fused kernels (max-normalized):")
matrix = kernel_magnitude_matrix([fused.kernel], 3, 3)
for row in matrix:
    print("  " + "  ".join(f"{v:.3f}" for v in row))
