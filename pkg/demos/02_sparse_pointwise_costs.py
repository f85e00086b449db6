#!/usr/bin/env python3
"""Cost law of the sparsely factorized 1x1 convolution.

A dense 1x1 convolution mixing C channels into lambda*C costs lambda*C^2
weights. The factorized form costs C*K/R + lambda*C^2/K, minimized near
K = sqrt(lambda*C*R), where the parameter count falls to a fraction
2/sqrt(lambda*C*R) of dense. The fraction shrinks as channels grow, which
is why the savings concentrate in the late, wide stages of a network.

This script sweeps the expansion layers of the default channel plan
(lambda = 6, R = 2) and compares the discrete optimum against the
continuous bound.
"""

import numpy as np

from falconnet import SFConvSpec, choose_kernel_size, sfconv_param_count

LAMBDA = 6
R = 2

print(f"expansion layers, lambda={LAMBDA}, R={R}")
print(f"{'C':>5} {'K*':>4} {'factorized':>11} {'dense':>9} {'ratio':>7} {'bound':>7}")
for c in (16, 32, 64, 128, 256, 512):
    c_out = LAMBDA * c
    k = choose_kernel_size(c, c_out, R)
    params = sfconv_param_count(SFConvSpec(c, c_out, k, R))
    dense = c * c_out
    bound = 2.0 / np.sqrt(LAMBDA * c * R)
    print(f"{c:>5} {k:>4} {params:>11} {dense:>9} {params / dense:>7.4f} {bound:>7.4f}")

print("\nreduction layers (lambda*C back down to C) follow the same cost law")
print(f"{'C_in':>5} {'K*':>4} {'factorized':>11} {'dense':>9} {'ratio':>7}")
for c in (16, 32, 64, 128, 256):
    c_in = LAMBDA * c
    k = choose_kernel_size(c_in, c, R)
    params = sfconv_param_count(SFConvSpec(c_in, c, k, R))
    dense = c_in * c
    print(f"{c_in:>5} {k:>4} {params:>11} {dense:>9} {params / dense:>7.4f}")
