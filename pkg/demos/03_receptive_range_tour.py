#!/usr/bin/env python3
"""Receptive ranges of channel-mixing patterns.

The receptive range of an output neuron is the number of input channels it
can see, directly or through hidden neurons. Dense mixing sees everything
but pays full price; grouped and windowed mixings are cheap but blind to
most channels. The two-stage factorized pattern is the interesting case:
its stage-1 windows tile the inputs and every stage-2 output reads one
hidden channel across all window positions, so each output still reaches
every input while the weight count collapses.
"""

import numpy as np

from falconnet import (ChannelPattern, SFConvSpec, choose_kernel_size, receptive_range,
                       sfconv_param_count)

C = 16

patterns = [
    ("dense", ChannelPattern.dense(C), C * C),
    ("group (g=4)", ChannelPattern.group(C, 4), C * C // 4),
    ("channel-wise (k=3)", ChannelPattern.channel_wise(C, 3), C * 3),
]
k = choose_kernel_size(C, C, 2)
spec = SFConvSpec(C, C, k, 2)
patterns.append((f"factorized (K={k}, R=2)", ChannelPattern.sf(spec),
                 sfconv_param_count(spec)))

print(f"{C} input channels, {C} output channels")
print(f"{'pattern':<22} {'weights':>8} {'range':>14}")
for name, pattern, weights in patterns:
    ranges = receptive_range(pattern)
    span = (f"{int(ranges.min())}" if ranges.min() == ranges.max()
            else f"{int(ranges.min())}..{int(ranges.max())}")
    full = " (full)" if np.all(ranges == C) else ""
    print(f"{name:<22} {weights:>8} {span:>8}{full}")

print("\nthe factorized pattern keeps the full range at every width:")
for c in (8, 16, 32, 64):
    k = choose_kernel_size(c, 6 * c, 2)
    spec = SFConvSpec(c, 6 * c, k, 2)
    ranges = receptive_range(ChannelPattern.sf(spec))
    print(f"  C={c:<3} K={k:<3} all {spec.c_out} outputs see "
          f"{int(ranges.min())}/{c} inputs")
