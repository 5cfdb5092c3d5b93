"""
Inside one scale-aware block
============================

Two small 3x3 convolutions predict an (x, y) offset per pixel. The offsets
are added to the identity grid and clamped to [-1, 1]; features are sampled
through that grid, squashed with a sigmoid, and used as a multiplicative
gate on the input with a residual path: out = x + x * sigmoid(sample(x)).
"""

import numpy as np
from scipy.special import expit

from scaleaware import sam as S
from scaleaware.tensor import Rng

rng = Rng(0)
x = rng.uniform(-1, 1, (1, 4, 16, 16))

# with the offset convolutions zeroed the block is an elementwise function
params = S.sam_init(4, 16, 16, rng, std=0.0)
out, _ = S.sam_forward(x, params)
print("zero offsets, max |out - (x + x*sigmoid(x))|:", np.abs(out - (x + x * expit(x))).max())

# freshly initialised weights move the grid only slightly
params = S.sam_init(4, 16, 16, rng)
pre, grid = S.sampling_map(x, params)
shift_px = np.abs(grid - params.base_grid) * (16 - 1) / 2
print(f"fresh init: mean shift {shift_px.mean():.3f} px, max {shift_px.max():.3f} px")
out, _ = S.sam_forward(x, params)
print("deviation from the zero-offset output:", np.abs(out - (x + x * expit(x))).max())

###############################################################################
# Large weights push the raw grid far outside the image; the clamp keeps
# every sampling position on the map.

for conv in params.convs():
    conv.weight *= 1000
pre, grid = S.sampling_map(x, params)
print(f"x1000 weights: raw grid range [{pre.min():.1f}, {pre.max():.1f}], "
      f"clamped [{grid.min():.1f}, {grid.max():.1f}]")

###############################################################################
# The block is trainable end to end: gradients reach the input and both
# offset convolutions.

params = S.sam_init(4, 16, 16, rng, std=0.05)
out, tape = S.sam_forward(x, params)
grad_x = S.sam_backward(np.ones_like(out), tape, params)
print("|grad x| mean:", np.abs(grad_x).mean(),
      " |grad conv_a| sum:", np.abs(params.conv_a.grad_weight).sum())
