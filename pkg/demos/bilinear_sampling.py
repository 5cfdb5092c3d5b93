"""
Sampling a feature map through a coordinate grid
=================================================

A resampling grid holds, for every output pixel, the normalised (x, y)
position to read from. -1 and +1 land on the centres of the first and last
pixels. The identity grid copies the input exactly; shifting it by a
fraction of a pixel interpolates between neighbours.
"""

import numpy as np

from scaleaware import layers as L

# a 1x3 row, repeated on a second row so the vertical axis is defined too
x = np.tile(np.array([10.0, 20.0, 30.0]), (1, 1, 2, 1))

grid = L.identity_grid(1, 2, 3)
print("identity grid x-coordinates:\n", grid[0, 0])
out, _ = L.bilinear_sample_forward(x, grid)
print("identity sampling reproduces the input:", np.array_equal(out, x))

# normalised x = 0.5 is pixel column 1.5, halfway between 20 and 30
grid[0, 0, 0, 0], grid[0, 1, 0, 0] = 0.5, -1.0
out, tape = L.bilinear_sample_forward(x, grid)
print("value at column 1.5:", out[0, 0, 0, 0])

# backward: the input gradient splits between the two neighbours, and the
# grid gradient is the local slope (30 - 20) times (W - 1) / 2
g = np.zeros_like(out)
g[0, 0, 0, 0] = 1.0
g_in, g_grid = L.bilinear_sample_backward(g, tape)
print("grad wrt input row 0:", g_in[0, 0, 0])
print("grad wrt grid x at that pixel:", g_grid[0, 0, 0, 0], "(expected", 10 * (3 - 1) / 2, ")")

###############################################################################
# Points that fall outside the map read zeros for the missing neighbours,
# which is why the module clamps grids into [-1, 1] before sampling.

sq = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
grid = L.identity_grid(1, 2, 2)
grid[0, :, 0, 0] = 0.0
print("centre of [[0, 1], [2, 3]]:", L.bilinear_sample_forward(sq, grid)[0][0, 0, 0, 0])
