"""Scale-aware module: learned per-pixel re-sampling with a residual sigmoid merge.

Forward pass, for input ``x``::

    offsets = conv_a(x) + conv_b(x)                # (n, 2, h, w), no bias
    grid    = clamp(identity_grid + offsets, -1, 1)
    r       = bilinear_sample(x, grid)
    out     = x + x * sigmoid(r)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .tensor import Rng, ShapeError, as_tensor

INIT_STD = 1e-3


@dataclass
class SamParams:
    conv_a: L.ConvParams
    conv_b: L.ConvParams
    height: int
    width: int

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ShapeError(f"scale-aware module needs h, w >= 2, got {self.height}x{self.width}")
        self._grid = L.identity_grid(1, self.height, self.width)

    @property
    def channels(self) -> int:
        return self.conv_a.in_channels

    @property
    def base_grid(self) -> np.ndarray:
        return self._grid.copy()

    def convs(self) -> list[L.ConvParams]:
        return [self.conv_a, self.conv_b]

    def num_params(self) -> int:
        return self.conv_a.num_params() + self.conv_b.num_params()


def sam_init(channels: int, h: int, w: int, rng: Rng, std: float = INIT_STD) -> SamParams:
    """Two 3x3 C->2 offset convolutions with N(0, std^2) weights and no bias."""
    conv_a = L.ConvParams.init(2, channels, 3, rng, std=std, bias=False)
    conv_b = L.ConvParams.init(2, channels, 3, rng, std=std, bias=False)
    return SamParams(conv_a, conv_b, h, w)


def sampling_map(x, params: SamParams):
    """Pre-clamp and clamped sampling maps for ``x`` (no tapes)."""
    x = as_tensor(x)
    off = (L.conv2d_forward(x, params.conv_a)[0] + L.conv2d_forward(x, params.conv_b)[0])
    pre = params._grid + off
    return pre, np.clip(pre, -1.0, 1.0)


def sam_forward(x, params: SamParams):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if (c, h, w) != (params.channels, params.height, params.width):
        raise ShapeError(f"input {x.shape[1:]} does not match module "
                         f"{(params.channels, params.height, params.width)}")
    off_a, tape_a = L.conv2d_forward(x, params.conv_a)
    off_b, tape_b = L.conv2d_forward(x, params.conv_b)
    grid, tape_clamp = L.clamp_forward(params._grid + off_a + off_b)
    r, tape_sample = L.bilinear_sample_forward(x, grid)
    z, tape_sig = L.sigmoid_forward(r)
    out = x + x * z
    tape = L.Tape("sam", x=x, z=z, grid=grid, conv_a=tape_a, conv_b=tape_b,
                  clamp=tape_clamp, sample=tape_sample, sigmoid=tape_sig)
    return out, tape


def sam_backward(grad_out, tape: L.Tape, params: SamParams, map_grad: bool = True) -> np.ndarray:
    """Backpropagate through the module, accumulating offset-conv weight grads.

    ``map_grad=False`` cuts the path through the sampling coordinates.
    """
    s = tape.consume("sam")
    g = as_tensor(grad_out)
    x, z = s["x"], s["z"]
    grad_x = g * (1.0 + z)
    g_r = L.sigmoid_backward(g * x, s["sigmoid"])
    g_sampled, g_grid = L.bilinear_sample_backward(g_r, s["sample"])
    grad_x += g_sampled
    if map_grad:
        g_off = L.clamp_backward(g_grid, s["clamp"])
        grad_x += L.conv2d_backward(g_off, s["conv_a"], params.conv_a)
        grad_x += L.conv2d_backward(g_off, s["conv_b"], params.conv_b)
    return grad_x
