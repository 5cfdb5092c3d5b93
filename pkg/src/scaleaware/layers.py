"""Differentiable layers with explicit forward/backward pairs.

Every ``*_forward`` returns its output plus a :class:`Tape` holding what the
matching ``*_backward`` needs. A tape can be consumed once.

Coordinate convention for sampling maps: channel 0 holds x (columns), channel
1 holds y (rows), both normalized so that -1 is the first pixel centre and +1
the last (align-corners).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax, softmax

from .tensor import DTYPE, ShapeError, Rng, as_tensor

IGNORE_INDEX = 255


class TapeError(RuntimeError):
    pass


class Tape:
    """Saved forward state for exactly one backward call."""

    __slots__ = ("op", "saved", "_used")

    def __init__(self, op: str, **saved):
        self.op = op
        self.saved = saved
        self._used = False

    def consume(self, op: str) -> dict:
        if self.op != op:
            raise TapeError(f"tape from {self.op!r} passed to {op!r} backward")
        if self._used:
            raise TapeError(f"{op} tape already consumed")
        self._used = True
        saved, self.saved = self.saved, {}
        return saved


@dataclass
class ConvParams:
    """Convolution kernel (C_out, C_in, k_h, k_w), optional bias, grad buffers."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    grad_weight: np.ndarray = field(init=False)
    grad_bias: Optional[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        c_out, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel sizes must be odd, got {kh}x{kw}")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE).reshape(-1)
            if self.bias.shape != (c_out,):
                raise ShapeError(f"bias must have length {c_out}")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = None if self.bias is None else np.zeros_like(self.bias)

    @classmethod
    def init(cls, c_out: int, c_in: int, k: int, rng: Rng, std: float | None = None,
             bias: bool = True) -> "ConvParams":
        """He-normal weights unless ``std`` is given; zero bias."""
        if std is None:
            std = np.sqrt(2.0 / (c_in * k * k))
        w = rng.normal(0.0, std, (c_out, c_in, k, k)) if std > 0 else np.zeros((c_out, c_in, k, k))
        return cls(w, np.zeros(c_out) if bias else None)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def num_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)

    def zero_grad(self) -> None:
        self.grad_weight[...] = 0.0
        if self.grad_bias is not None:
            self.grad_bias[...] = 0.0

    def tensors(self) -> list[np.ndarray]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weight] if self.bias is None else [self.grad_weight, self.grad_bias]


# ---------------------------------------------------------------- convolution

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, params: ConvParams, stride: int = 1, padding: int | None = None):
    x = as_tensor(x)
    w = params.weight
    c_out, c_in, kh, kw = w.shape
    if padding is None:
        padding = kh // 2
    n, c, h, wd = x.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, kernel expects {c_in}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("convolution output would be empty")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if params.bias is not None:
        out = out + params.bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    tape = Tape("conv2d", win=win, in_shape=x.shape, stride=stride, padding=padding)
    return out, tape


def conv2d_backward(grad_out, tape: Tape, params: ConvParams) -> np.ndarray:
    s = tape.consume("conv2d")
    win, (n, c, h, wd) = s["win"], s["in_shape"]
    stride, pad = s["stride"], s["padding"]
    grad_out = as_tensor(grad_out)
    expected = (n, params.out_channels, win.shape[2], win.shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    kh, kw = params.weight.shape[2:]
    ho, wo = expected[2:]

    params.grad_weight += np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    if params.grad_bias is not None:
        params.grad_bias += grad_out.sum(axis=(0, 2, 3))

    gcols = np.tensordot(grad_out, params.weight, axes=([1], [0]))  # n, ho, wo, c, kh, kw
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])


# ------------------------------------------------------------ group norm

@dataclass
class NormParams:
    """Per-channel affine scale/shift of a group normalization, with grads."""

    gamma: np.ndarray
    beta: np.ndarray
    groups: int = 1
    grad_gamma: np.ndarray = field(init=False)
    grad_beta: np.ndarray = field(init=False)

    def __post_init__(self):
        self.gamma = np.ascontiguousarray(self.gamma, dtype=DTYPE).reshape(-1)
        self.beta = np.ascontiguousarray(self.beta, dtype=DTYPE).reshape(-1)
        if self.gamma.shape != self.beta.shape or self.gamma.size % self.groups:
            raise ShapeError("gamma/beta must match and divide evenly into groups")
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)

    @classmethod
    def init(cls, channels: int, max_groups: int = 8) -> "NormParams":
        return cls(np.ones(channels), np.zeros(channels), math.gcd(channels, max_groups))

    @property
    def channels(self) -> int:
        return self.gamma.size

    def num_params(self) -> int:
        return 2 * self.gamma.size

    def zero_grad(self) -> None:
        self.grad_gamma[...] = 0.0
        self.grad_beta[...] = 0.0

    def tensors(self) -> list[np.ndarray]:
        return [self.gamma, self.beta]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_gamma, self.grad_beta]


def group_norm_forward(x, params: NormParams, eps: float = 1e-5):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if c != params.channels:
        raise ShapeError(f"input has {c} channels, norm expects {params.channels}")
    xg = x.reshape(n, params.groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mean) * inv).reshape(n, c, h, w)
    out = xhat * params.gamma[None, :, None, None] + params.beta[None, :, None, None]
    return out, Tape("group_norm", xhat=xhat, inv=inv)


def group_norm_backward(grad_out, tape: Tape, params: NormParams) -> np.ndarray:
    s = tape.consume("group_norm")
    xhat, inv = s["xhat"], s["inv"]
    g = as_tensor(grad_out)
    if g.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {g.shape} != {xhat.shape}")
    params.grad_gamma += (g * xhat).sum(axis=(0, 2, 3))
    params.grad_beta += g.sum(axis=(0, 2, 3))
    n = g.shape[0]
    dxhat = (g * params.gamma[None, :, None, None]).reshape(n, params.groups, -1)
    xh = xhat.reshape(n, params.groups, -1)
    dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
    return dx.reshape(g.shape)


# ---------------------------------------------------------- pointwise layers

def sigmoid_forward(x):
    y = expit(as_tensor(x))
    return y, Tape("sigmoid", y=y)


def sigmoid_backward(grad_out, tape: Tape) -> np.ndarray:
    y = tape.consume("sigmoid")["y"]
    return as_tensor(grad_out) * y * (1.0 - y)


def relu_forward(x):
    x = as_tensor(x)
    return np.maximum(x, 0.0), Tape("relu", mask=x > 0)


def relu_backward(grad_out, tape: Tape) -> np.ndarray:
    return as_tensor(grad_out) * tape.consume("relu")["mask"]


def clamp_forward(x, lo: float = -1.0, hi: float = 1.0):
    """Clamp with the usual subgradient: pass-through strictly inside (lo, hi)."""
    x = as_tensor(x)
    return np.clip(x, lo, hi), Tape("clamp", inside=(x > lo) & (x < hi))


def clamp_backward(grad_out, tape: Tape) -> np.ndarray:
    return as_tensor(grad_out) * tape.consume("clamp")["inside"]


# -------------------------------------------------------- bilinear sampling

def identity_grid(n: int, h: int, w: int) -> np.ndarray:
    """Normalized grid with (-1, -1) at the top-left and (1, 1) at the bottom-right pixel."""
    if h < 2 or w < 2:
        raise ShapeError(f"identity grid needs h, w >= 2, got {h}x{w}")
    xs = 2.0 * np.arange(w) / (w - 1) - 1.0
    ys = 2.0 * np.arange(h) / (h - 1) - 1.0
    grid = np.empty((n, 2, h, w), dtype=DTYPE)
    grid[:, 0] = xs[None, None, :]
    grid[:, 1] = ys[None, :, None]
    return grid


def _snap(p: np.ndarray, size: int) -> np.ndarray:
    # round-off from the normalize/denormalize round trip must not move
    # identity-grid samples off their pixel
    r = np.rint(p)
    return np.where(np.abs(p - r) <= 8 * np.finfo(DTYPE).eps * max(size, 1), r, p)


def _corners(grid: np.ndarray, h: int, w: int):
    px = _snap((grid[:, 0] + 1.0) * 0.5 * (w - 1), w)
    py = _snap((grid[:, 1] + 1.0) * 0.5 * (h - 1), h)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(valid, yi * w + xi, 0)
            corners.append((dx, dy, idx, valid, wx, wy))
    return corners


def bilinear_sample_forward(x, grid):
    """Sample ``x`` (n, c, h, w) at normalized coordinates ``grid`` (n, 2, h, w).

    Neighbours falling outside the image contribute zero.
    """
    x = as_tensor(x)
    grid = as_tensor(grid)
    n, c, h, w = x.shape
    if grid.shape != (n, 2, h, w):
        raise ShapeError(f"grid shape {grid.shape} does not match input {(n, 2, h, w)}")
    if np.any(grid < -1.0) or np.any(grid > 1.0):
        raise ValueError("sampling map entries must lie in [-1, 1]; clamp first")
    flat = x.reshape(n, c, h * w)
    corners = _corners(grid, h, w)
    out = np.zeros((n, c, h * w), dtype=DTYPE)
    vals = []
    for dx, dy, idx, valid, wx, wy in corners:
        v = np.take_along_axis(flat, idx.reshape(n, 1, h * w), axis=2) * valid.reshape(n, 1, -1)
        vals.append(v)
        out += v * (wx * wy).reshape(n, 1, -1)
    tape = Tape("bilinear", corners=corners, vals=vals, shape=x.shape)
    return out.reshape(n, c, h, w), tape


def bilinear_sample_backward(grad_out, tape: Tape):
    """Return (grad_input, grad_grid); grad_grid is in normalized units."""
    s = tape.consume("bilinear")
    n, c, h, w = s["shape"]
    g = as_tensor(grad_out)
    if g.shape != (n, c, h, w):
        raise ShapeError(f"grad_out shape {g.shape} != {(n, c, h, w)}")
    g = g.reshape(n, c, h * w)
    size = n * c * h * w
    base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
    grad_in = np.zeros(size, dtype=DTYPE)
    gpx = np.zeros((n, h * w), dtype=DTYPE)
    gpy = np.zeros((n, h * w), dtype=DTYPE)
    for (dx, dy, idx, valid, wx, wy), v in zip(s["corners"], s["vals"]):
        wgt = (wx * wy * valid).reshape(n, 1, -1)
        target = (base + idx.reshape(n, 1, -1)).ravel()
        grad_in += np.bincount(target, weights=(g * wgt).ravel(), minlength=size)
        # d b(p, q) / dp is -1 for the lower neighbour and +1 for the upper one
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        gv = (g * v).sum(axis=1)
        gpx += gv * (sx * wy).reshape(n, -1)
        gpy += gv * (sy * wx).reshape(n, -1)
    grad_grid = np.empty((n, 2, h, w), dtype=DTYPE)
    grad_grid[:, 0] = gpx.reshape(n, h, w) * (0.5 * (w - 1))
    grad_grid[:, 1] = gpy.reshape(n, h, w) * (0.5 * (h - 1))
    return grad_in.reshape(n, c, h, w), grad_grid


# ------------------------------------------------------------------ upsample

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) align-corners linear interpolation weights."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def upsample_bilinear_forward(x, out_h: int, out_w: int):
    x = as_tensor(x)
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"cannot shrink {h}x{w} to {out_h}x{out_w}")
    mh, mw = _interp_matrix(h, out_h), _interp_matrix(w, out_w)
    out = np.einsum("ih,nchw,jw->ncij", mh, x, mw, optimize=True)
    return np.ascontiguousarray(out), Tape("upsample", mh=mh, mw=mw)


def upsample_bilinear_backward(grad_out, tape: Tape) -> np.ndarray:
    s = tape.consume("upsample")
    g = as_tensor(grad_out)
    return np.ascontiguousarray(np.einsum("ih,ncij,jw->nchw", s["mh"], g, s["mw"], optimize=True))


# ------------------------------------------------------------ loss function

def weighted_cross_entropy(logits, labels, class_weights, ignore_index: int = IGNORE_INDEX):
    """Mean over non-ignored pixels of ``-w[y] * log softmax(logits)[y]``.

    Returns ``(loss, grad_logits)``; the gradient shares the pixel-count
    normalization of the loss.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    cw = np.asarray(class_weights, dtype=DTYPE)
    if cw.shape != (k,) or np.any(cw <= 0):
        raise ValueError("class_weights must be a positive vector of length num_classes")
    keep = labels != ignore_index
    if np.any((labels[keep] < 0) | (labels[keep] >= k)):
        raise ValueError("label out of range")
    count = int(keep.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad
    safe = np.where(keep, labels, 0)
    logp = log_softmax(logits, axis=1)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    pix_w = cw[safe] * keep
    loss = float(-(pix_w * picked).sum() / count)
    prob = softmax(logits, axis=1)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (prob - onehot) * (pix_w / count)[:, None]
    return loss, grad
