"""Central finite-difference checks for every hand-written backward pass.

Each check builds a small random problem, reduces the op's output to a scalar
``sum(out * R)`` with a fixed random projection ``R`` (or uses the loss
directly), and compares analytic gradients with ``(f(x+eps) - f(x-eps)) / 2eps``
at randomly chosen coordinates.

Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
coordinates with vanishing gradient from dividing by ~0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import layers as L
from . import network as N
from . import sam as S
from .tensor import Rng

EPS = 1e-5
REL_FLOOR = 1e-6
KINK_MARGIN = 1e-3
LAYER_TOL = 1e-5
END_TO_END_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    probes: int
    tol: float
    excluded: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} max_rel_err={self.max_rel_error:.3e}  "
                f"tol={self.tol:.0e}  probes={self.probes}  excluded={self.excluded}")


def rel_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_partial(f: Callable[[], float], x: np.ndarray, idx: int, eps: float = EPS):
    """Central, forward and backward differences of ``f`` along ``x.flat[idx]``."""
    old = x.flat[idx]
    x.flat[idx] = old + eps
    fp = f()
    x.flat[idx] = old - eps
    fm = f()
    x.flat[idx] = old
    f0 = f()
    return (fp - fm) / (2 * eps), (fp - f0) / eps, (f0 - fm) / eps


def compare(f: Callable[[], float], tensors: Iterable[tuple[np.ndarray, np.ndarray]],
            rng: Rng, probes: int, eps: float = EPS, floor: float = REL_FLOOR,
            kink_guard: Optional[float] = None) -> tuple[float, int, int]:
    """Probe ``probes`` coordinates of each (value, analytic_grad) pair.

    With ``kink_guard`` set, a coordinate whose one-sided differences disagree
    by more than ``kink_guard`` (relative) may straddle a non-differentiable
    point within +-eps; it is excluded and a fresh coordinate is drawn in its
    place. Returns (max_rel_error, used, excluded).
    """
    worst, used, excluded = 0.0, 0, 0
    for x, grad in tensors:
        order = rng.generator.permutation(x.size)
        want = min(probes, x.size)
        got = 0
        for idx in order:
            if got == want:
                break
            central, fwd, bwd = numeric_partial(f, x, int(idx), eps)
            if kink_guard is not None and rel_error(fwd, bwd, floor) > kink_guard:
                excluded += 1
                continue
            worst = max(worst, rel_error(float(grad.flat[idx]), central, floor))
            got += 1
        used += got
    return worst, used, excluded


def _projection(shape, rng: Rng) -> np.ndarray:
    return rng.normal(0.0, 1.0, shape)


# ----------------------------------------------------------- kink handling

def coordinate_kink_distance(pre_grid: np.ndarray) -> np.ndarray:
    """Distance of every sampling coordinate to a point where sampling is not smooth.

    Kinks sit at integer pixel positions (inside the clamp range) and at the
    clamp boundaries +-1 of the normalized pre-clamp value.
    """
    _, _, h, w = pre_grid.shape
    d_clamp = np.abs(np.abs(pre_grid) - 1.0)
    scale = np.array([(w - 1) / 2, (h - 1) / 2]).reshape(1, 2, 1, 1)
    pix = (np.clip(pre_grid, -1, 1) + 1.0) * scale
    d_int = np.abs(pix - np.rint(pix)) / scale
    inside = np.abs(pre_grid) < 1.0
    return np.where(inside, np.minimum(d_int, d_clamp), d_clamp)


def _grid_away_from_kinks(shape, rng: Rng, margin: float = KINK_MARGIN, spread: float = 0.9):
    n, _, h, w = shape
    base = L.identity_grid(n, h, w)
    while True:
        grid = np.clip(base + rng.uniform(-0.3, 0.3, base.shape), -spread, spread)
        if coordinate_kink_distance(grid).min() >= margin:
            return grid


# ------------------------------------------------------------- layer checks

def check_conv2d(rng: Rng, probes: int = 50, stride: int = 1, tol: float = LAYER_TOL) -> CheckResult:
    x = rng.normal(0, 1, (1, 2, 5, 5))
    p = L.ConvParams(rng.normal(0, 1, (3, 2, 3, 3)), rng.normal(0, 1, 3))
    out, tape = L.conv2d_forward(x, p, stride=stride)
    r = _projection(out.shape, rng)
    gx = L.conv2d_backward(r, tape, p)

    def f():
        return float((L.conv2d_forward(x, p, stride=stride)[0] * r).sum())

    err, used, exc = compare(f, [(x, gx), (p.weight, p.grad_weight), (p.bias, p.grad_bias)], rng, probes)
    return CheckResult(f"conv2d(stride={stride})", err, used, tol, exc)


def check_sigmoid(rng: Rng, probes: int = 50, tol: float = LAYER_TOL) -> CheckResult:
    x = rng.normal(0, 2, (1, 2, 5, 5))
    out, tape = L.sigmoid_forward(x)
    r = _projection(out.shape, rng)
    gx = L.sigmoid_backward(r, tape)
    err, used, exc = compare(lambda: float((L.sigmoid_forward(x)[0] * r).sum()), [(x, gx)], rng, probes)
    return CheckResult("sigmoid", err, used, tol, exc)


def check_bilinear(rng: Rng, probes: int = 50, tol: float = LAYER_TOL) -> CheckResult:
    """Input and map gradients; the map is drawn at least KINK_MARGIN from every kink."""
    x = rng.normal(0, 1, (1, 2, 6, 6))
    grid = _grid_away_from_kinks(x.shape[:1] + (2,) + x.shape[2:], rng)
    out, tape = L.bilinear_sample_forward(x, grid)
    r = _projection(out.shape, rng)
    gx, gg = L.bilinear_sample_backward(r, tape)

    def f():
        return float((L.bilinear_sample_forward(x, grid)[0] * r).sum())

    err, used, exc = compare(f, [(x, gx), (grid, gg)], rng, probes)
    return CheckResult("bilinear_sample", err, used, tol, exc)


def check_upsample(rng: Rng, probes: int = 50, tol: float = LAYER_TOL) -> CheckResult:
    x = rng.normal(0, 1, (1, 2, 5, 6))
    out, tape = L.upsample_bilinear_forward(x, 9, 11)
    r = _projection(out.shape, rng)
    gx = L.upsample_bilinear_backward(r, tape)
    f = lambda: float((L.upsample_bilinear_forward(x, 9, 11)[0] * r).sum())
    err, used, exc = compare(f, [(x, gx)], rng, probes)
    return CheckResult("upsample_bilinear", err, used, tol, exc)


def check_cross_entropy(rng: Rng, probes: int = 50, tol: float = LAYER_TOL) -> CheckResult:
    k = 4
    logits = rng.normal(0, 2, (2, k, 4, 4))
    labels = rng.integers(0, k, (2, 4, 4))
    labels[0, 0, :2] = L.IGNORE_INDEX
    w = rng.uniform(0.5, 3.0, k)
    _, g = L.weighted_cross_entropy(logits, labels, w)
    f = lambda: L.weighted_cross_entropy(logits, labels, w)[0]
    err, used, exc = compare(f, [(logits, g)], rng, probes)
    return CheckResult("weighted_cross_entropy", err, used, tol, exc)


def check_group_norm(rng: Rng, probes: int = 50, tol: float = LAYER_TOL) -> CheckResult:
    x = rng.normal(0, 1, (2, 4, 3, 3))
    p = L.NormParams(rng.normal(1, 0.3, 4), rng.normal(0, 0.3, 4), groups=2)
    out, tape = L.group_norm_forward(x, p)
    r = _projection(out.shape, rng)
    gx = L.group_norm_backward(r, tape, p)
    f = lambda: float((L.group_norm_forward(x, p)[0] * r).sum())
    err, used, exc = compare(f, [(x, gx), (p.gamma, p.grad_gamma), (p.beta, p.grad_beta)], rng, probes)
    return CheckResult("group_norm", err, used, tol, exc)


def check_relu(rng: Rng, probes: int = 50, tol: float = LAYER_TOL) -> CheckResult:
    x = rng.normal(0, 1, (1, 2, 5, 5))
    x[np.abs(x) < KINK_MARGIN] = 0.5
    out, tape = L.relu_forward(x)
    r = _projection(out.shape, rng)
    gx = L.relu_backward(r, tape)
    err, used, exc = compare(lambda: float((L.relu_forward(x)[0] * r).sum()), [(x, gx)], rng, probes)
    return CheckResult("relu", err, used, tol, exc)


# ------------------------------------------------------------ module checks

def sam_case(rng: Rng, shape=(1, 4, 8, 8), std: float = 0.05, margin: float = KINK_MARGIN):
    """Random input and weights whose sampling map stays clear of kinks."""
    n, c, h, w = shape
    while True:
        x = rng.uniform(-1, 1, shape)
        params = S.sam_init(c, h, w, rng, std=std)
        pre, _ = S.sampling_map(x, params)
        if coordinate_kink_distance(pre).min() >= margin:
            return x, params


def check_sam(rng: Rng, probes: int = 50, tol: float = END_TO_END_TOL) -> CheckResult:
    x, params = sam_case(rng)
    out, tape = S.sam_forward(x, params)
    r = _projection(out.shape, rng)
    gx = S.sam_backward(r, tape, params)
    f = lambda: float((S.sam_forward(x, params)[0] * r).sum())
    pairs = [(x, gx), (params.conv_a.weight, params.conv_a.grad_weight),
             (params.conv_b.weight, params.conv_b.grad_weight)]
    err, used, exc = compare(f, pairs, rng, probes)
    return CheckResult("sam_block", err, used, tol, exc)


def check_attention(rng: Rng, probes: int = 50, tol: float = LAYER_TOL) -> CheckResult:
    c = 4
    x = rng.uniform(-1, 1, (1, c, 8, 8))
    params = N.attn_init(c, rng, std=0.2)
    out, tape = N.spatial_attention_control_forward(x, params)
    r = _projection(out.shape, rng)
    gx = N.spatial_attention_control_backward(r, tape, params)
    f = lambda: float((N.spatial_attention_control_forward(x, params)[0] * r).sum())
    pairs = [(x, gx), (params.conv_a.weight, params.conv_a.grad_weight),
             (params.conv_b.weight, params.conv_b.grad_weight)]
    err, used, exc = compare(f, pairs, rng, probes)
    return CheckResult("attention_control", err, used, tol, exc)


def check_network(rng: Rng, variant: str = "baseline", size: int = 32, probes: int = 60,
                  channels=(2, 2, 2, 2, 2), tol: float = END_TO_END_TOL,
                  block_std: float = 0.05) -> CheckResult:
    """Whole-network check on random parameters and the input.

    ReLU and sampling kinks cannot be placed away from probes by construction
    here, so the one-sided-difference guard excludes coordinates that straddle
    one.
    """
    cfg = N.NetworkConfig(variant=variant, stage_channels=channels, num_classes=3,
                          input_size=(size, size))
    net = N.build(cfg, rng)
    for b in net.blocks:
        if b is not None:
            for conv in b.convs():
                conv.weight[...] = rng.normal(0, block_std, conv.weight.shape)
    for p in net.params():
        for t in p.tensors()[1:]:
            t += rng.normal(0, 0.1, t.shape)
    x = rng.uniform(-1, 1, (1, 3, size, size))
    labels = rng.integers(0, 3, (1, size, size))
    w = np.array([1.0, 2.0, 0.5])

    logits, tape = N.forward(net, x)
    _, g = L.weighted_cross_entropy(logits, labels, w)
    net.zero_grad()
    gx = N.backward(net, g, tape)

    def f():
        return L.weighted_cross_entropy(N.forward(net, x)[0], labels, w)[0]

    flat_params = [(t, gr) for t, gr in zip(net.tensors(), net.grads())]
    sizes = np.array([t.size for t, _ in flat_params], dtype=float)
    # spread probes over all parameter tensors proportionally, at least one each
    worst, used, excluded = 0.0, 0, 0
    picks = rng.generator.choice(len(flat_params), size=probes, p=sizes / sizes.sum())
    for i in range(len(flat_params)):
        k = int((picks == i).sum())
        if k:
            e, u, x_ = compare(f, [flat_params[i]], rng, k, kink_guard=tol)
            worst, used, excluded = max(worst, e), used + u, excluded + x_
    e, u, x_ = compare(f, [(x, gx)], rng, max(10, probes // 6), kink_guard=tol)
    worst, used, excluded = max(worst, e), used + u, excluded + x_
    return CheckResult(f"network[{variant},{size}x{size}]", worst, used, tol, excluded)


SCOPES = {
    "layer": (check_conv2d, lambda r, probes=50: check_conv2d(r, probes, stride=2),
              check_sigmoid, check_relu, check_group_norm, check_bilinear, check_upsample, check_cross_entropy),
    "sam": (check_sam, check_attention),
    "network": (lambda r, probes=60: check_network(r, "baseline", 32, probes),
                lambda r, probes=60: check_network(r, "sam_multi", 64, probes),
                lambda r, probes=60: check_network(r, "attn_multi_control", 32, probes)),
}


def run_scope(scope: str, seed: int = 0, trials: int = 1) -> list[CheckResult]:
    """Run every check of ``scope`` (``layer``, ``sam``, ``network`` or ``all``)."""
    scopes = list(SCOPES) if scope == "all" else [scope]
    results = []
    for t in range(trials):
        rng = Rng(seed + t)
        for sc in scopes:
            for check in SCOPES[sc]:
                results.append(check(rng))
    return results
