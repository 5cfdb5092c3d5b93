"""FCN8s-style segmentation network with optional scale-aware / attention blocks.

Five stages, each ``conv3x3 -> norm -> relu -> conv3x3/stride 2 -> norm -> relu``,
so the deepest features sit at 1/32 of the input. The group norms (on by
default) keep the residual gain of stacked blocks from compounding. Stage 5 is scored with a 1x1
convolution, upsampled onto stage 4 and fused with its score, then the same
with stage 3, and finally upsampled to the input size.

Block placement per variant:

==========================  =====================================
``baseline``                none
``sam_single``              scale-aware module after stage 5 only
``sam_multi``               scale-aware module after every stage
``attn_single_control``     attention control after stage 5 only
``attn_multi_control``      attention control after every stage
==========================  =====================================
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import layers as L
from .imageio import write_pgm
from .sam import INIT_STD, SamParams, sam_backward, sam_forward, sam_init
from .tensor import Rng, ShapeError, as_tensor, read_tensor, write_tensor

VARIANTS = ("baseline", "sam_single", "sam_multi", "attn_single_control", "attn_multi_control")
NUM_STAGES = 5
_LEN = struct.Struct("<Q")


@dataclass
class NetworkConfig:
    variant: str = "baseline"
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    num_classes: int = 6
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    norm: bool = True  # group norm after every backbone conv

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.stage_channels) != NUM_STAGES or min(self.stage_channels) < 1:
            raise ValueError("stage_channels must list 5 positive widths")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ValueError("input_size must be (h, w)")

    @property
    def block_kind(self) -> Optional[str]:
        if self.variant.startswith("sam"):
            return "sam"
        if self.variant.startswith("attn"):
            return "attn"
        return None

    @property
    def block_stages(self) -> tuple[int, ...]:
        if self.variant == "baseline":
            return ()
        return tuple(range(NUM_STAGES)) if "multi" in self.variant else (NUM_STAGES - 1,)

    def stage_sizes(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        sizes = []
        for _ in range(NUM_STAGES):
            h, w = (h + 1) // 2, (w + 1) // 2
            sizes.append((h, w))
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["input_size"] = list(self.input_size)
        return d


@dataclass
class AttnParams:
    """Spatial-attention control: SAM's two offset convolutions, no re-sampling."""

    conv_a: L.ConvParams
    conv_b: L.ConvParams

    def convs(self) -> list[L.ConvParams]:
        return [self.conv_a, self.conv_b]

    def num_params(self) -> int:
        return self.conv_a.num_params() + self.conv_b.num_params()


def attn_init(channels: int, rng: Rng, std: float = INIT_STD) -> AttnParams:
    return AttnParams(L.ConvParams.init(2, channels, 3, rng, std=std, bias=False),
                      L.ConvParams.init(2, channels, 3, rng, std=std, bias=False))


def spatial_attention_control_forward(x, params: AttnParams):
    """``x + x * A`` where A is the channel mean of ``sigmoid(conv_a(x) + conv_b(x))``."""
    x = as_tensor(x)
    if x.shape[1] != params.conv_a.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, block expects {params.conv_a.in_channels}")
    a, tape_a = L.conv2d_forward(x, params.conv_a)
    b, tape_b = L.conv2d_forward(x, params.conv_b)
    s, tape_sig = L.sigmoid_forward(a + b)
    att = s.mean(axis=1, keepdims=True)
    out = x + x * att
    return out, L.Tape("attn", x=x, att=att, conv_a=tape_a, conv_b=tape_b, sigmoid=tape_sig)


def spatial_attention_control_backward(grad_out, tape: L.Tape, params: AttnParams) -> np.ndarray:
    s = tape.consume("attn")
    g = as_tensor(grad_out)
    x, att = s["x"], s["att"]
    grad_x = g * (1.0 + att)
    g_att = (g * x).sum(axis=1, keepdims=True)
    g_s = np.repeat(g_att / 2.0, 2, axis=1)
    g_pre = L.sigmoid_backward(g_s, s["sigmoid"])
    grad_x += L.conv2d_backward(g_pre, s["conv_a"], params.conv_a)
    grad_x += L.conv2d_backward(g_pre, s["conv_b"], params.conv_b)
    return grad_x


Block = Union[SamParams, AttnParams]
Params = Union[L.ConvParams, L.NormParams]


@dataclass
class Network:
    config: NetworkConfig
    stages: list[tuple[L.ConvParams, L.ConvParams]]
    blocks: list[Optional[Block]]
    score: dict[int, L.ConvParams] = field(default_factory=dict)
    norms: list[tuple[L.NormParams, L.NormParams]] = field(default_factory=list)

    def named_params(self) -> list[tuple[str, Params]]:
        """Every parameter container in declaration (= checkpoint) order."""
        out = []
        for s, (c1, c2) in enumerate(self.stages):
            out.append((f"stage{s + 1}.conv1", c1))
            if self.norms:
                out.append((f"stage{s + 1}.norm1", self.norms[s][0]))
            out.append((f"stage{s + 1}.conv2", c2))
            if self.norms:
                out.append((f"stage{s + 1}.norm2", self.norms[s][1]))
            block = self.blocks[s]
            if block is not None:
                kind = "sam" if isinstance(block, SamParams) else "attn"
                out += [(f"stage{s + 1}.{kind}.conv_a", block.conv_a),
                        (f"stage{s + 1}.{kind}.conv_b", block.conv_b)]
        for s in (5, 4, 3):
            out.append((f"score{s}", self.score[s]))
        return out

    def params(self) -> list[Params]:
        return [p for _, p in self.named_params()]

    def num_params(self) -> int:
        return sum(p.num_params() for p in self.params())

    def num_blocks(self, kind: type) -> int:
        return sum(isinstance(b, kind) for b in self.blocks)

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def tensors(self) -> list[np.ndarray]:
        return [t for p in self.params() for t in p.tensors()]

    def grads(self) -> list[np.ndarray]:
        return [g for p in self.params() for g in p.grads()]

    def forward(self, batch):
        return forward(self, batch)

    def backward(self, grad_logits, tape):
        return backward(self, grad_logits, tape)


def build(config: NetworkConfig, rng: Rng) -> Network:
    sizes = config.stage_sizes()
    stages, blocks = [], []
    c_in = config.in_channels
    for s, c in enumerate(config.stage_channels):
        stages.append((L.ConvParams.init(c, c_in, 3, rng), L.ConvParams.init(c, c, 3, rng)))
        c_in = c
    k = config.num_classes
    score = {s: L.ConvParams.init(k, config.stage_channels[s - 1], 1, rng,
                                  std=np.sqrt(1.0 / config.stage_channels[s - 1]))
             for s in (5, 4, 3)}
    # blocks draw last so every variant shares backbone and score weights per seed
    for s, c in enumerate(config.stage_channels):
        if s not in config.block_stages:
            blocks.append(None)
        elif config.block_kind == "sam":
            h, w = sizes[s]
            if h < 2 or w < 2:
                raise ValueError(f"input {config.input_size} leaves stage {s + 1} at {h}x{w}; "
                                 "scale-aware blocks need at least 2x2")
            blocks.append(sam_init(c, h, w, rng))
        else:
            blocks.append(attn_init(c, rng))
    norms = ([(L.NormParams.init(c), L.NormParams.init(c)) for c in config.stage_channels]
             if config.norm else [])
    return Network(config, stages, blocks, score, norms)


def forward(net: Network, batch):
    x = as_tensor(batch)
    cfg = net.config
    if x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.input_size:
        raise ShapeError(f"batch {x.shape} does not match config input "
                         f"{(cfg.in_channels, *cfg.input_size)}")
    tapes: dict = {}
    feats = []
    h = x
    for s, (c1, c2) in enumerate(net.stages):
        h, tapes[s, "conv1"] = L.conv2d_forward(h, c1)
        if net.norms:
            h, tapes[s, "norm1"] = L.group_norm_forward(h, net.norms[s][0])
        h, tapes[s, "relu1"] = L.relu_forward(h)
        h, tapes[s, "conv2"] = L.conv2d_forward(h, c2, stride=2)
        if net.norms:
            h, tapes[s, "norm2"] = L.group_norm_forward(h, net.norms[s][1])
        h, tapes[s, "relu2"] = L.relu_forward(h)
        block = net.blocks[s]
        if isinstance(block, SamParams):
            h, tapes[s, "block"] = sam_forward(h, block)
        elif block is not None:
            h, tapes[s, "block"] = spatial_attention_control_forward(h, block)
        feats.append(h)

    y, tapes["score5"] = L.conv2d_forward(feats[4], net.score[5])
    for s, f in ((4, feats[3]), (3, feats[2])):
        y, tapes["up", s] = L.upsample_bilinear_forward(y, *f.shape[2:])
        sk, tapes["score", s] = L.conv2d_forward(f, net.score[s])
        y = y + sk
    logits, tapes["up_final"] = L.upsample_bilinear_forward(y, *cfg.input_size)
    return logits, L.Tape("network", tapes=tapes)


def backward(net: Network, grad_logits, tape: L.Tape) -> np.ndarray:
    """Accumulate every parameter's gradient; returns the gradient w.r.t. the batch."""
    tapes = tape.consume("network")["tapes"]
    g = L.upsample_bilinear_backward(grad_logits, tapes["up_final"])
    g_feat: dict[int, np.ndarray] = {}
    for s in (3, 4):
        g_feat[s - 1] = L.conv2d_backward(g, tapes["score", s], net.score[s])
        g = L.upsample_bilinear_backward(g, tapes["up", s])
    g_feat[4] = L.conv2d_backward(g, tapes["score5"], net.score[5])

    g = None
    for s in reversed(range(NUM_STAGES)):
        if s in g_feat:
            g = g_feat[s] if g is None else g + g_feat[s]
        block = net.blocks[s]
        if isinstance(block, SamParams):
            g = sam_backward(g, tapes[s, "block"], block)
        elif block is not None:
            g = spatial_attention_control_backward(g, tapes[s, "block"], block)
        c1, c2 = net.stages[s]
        g = L.relu_backward(g, tapes[s, "relu2"])
        if net.norms:
            g = L.group_norm_backward(g, tapes[s, "norm2"], net.norms[s][1])
        g = L.conv2d_backward(g, tapes[s, "conv2"], c2)
        g = L.relu_backward(g, tapes[s, "relu1"])
        if net.norms:
            g = L.group_norm_backward(g, tapes[s, "norm1"], net.norms[s][0])
        g = L.conv2d_backward(g, tapes[s, "conv1"], c1)
    return g


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, net: Network, epoch: int = 0, rng_state: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Length-prefixed UTF-8 JSON header, then every tensor in declaration order.

    Vectors (biases, norm scale/shift) are stored as (C, 1, 1, 1) tensors.
    """
    header = {"config": net.config.to_dict(), "epoch": int(epoch),
              "rng_state": rng_state, "params": [n for n, _ in net.named_params()]}
    if extra:
        header.update(extra)
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_LEN.pack(len(text)))
    buf.write(text)
    for t in net.tensors():
        write_tensor(buf, t if t.ndim == 4 else t.reshape(-1, 1, 1, 1))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Network, dict]:
    with open(path, "rb") as f:
        (size,) = _LEN.unpack(f.read(_LEN.size))
        header = json.loads(f.read(size).decode("utf-8"))
        cfg = NetworkConfig(**header["config"])
        net = build(cfg, Rng(0))
        for t in net.tensors():
            v = read_tensor(f)
            if v.size != t.size or (t.ndim == 4 and v.shape != t.shape):
                raise ShapeError(f"checkpoint tensor {v.shape} != expected {t.shape}")
            t[...] = v.reshape(t.shape)
        if f.read(1):
            raise ValueError("trailing bytes after checkpoint tensors")
    return net, header


# ------------------------------------------------------------ score maps

def score_maps(net: Network, image) -> np.ndarray:
    """Raw per-class logits for one image, shape (K, H, W)."""
    image = as_tensor(image)
    logits, _ = forward(net, image[:1])
    return logits[0]


def normalize_maps(maps: np.ndarray) -> np.ndarray:
    """Min-max each map to [0, 1]; constant maps become all zero."""
    lo = maps.min(axis=(1, 2), keepdims=True)
    span = maps.max(axis=(1, 2), keepdims=True) - lo
    return np.where(span > 0, (maps - lo) / np.where(span > 0, span, 1.0), 0.0)


def export_score_maps(net: Network, image, out_dir=None, prefix: str = "class") -> np.ndarray:
    """Normalized per-class score maps; written as 8-bit PGMs if ``out_dir`` is given."""
    maps = normalize_maps(score_maps(net, image))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(maps):
            write_pgm(out_dir / f"{prefix}_{k}.pgm", np.rint(m * 255).astype(np.uint8))
    return maps
