"""Training (Adam, poly LR, weighted cross-entropy), metrics, and the ablation runner."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import softmax

from . import layers as L
from .data import CLASS_NAMES, TileSpec, augment_flip, class_weights, tile, tile_origins
from .network import Network, NetworkConfig, build, save_checkpoint
from .tensor import Rng

log = logging.getLogger(__name__)

REPORT_CLASSES = (1, 2, 3, 4, 5)  # clutter (0) is trained on but left out of the report
ABLATION_LABELS = {
    "baseline": "FCN8s",
    "attn_single_control": "FCN8s-SAM-SC",
    "sam_single": "FCN8s-SAM-S",
    "attn_multi_control": "FCN8s-SAM-MC",
    "sam_multi": "FCN8s-SAM-M",
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    base_lr: float = 5e-4
    poly_power: float = 0.9
    weight_decay: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    decoupled_weight_decay: bool = True
    loss_c: float = 1.12
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


# ------------------------------------------------------------- optimization

def poly_lr(it: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    """``base_lr * (1 - it/max_iter)**power``; iteration 0 always gives ``base_lr``."""
    if it < 0 or it > max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    if it == 0:
        return float(base_lr)
    return float(base_lr * (1.0 - it / max_iter) ** power)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, wd: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8,
              decoupled: bool = True) -> None:
    """One bias-corrected Adam update, in place.

    Decoupled decay subtracts ``lr * wd * param``; the coupled form adds
    ``wd * param`` to the gradient before the moments.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not decoupled and wd:
            g = g + wd * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if decoupled and wd:
            update = update + wd * p
        p -= lr * update


# ------------------------------------------------------------------ metrics

def confusion(pred, gt, num_classes: int, ignore_index: int = L.IGNORE_INDEX) -> np.ndarray:
    """``cm[g, p]`` = number of pixels with ground truth g predicted as p."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt differ in size")
    keep = gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    if np.any((gt < 0) | (gt >= num_classes) | (pred < 0) | (pred >= num_classes)):
        raise ValueError("label out of range")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def metrics(cm: np.ndarray, classes: Optional[Sequence[int]] = None) -> dict:
    """Per-class IoU / F1 plus means over ``classes`` present in the ground truth, and OA.

    Classes absent from both prediction and ground truth get NaN scores.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / (tp + fp + fn)
        f1 = 2 * tp / (2 * tp + fp + fn)
    present = cm.sum(axis=1) > 0
    sel = np.zeros(len(cm), dtype=bool)
    sel[list(range(len(cm)) if classes is None else classes)] = True
    sel &= present
    return {
        "iou": iou,
        "f1": f1,
        "mean_iou": float(iou[sel].mean()) if sel.any() else float("nan"),
        "mean_f1": float(f1[sel].mean()) if sel.any() else float("nan"),
        "oa": float(tp.sum() / total),
    }


def report_classes(num_classes: int = 6) -> tuple[int, ...]:
    return REPORT_CLASSES if num_classes == 6 else tuple(range(1, num_classes))


def report_columns(num_classes: int = 6) -> list[str]:
    cols = []
    for k in report_classes(num_classes):
        name = CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class{k}"
        cols += [f"{name}_iou", f"{name}_f1"]
    return cols + ["mean_iou", "mean_f1", "oa"]


def report_row(cm: np.ndarray) -> list[float]:
    """Table values (fractions): foreground IoU/F1 pairs, mean IoU, mean F1, OA (13 for K=6)."""
    classes = report_classes(len(cm))
    m = metrics(cm, classes)
    row = []
    for k in classes:
        row += [float(m["iou"][k]), float(m["f1"][k])]
    return row + [m["mean_iou"], m["mean_f1"], m["oa"]]


# --------------------------------------------------------------------- data

def prepare_input(images) -> np.ndarray:
    """Map [0, 1] pixel values to [-1, 1]."""
    return np.ascontiguousarray(np.asarray(images, dtype=np.float64) * 2.0 - 1.0)


def make_tiles(scenes, tspec: TileSpec):
    out = []
    for img, lab in scenes:
        out += [(ti, tl) for ti, tl, _ in tile(img, lab, tspec)]
    return out


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    class_weights: Optional[np.ndarray] = None


def train(net: Network, dataset, config: TrainConfig, weights: Optional[np.ndarray] = None,
          out_dir=None, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train ``net`` in place on ``dataset`` = [(image (3, h, w) in [0, 1], labels (h, w))].

    The learning rate follows the poly schedule per iteration and reaches zero
    on the final iteration. With ``out_dir`` a checkpoint and ``log.csv`` are
    rewritten after every epoch.
    """
    if not dataset:
        raise ValueError("empty dataset")
    k = net.config.num_classes
    if weights is None:
        weights = class_weights([lab for _, lab in dataset], config.loss_c, k)
    rng = Rng(config.seed + 0x5EED)
    params, grads = net.tensors(), net.grads()
    state = AdamState.like(params)
    n = len(dataset)
    per_epoch = -(-n // config.batch_size)
    max_iter = config.epochs * per_epoch - 1
    it = 0
    result = TrainResult(class_weights=np.asarray(weights))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        cm = np.zeros((k, k), dtype=np.int64)
        losses = []
        lr = 0.0
        for start in range(0, n, config.batch_size):
            imgs, labs = [], []
            for i in order[start:start + config.batch_size]:
                img, lab = dataset[i]
                if config.augment:
                    img, lab = augment_flip(img, lab, rng)
                imgs.append(img)
                labs.append(lab)
            x = prepare_input(np.stack(imgs))
            y = np.stack(labs).astype(np.int64)
            logits, tape = net.forward(x)
            loss, g = L.weighted_cross_entropy(logits, y, weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, iteration {it}")
            cm += confusion(logits.argmax(axis=1), y, k)
            net.zero_grad()
            net.backward(g, tape)
            lr = poly_lr(it, max_iter, config.base_lr, config.poly_power)
            adam_step(params, grads, state, lr, config.weight_decay, config.betas,
                      config.adam_eps, config.decoupled_weight_decay)
            losses.append(loss)
            it += 1

        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
        row.update(zip(report_columns(k), report_row(cm)))
        result.log.append(row)
        log.info("epoch %d loss %.4f mean_iou %.4f", epoch, row["loss"], row["mean_iou"])
        if on_epoch is not None:
            on_epoch(row)
        if out_dir is not None:
            result.checkpoint = out_dir / "checkpoint.bin"
            save_checkpoint(result.checkpoint, net, epoch, rng.state(),
                            extra={"class_weights": [float(w) for w in weights]})
            write_log(out_dir / "log.csv", result.log)
    return result


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({key: (repr(v) if isinstance(v, float) else v) for key, v in r.items()})


# ---------------------------------------------------------------- evaluation

def predict_scene(net: Network, image, tspec: Optional[TileSpec] = None, batch_size: int = 8) -> np.ndarray:
    """Sliding-window prediction over a whole scene by averaging tile softmax scores."""
    image = np.asarray(image)
    th, tw = net.config.input_size
    tspec = tspec or TileSpec((th, tw), 0.5)
    _, h, w = image.shape
    k = net.config.num_classes
    votes = np.zeros((k, h, w))
    origins = [(y, x) for y in tile_origins(h, th, tspec.stride[0]) for x in tile_origins(w, tw, tspec.stride[1])]
    for s in range(0, len(origins), batch_size):
        chunk = origins[s:s + batch_size]
        x = prepare_input(np.stack([image[:, y:y + th, x_:x_ + tw] for y, x_ in chunk]))
        prob = softmax(net.forward(x)[0], axis=1)
        for (y, x_), p in zip(chunk, prob):
            votes[:, y:y + th, x_:x_ + tw] += p
    return votes.argmax(axis=0)


def evaluate(net: Network, scenes, tspec: Optional[TileSpec] = None) -> np.ndarray:
    """Confusion matrix accumulated over whole scenes."""
    k = net.config.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for img, lab in scenes:
        cm += confusion(predict_scene(net, img, tspec), lab, k)
    return cm


# ------------------------------------------------------------------ ablation

@dataclass
class AblationResult:
    columns: list[str]
    rows: dict[str, list[float]]  # seed-averaged, keyed by variant
    per_seed: dict[tuple[str, int], list[float]]

    def mean_iou(self, variant: str, seed: Optional[int] = None) -> float:
        i = self.columns.index("mean_iou")
        return self.rows[variant][i] if seed is None else self.per_seed[variant, seed][i]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["network"] + self.columns)
            for variant, row in self.rows.items():
                w.writerow([ABLATION_LABELS[variant]] + [f"{100 * v:.2f}" for v in row])

    def format(self) -> str:
        head = f"{'network':<14}" + "".join(f"{c[:12]:>13}" for c in self.columns)
        lines = [head]
        for variant, row in self.rows.items():
            lines.append(f"{ABLATION_LABELS[variant]:<14}" + "".join(f"{100 * v:>13.2f}" for v in row))
        return "\n".join(lines)


def run_ablation(train_scenes, val_scenes, net_config: NetworkConfig, train_config: TrainConfig,
                 variants: Sequence[str] = tuple(ABLATION_LABELS), seeds: Sequence[int] = (0,),
                 tspec: Optional[TileSpec] = None, out_dir=None) -> AblationResult:
    """Train every variant under identical data, config and seeds; evaluate on ``val_scenes``."""
    tspec = tspec or TileSpec(net_config.input_size, 0.5)
    tiles = make_tiles(train_scenes, tspec)
    weights = class_weights([lab for _, lab in tiles], train_config.loss_c, net_config.num_classes)
    columns = report_columns(net_config.num_classes)
    per_seed = {}
    for seed in seeds:
        for variant in variants:
            net = build(replace(net_config, variant=variant), Rng(seed))
            run_dir = None if out_dir is None else Path(out_dir) / f"{variant}_seed{seed}"
            train(net, tiles, replace(train_config, seed=seed), weights, run_dir)
            per_seed[variant, seed] = report_row(evaluate(net, val_scenes, tspec))
            log.info("%s seed %d mean IoU %.4f", variant, seed, per_seed[variant, seed][-3])
    rows = {v: list(np.mean([per_seed[v, s] for s in seeds], axis=0)) for v in variants}
    result = AblationResult(columns, rows, per_seed)
    if out_dir is not None:
        result.to_csv(Path(out_dir) / "ablation.csv")
    return result
