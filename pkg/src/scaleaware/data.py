"""Synthetic multi-scale aerial scenes, overlapped tiling, flips, class weights.

Scenes imitate false-colour (IR-R-G) orthophotos with six classes. Objects are
drawn painter-style so labels are pixel exact: every pixel's label is the
class of the last object covering it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .layers import IGNORE_INDEX
from .tensor import Rng

CLASS_NAMES = ("clutter", "impervious_surface", "building", "low_vegetation", "tree", "car")
CLUTTER, SURFACE, BUILDING, LOW_VEG, TREE, CAR = range(6)

# mean colour (IR, R, G) and within-object texture std per class
PALETTE = {
    CLUTTER: ((0.30, 0.28, 0.25), 0.06),
    SURFACE: ((0.52, 0.50, 0.50), 0.03),
    BUILDING: ((0.60, 0.50, 0.46), 0.03),
    LOW_VEG: ((0.72, 0.46, 0.42), 0.05),
    TREE: ((0.58, 0.28, 0.28), 0.08),
    CAR: ((0.50, 0.50, 0.50), 0.02),
}
OBJECT_JITTER = 0.06


@dataclass(frozen=True)
class ObjectKind:
    """One family of objects drawn into every scene.

    ``bucket`` names the scale bucket the area range belongs to; strips are
    defined by aspect ratio rather than area.
    """

    name: str
    label: int
    shape: str  # "rect", "ellipse", "strip"
    bucket: str  # "small", "medium", "strip", "large", "road"
    count: int
    area: tuple[float, float]  # fraction of canvas
    aspect: tuple[float, float] = (1.0, 2.0)
    on_label: Optional[int] = None  # require >= half the footprint on this label


def default_objects(small_max_frac: float = 2e-4, large_min_frac: float = 0.15) -> tuple[ObjectKind, ...]:
    return (
        ObjectKind("road", SURFACE, "strip", "road", 2, (0.03, 0.06), (8.0, 40.0)),
        ObjectKind("lawn", LOW_VEG, "ellipse", "medium", 3, (0.02, 0.06), (1.0, 2.5)),
        ObjectKind("building_large", BUILDING, "rect", "large", 1, (large_min_frac, 0.30), (1.0, 1.6)),
        ObjectKind("building_strip", BUILDING, "rect", "strip", 1, (0.01, 0.03), (6.0, 9.0)),
        ObjectKind("building_small", BUILDING, "rect", "medium", 3, (0.003, 0.012), (1.0, 2.0)),
        ObjectKind("tree", TREE, "ellipse", "medium", 5, (0.002, 0.012), (1.0, 1.4)),
        ObjectKind("car", CAR, "rect", "small", 6, (small_max_frac / 2, small_max_frac), (1.8, 2.5),
                   on_label=SURFACE),
    )


@dataclass
class SceneSpec:
    canvas: tuple[int, int] = (128, 128)
    num_classes: int = 6
    objects: tuple[ObjectKind, ...] = field(default_factory=default_objects)
    noise_std: float = 0.04
    max_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(int(c) for c in self.canvas)
        if min(self.canvas) < 1:
            raise ValueError("canvas must be positive")
        buckets: dict[str, list[tuple[float, float]]] = {}
        for ob in self.objects:
            if not 0 <= ob.label < self.num_classes:
                raise ValueError(f"{ob.name}: label {ob.label} out of range")
            if ob.shape not in ("rect", "ellipse", "strip"):
                raise ValueError(f"{ob.name}: unknown shape {ob.shape!r}")
            if not 0 < ob.area[0] <= ob.area[1]:
                raise ValueError(f"{ob.name}: bad area range {ob.area}")
            buckets.setdefault(ob.bucket, []).append(ob.area)
        # area buckets must not overlap each other
        order = [b for b in ("small", "medium", "large") if b in buckets]
        for lo_b, hi_b in zip(order, order[1:]):
            if max(a[1] for a in buckets[lo_b]) > min(a[0] for a in buckets[hi_b]):
                raise ValueError(f"size buckets {lo_b!r} and {hi_b!r} overlap")


@dataclass(frozen=True)
class Placement:
    label: int
    shape: str  # "rect" or "ellipse"
    y0: float
    x0: float
    y1: float  # exclusive bounds for rects, bounding box for ellipses
    x1: float
    color: tuple[float, float, float]


class Scene(NamedTuple):
    image: np.ndarray  # (1, 3, h, w) in [0, 1]
    labels: np.ndarray  # (h, w) uint8
    skipped: int


def _mask(p: Placement, h: int, w: int) -> np.ndarray:
    if p.shape == "rect":
        m = np.zeros((h, w), dtype=bool)
        y0, x0 = max(int(p.y0), 0), max(int(p.x0), 0)
        y1, x1 = min(int(p.y1), h), min(int(p.x1), w)
        if y1 > y0 and x1 > x0:
            m[y0:y1, x0:x1] = True
        return m
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy, cx = (p.y0 + p.y1) / 2, (p.x0 + p.x1) / 2
    ry, rx = max((p.y1 - p.y0) / 2, 0.5), max((p.x1 - p.x0) / 2, 0.5)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def render(canvas, placements: Sequence[Placement], rng: Rng, noise_std: float = 0.0):
    """Paint placements in order; returns ((1, 3, h, w) image, (h, w) labels)."""
    h, w = canvas
    labels = np.zeros((h, w), dtype=np.uint8)
    base, tex = PALETTE[CLUTTER]
    img = np.empty((3, h, w))
    img[:] = np.asarray(base)[:, None, None]
    img += rng.normal(0.0, tex, (3, h, w))
    for p in placements:
        m = _mask(p, h, w)
        if not m.any():
            continue
        labels[m] = p.label
        tex = PALETTE.get(p.label, ((0.5, 0.5, 0.5), 0.03))[1]
        k = int(m.sum())
        img[:, m] = np.asarray(p.color)[:, None] + rng.normal(0.0, tex, (3, k))
    if noise_std > 0:
        img += rng.normal(0.0, noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)[None], labels


def _color(label: int, rng: Rng) -> tuple[float, float, float]:
    if label == CAR:
        return tuple(float(v) for v in rng.uniform(0.1, 0.95, 3))
    mean = np.asarray(PALETTE.get(label, ((0.5, 0.5, 0.5), 0.0))[0])
    return tuple(float(v) for v in mean + rng.normal(0.0, OBJECT_JITTER, 3))


def _sample_placement(ob: ObjectKind, h: int, w: int, rng: Rng) -> Optional[Placement]:
    area = rng.uniform(*ob.area) * h * w
    aspect = rng.uniform(*ob.aspect)
    if ob.shape == "ellipse":
        # area = pi * ry * rx
        ry = math.sqrt(area / (math.pi * aspect))
        bh, bw = 2 * ry, 2 * ry * aspect
    else:
        bh, bw = math.sqrt(area / aspect), math.sqrt(area * aspect)
        bh, bw = max(1, round(bh)), max(1, round(bw))
    if rng.random() < 0.5:
        bh, bw = bw, bh
    color = _color(ob.label, rng)
    if ob.shape == "strip" and ob.bucket == "road":
        # roads run across the canvas and are clipped at its edges
        thick = max(1, round(area / max(h, w)))
        if rng.random() < 0.5:
            y = int(rng.integers(0, max(1, h - thick + 1)))
            return Placement(ob.label, "rect", y, 0, y + thick, w, color)
        x = int(rng.integers(0, max(1, w - thick + 1)))
        return Placement(ob.label, "rect", 0, x, h, x + thick, color)
    if bh > h or bw > w:
        return None
    y = rng.uniform(0, h - bh) if ob.shape == "ellipse" else int(rng.integers(0, h - bh + 1))
    x = rng.uniform(0, w - bw) if ob.shape == "ellipse" else int(rng.integers(0, w - bw + 1))
    shape = "ellipse" if ob.shape == "ellipse" else "rect"
    return Placement(ob.label, shape, y, x, y + bh, x + bw, color)


def generate_scene(spec: SceneSpec, rng: Optional[Rng] = None) -> Scene:
    """Sample and render one scene. Objects that cannot be placed are skipped and counted."""
    rng = rng if rng is not None else Rng(spec.seed)
    h, w = spec.canvas
    placements: list[Placement] = []
    labels = np.zeros((h, w), dtype=np.uint8)
    skipped = 0
    for ob in spec.objects:
        for _ in range(ob.count):
            for _ in range(spec.max_retries):
                p = _sample_placement(ob, h, w, rng)
                if p is None:
                    continue
                m = _mask(p, h, w)
                if ob.on_label is not None and (labels[m] == ob.on_label).sum() * 2 < m.sum():
                    continue
                placements.append(p)
                labels[m] = p.label
                break
            else:
                skipped += 1
    image, labels = render(spec.canvas, placements, rng, spec.noise_std)
    return Scene(image, labels, skipped)


# -------------------------------------------------------------------- tiling

@dataclass(frozen=True)
class TileSpec:
    tile: tuple[int, int] = (64, 64)
    overlap: float = 0.5

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must be in [0, 1)")
        if min(self.tile) < 1:
            raise ValueError("tile size must be positive")

    @property
    def stride(self) -> tuple[int, int]:
        return tuple(max(1, int(math.floor(t * (1 - self.overlap)))) for t in self.tile)


def tile_origins(size: int, tile: int, stride: int) -> list[int]:
    """Raster origins along one axis; the last tile is shifted to end at the edge."""
    if size < tile:
        raise ValueError(f"canvas extent {size} smaller than tile {tile}")
    origins = list(range(0, size - tile + 1, stride))
    if origins[-1] + tile < size:
        origins.append(size - tile)
    return origins


def tile(image, labels, tspec: TileSpec):
    """Cut ``image`` (c, h, w) or (1, c, h, w) and ``labels`` (h, w) into tiles.

    Returns a list of ``(tile_image (c, th, tw), tile_labels (th, tw), (y, x))``.
    """
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0]
    h, w = labels.shape
    th, tw = tspec.tile
    sy, sx = tspec.stride
    out = []
    for y in tile_origins(h, th, sy):
        for x in tile_origins(w, tw, sx):
            out.append((image[:, y:y + th, x:x + tw].copy(), labels[y:y + th, x:x + tw].copy(), (y, x)))
    return out


def augment_flip(image, labels, rng: Rng):
    """Independent horizontal and vertical flips, each with probability 0.5."""
    image, labels = np.asarray(image), np.asarray(labels)
    if rng.random() < 0.5:
        image, labels = image[..., :, ::-1], labels[..., :, ::-1]
    if rng.random() < 0.5:
        image, labels = image[..., ::-1, :], labels[..., ::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def class_frequencies(label_set, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for lab in label_set:
        lab = np.asarray(lab).ravel()
        lab = lab[lab != ignore_index]
        counts += np.bincount(lab, minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise ValueError("no labelled pixels")
    return counts / total


def class_weights(label_set, c: float = 1.12, num_classes: int = 6) -> np.ndarray:
    """Inverse-log frequency weights ``1 / ln(P_k + c)`` over the whole label set."""
    if c <= 1:
        raise ValueError("c must exceed 1 so every weight is positive")
    return 1.0 / np.log(class_frequencies(label_set, num_classes) + c)


# ------------------------------------------------------------ dataset on disk

def write_dataset(out, spec: SceneSpec, splits: dict[str, int], seed: int = 0) -> dict[str, Path]:
    """Write ``splits`` (name -> scene count) under ``out``; returns split dirs.

    Scene ``i`` of the split at position ``s`` uses seed ``seed + 100000*s + i``.
    """
    out = Path(out)
    dirs = {}
    for s, (name, count) in enumerate(splits.items()):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(count):
            scene = generate_scene(spec, Rng(seed + 100000 * s + i))
            stem = f"scene_{i:03d}"
            rgb = np.rint(scene.image[0].transpose(1, 2, 0) * 255).astype(np.uint8)
            write_ppm(d / f"{stem}.ppm", rgb)
            write_pgm(d / f"{stem}.pgm", scene.labels)
            lines.append(f"{stem}.ppm {stem}.pgm")
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")
        dirs[name] = d
    return dirs


def benchmark_spec(canvas=(128, 128), seed: int = 0) -> SceneSpec:
    """Desk-scale multi-scale benchmark: cars up to 1e-3 of the canvas so they survive 64x64 tiles."""
    return SceneSpec(canvas=canvas, objects=default_objects(small_max_frac=1e-3), seed=seed)


def generate_splits(spec: SceneSpec, splits: dict[str, int], seed: int = 0) -> dict[str, list]:
    """In-memory twin of :func:`write_dataset` (same per-scene seeds, no 8-bit quantisation)."""
    out = {}
    for s, (name, count) in enumerate(splits.items()):
        scenes = (generate_scene(spec, Rng(seed + 100000 * s + i)) for i in range(count))
        out[name] = [(sc.image[0], sc.labels) for sc in scenes]
    return out


def load_split(split_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    """Read a split as ``[(image (3, h, w) float in [0, 1], labels (h, w) uint8)]``."""
    split_dir = Path(split_dir)
    manifest = split_dir / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {split_dir}")
    scenes = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        img_name, lab_name = line.split()
        img = read_ppm(split_dir / img_name).transpose(2, 0, 1).astype(np.float64) / 255.0
        scenes.append((img, read_pgm(split_dir / lab_name)))
    return scenes
