"""8-bit PGM/PPM reading and writing (binary netpbm via Pillow)."""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("graymap must be 2-d")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PPM")


def write_ppm(path, arr: np.ndarray) -> None:
    """``arr`` is (h, w, 3) uint8."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("pixmap must be (h, w, 3)")
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path} is not an 8-bit graymap")
        return np.array(im)


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path} is not an 8-bit RGB pixmap")
        return np.array(im)
