import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaleaware import data as D
from scaleaware.tensor import Rng


def test_zero_objects_all_background():
    scene = D.generate_scene(D.SceneSpec(canvas=(20, 30), objects=()), Rng(0))
    assert scene.image.shape == (1, 3, 20, 30)
    assert not scene.labels.any() and scene.skipped == 0


def test_rectangle_histogram_exact():
    p = D.Placement(D.BUILDING, "rect", 2, 3, 6, 8, (0.9, 0.1, 0.1))
    _, labels = D.render((10, 12), [p], Rng(0))
    hist = np.bincount(labels.ravel(), minlength=6)
    assert hist[D.BUILDING] == 4 * 5
    assert hist[0] == 120 - 20


def test_generate_deterministic():
    spec = D.SceneSpec(canvas=(64, 64))
    a, b = D.generate_scene(spec, Rng(5)), D.generate_scene(spec, Rng(5))
    assert a.image.tobytes() == b.image.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = D.generate_scene(spec, Rng(6))
    assert not np.array_equal(a.labels, c.labels)


def test_default_scene_has_every_scale():
    scene = D.generate_scene(D.SceneSpec(canvas=(128, 128), objects=D.default_objects(1e-3)), Rng(1))
    present = set(np.unique(scene.labels))
    assert {0, D.SURFACE, D.BUILDING, D.TREE} <= present
    assert 0 <= scene.image.min() and scene.image.max() <= 1


def test_impossible_objects_skipped():
    big = D.ObjectKind("slab", 2, "rect", "large", 2, (0.9, 0.9), (20.0, 30.0))
    scene = D.generate_scene(D.SceneSpec(canvas=(16, 16), objects=(big,), max_retries=3), Rng(0))
    assert scene.skipped == 2 and not scene.labels.any()


def test_overlapping_buckets_rejected():
    a = D.ObjectKind("a", 1, "rect", "small", 1, (0.001, 0.05))
    b = D.ObjectKind("b", 2, "rect", "medium", 1, (0.01, 0.1))
    with pytest.raises(ValueError):
        D.SceneSpec(objects=(a, b))


def test_default_buckets_meet_size_classes():
    obs = {o.name: o for o in D.default_objects()}
    assert obs["car"].area[1] <= 2e-4
    assert obs["building_large"].area[0] >= 0.15
    assert obs["building_strip"].aspect[0] >= 6


# ------------------------------------------------------------------ tiling

def test_tile_origins_full_scale():
    spec = D.TileSpec((512, 512), 0.5)
    assert spec.stride == (256, 256)
    assert D.tile_origins(1024, 512, 256) == [0, 256, 512]
    tiles = D.tile(np.zeros((3, 1024, 1024)), np.zeros((1024, 1024), np.uint8), spec)
    assert len(tiles) == 9
    assert {o for _, _, o in tiles} == {(y, x) for y in (0, 256, 512) for x in (0, 256, 512)}


def test_tile_no_overlap_disjoint():
    img = np.arange(3 * 8 * 8, dtype=float).reshape(3, 8, 8)
    tiles = D.tile(img, np.zeros((8, 8), np.uint8), D.TileSpec((4, 4), 0.0))
    assert [o for _, _, o in tiles] == [(0, 0), (0, 4), (4, 0), (4, 4)]
    np.testing.assert_array_equal(tiles[3][0], img[:, 4:, 4:])


def test_last_tile_shifted_inward():
    assert D.tile_origins(100, 64, 32) == [0, 32, 36]
    assert D.tile_origins(64, 64, 32) == [0]


def test_tile_too_small():
    with pytest.raises(ValueError):
        D.tile(np.zeros((3, 10, 10)), np.zeros((10, 10), np.uint8), D.TileSpec((16, 16)))


def test_bad_tilespec():
    with pytest.raises(ValueError):
        D.TileSpec((8, 8), 1.0)


def _coverage(h, w, tspec):
    cov = np.zeros((h, w), int)
    for _, _, (y, x) in D.tile(np.zeros((1, h, w)), np.zeros((h, w), np.uint8), tspec):
        cov[y:y + tspec.tile[0], x:x + tspec.tile[1]] += 1
    return cov


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 60), st.integers(8, 60), st.integers(2, 8), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_tiles_cover_every_pixel(h, w, t, overlap):
    assert _coverage(h, w, D.TileSpec((t, t), overlap)).min() >= 1


def test_interior_pixels_in_four_tiles():
    cov = _coverage(64, 64, D.TileSpec((16, 16), 0.5))
    assert np.all(cov[8:-8, 8:-8] == 4)


def test_tiles_match_source():
    r = Rng(0)
    img = r.uniform(0, 1, (3, 40, 40))
    lab = r.integers(0, 6, (40, 40)).astype(np.uint8)
    for ti, tl, (y, x) in D.tile(img[None], lab, D.TileSpec((16, 16), 0.5)):
        np.testing.assert_array_equal(ti, img[:, y:y + 16, x:x + 16])
        np.testing.assert_array_equal(tl, lab[y:y + 16, x:x + 16])


# ------------------------------------------------------------ augmentation

def test_double_horizontal_flip_identity():
    r = Rng(0)
    img, lab = r.uniform(0, 1, (3, 5, 7)), r.integers(0, 6, (5, 7))
    twice = img[..., ::-1][..., ::-1]
    np.testing.assert_array_equal(twice, img)
    np.testing.assert_array_equal(lab[:, ::-1][:, ::-1], lab)


def test_flip_preserves_counts_and_pairing():
    r = Rng(1)
    img = r.uniform(0, 1, (3, 9, 11))
    lab = r.integers(0, 6, (9, 11)).astype(np.uint8)
    img[0] = lab  # channel 0 encodes the label so pairing can be checked
    seen = set()
    for s in range(16):
        fi, fl = D.augment_flip(img, lab, Rng(s))
        np.testing.assert_array_equal(np.bincount(fl.ravel(), minlength=6), np.bincount(lab.ravel(), minlength=6))
        np.testing.assert_array_equal(fi[0], fl)
        seen.add(fl.tobytes())
    assert len(seen) == 4


def test_flip_reproducible():
    r = Rng(2)
    img, lab = r.uniform(0, 1, (3, 6, 6)), r.integers(0, 6, (6, 6))
    a = [D.augment_flip(img, lab, g)[1] for g in [Rng(3)] * 5]
    b = [D.augment_flip(img, lab, g)[1] for g in [Rng(3)] * 5]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


# ------------------------------------------------------------ class weights

def test_class_weight_closed_forms():
    w = D.class_weights([np.zeros((4, 4), np.uint8)], c=1.12, num_classes=2)
    assert w[1] == pytest.approx(1 / math.log(1.12)) and w[1] == pytest.approx(8.8239, abs=1e-4)
    assert w[0] == pytest.approx(1 / math.log(2.12)) and w[0] == pytest.approx(1.3308, abs=1e-4)


def test_uniform_frequencies_equal_weights():
    w = D.class_weights([np.arange(6, dtype=np.uint8).reshape(2, 3)])
    assert np.ptp(w) == 0


def test_weights_monotone_in_frequency():
    lab = np.repeat(np.arange(6, dtype=np.uint8), [1, 2, 4, 8, 16, 32])
    w = D.class_weights([lab])
    assert np.all(np.diff(w) < 0)


def test_frequencies_skip_ignore():
    lab = np.array([0, 1, 255, 255], dtype=np.uint8)
    np.testing.assert_allclose(D.class_frequencies([lab], 2), [0.5, 0.5])


def test_bad_c():
    with pytest.raises(ValueError):
        D.class_weights([np.zeros(3, np.uint8)], c=1.0)


# ------------------------------------------------------------ dataset on disk

def test_dataset_roundtrip(tmp_path):
    spec = D.SceneSpec(canvas=(32, 40))
    dirs = D.write_dataset(tmp_path, spec, {"train": 2, "val": 1}, seed=7)
    assert set(dirs) == {"train", "val"}
    train = D.load_split(dirs["train"])
    assert len(train) == 2
    img, lab = train[1]
    scene = D.generate_scene(spec, Rng(7 + 1))
    assert img.shape == (3, 32, 40)
    np.testing.assert_array_equal(lab, scene.labels)
    np.testing.assert_allclose(img, scene.image[0], atol=0.5 / 255 + 1e-12)
    val_scene = D.generate_scene(spec, Rng(7 + 100000))
    np.testing.assert_array_equal(D.load_split(dirs["val"])[0][1], val_scene.labels)


def test_load_split_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_split(tmp_path)
