import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scaleaware import tensor as T


def test_zeros_and_fill():
    assert np.array_equal(T.zeros((1, 1, 2, 2))[0, 0], [[0, 0], [0, 0]])
    assert T.fill((1, 1, 1, 1), 3.5).ravel().tolist() == [3.5]
    f = T.fill((1, 2, 1, 1), -1)
    assert f.shape == (1, 2, 1, 1) and np.all(f == -1)
    assert T.zeros((2, 3, 4, 5)).dtype == np.float64


@pytest.mark.parametrize("shape", [(1, 1, 0, 1), (1, 2, 3), (2**31, 2**31, 2, 2)])
def test_bad_shapes_rejected(shape):
    with pytest.raises(T.ShapeError):
        T.zeros(shape)


def test_randn_zero_std(rng):
    assert np.all(T.randn((1, 2, 3, 3), 0.0, 0.0, rng) == 0.0)


def test_randn_statistics(rng):
    x = T.randn((1, 1, 100, 100), 0.0, 0.001, rng)
    assert abs(x.mean()) <= 1e-4
    assert abs(x.std() - 0.001) <= 0.2 * 0.001


def test_randn_deterministic():
    a = T.randn((1, 3, 8, 8), 0.0, 1.0, T.Rng(7))
    b = T.randn((1, 3, 8, 8), 0.0, 1.0, T.Rng(7))
    assert a.tobytes() == b.tobytes()


def test_randn_negative_std(rng):
    with pytest.raises(ValueError):
        T.randn((1, 1, 1, 1), 0.0, -1.0, rng)


def test_rng_state_roundtrip():
    r = T.Rng(3)
    r.normal(0, 1, 5)
    state = r.state()
    a = r.normal(0, 1, 5)
    r.set_state(state)
    assert np.array_equal(a, r.normal(0, 1, 5))


def test_elementwise():
    a = np.array([2.0, 3.0]).reshape(1, 1, 1, 2)
    b = np.array([4.0, 5.0]).reshape(1, 1, 1, 2)
    assert T.mul(a, b).ravel().tolist() == [8.0, 15.0]
    assert np.array_equal(T.add(a, T.zeros(a.shape)), a)
    assert np.array_equal(T.sub(a, a), T.zeros(a.shape))
    assert T.add_scalar(a, 1).ravel().tolist() == [3.0, 4.0]
    assert T.mul_scalar(a, 2).ravel().tolist() == [4.0, 6.0]


def test_no_broadcasting():
    with pytest.raises(T.ShapeError):
        T.add(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 1, 2)))


def test_ops_do_not_mutate():
    a = np.ones((1, 1, 2, 2))
    b = np.full((1, 1, 2, 2), 2.0)
    T.add(a, b), T.mul(a, b), T.sub(a, b)
    assert np.all(a == 1) and np.all(b == 2)


finite = st.floats(-1e6, 1e6, allow_nan=False)
pair = st.integers(1, 3).flatmap(
    lambda n: st.tuples(arrays(np.float64, (1, n, 2, 2), elements=finite),
                        arrays(np.float64, (1, n, 2, 2), elements=finite)))


@given(pair)
@settings(max_examples=50)
def test_add_mul_commutative(ab):
    a, b = ab
    assert np.array_equal(T.add(a, b), T.add(b, a))
    assert np.array_equal(T.mul(a, b), T.mul(b, a))


def test_serialization_format():
    x = np.arange(6, dtype=np.float64).reshape(1, 2, 1, 3)
    buf = io.BytesIO()
    T.write_tensor(buf, x)
    raw = buf.getvalue()
    assert raw[:32] == np.array([1, 2, 1, 3], dtype="<u8").tobytes()
    assert raw[32:] == x.astype("<f8").tobytes()
    buf.seek(0)
    assert np.array_equal(T.read_tensor(buf), x)


def test_serialization_truncated():
    buf = io.BytesIO(np.array([1, 1, 1, 2], dtype="<u8").tobytes() + b"\0" * 8)
    with pytest.raises(EOFError):
        T.read_tensor(buf)


def test_save_load(tmp_path, rng):
    x = T.randn((2, 3, 4, 5), 0, 1, rng)
    T.save_tensor(tmp_path / "x.bin", x)
    assert T.load_tensor(tmp_path / "x.bin").tobytes() == x.tobytes()
