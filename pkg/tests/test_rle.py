import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptseg.rle import RleFormatError, decode_rle, encode_rle


def test_empty_mask():
    enc = encode_rle(np.zeros((3, 4), dtype=bool))
    assert enc == {"size": [3, 4], "counts": [12]}


def test_full_mask_starts_with_zero_background():
    enc = encode_rle(np.ones((2, 2), dtype=bool))
    assert enc == {"size": [2, 2], "counts": [0, 4]}


def test_column_major_order():
    m = np.array([[1, 0], [0, 1]], dtype=bool)
    # column-major flatten: [1, 0, 0, 1]
    assert encode_rle(m)["counts"] == [0, 1, 2, 1]


def test_decode_known():
    m = decode_rle({"size": [2, 3], "counts": [1, 2, 3]})
    expected = np.array([[0, 1, 0], [1, 0, 0]], dtype=bool)
    assert np.array_equal(m, expected)


@given(arrays(bool, st.tuples(st.integers(1, 24), st.integers(1, 24))))
@settings(max_examples=120)
def test_round_trip(m):
    assert np.array_equal(decode_rle(encode_rle(m)), m)


def test_counts_are_plain_ints():
    enc = encode_rle(np.ones((2, 2), dtype=bool))
    assert all(type(c) is int for c in enc["counts"])
    assert all(type(v) is int for v in enc["size"])


@pytest.mark.parametrize(
    "bad",
    [
        {"counts": [4]},
        {"size": [2, 2]},
        {"size": [2, 2], "counts": [3]},
        {"size": [2, 2], "counts": [-1, 5]},
        {"size": [0, 2], "counts": []},
        {"size": [2, 2], "counts": "abc"},
    ],
)
def test_malformed_rejected(bad):
    with pytest.raises(RleFormatError):
        decode_rle(bad)
