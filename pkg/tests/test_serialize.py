import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsod.serialize import (SCAN_ORDERS, FeatureSequence, ScanOrder, deserialize, deserialize_batch, scan_index,
                            serialize, serialize_batch)

orders = st.sampled_from(SCAN_ORDERS)


def _labels(order, h, w):
    grid = np.arange(h * w).reshape(h, w, 1)
    return list(serialize(grid, order).frames[:, 0])


def test_two_by_two_orders():
    # cells a b / c d -> 0 1 / 2 3
    assert _labels(ScanOrder.ROW_PRIME, 2, 2) == [0, 1, 3, 2]
    assert _labels(ScanOrder.COL_PRIME, 2, 2) == [0, 2, 3, 1]
    assert _labels(ScanOrder.ROW_PRIME_REVERSED, 2, 2) == [2, 3, 1, 0]
    assert _labels(ScanOrder.COL_PRIME_REVERSED, 2, 2) == [1, 3, 2, 0]


def test_spot_positions():
    assert scan_index(5, ScanOrder.ROW_PRIME, 4, 4) == (1, 2)
    assert scan_index(0, ScanOrder.ROW_PRIME, 3, 7) == (0, 0)
    assert scan_index(20, ScanOrder.ROW_PRIME_REVERSED, 3, 7) == (0, 0)


def test_five_by_seven_bijection_and_adjacency():
    for order in SCAN_ORDERS:
        cells = [scan_index(t, order, 5, 7) for t in range(35)]
        assert len(set(cells)) == 35
        for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
            assert abs(r0 - r1) + abs(c0 - c1) == 1


def test_raster_style_jumps_at_row_end():
    a = scan_index(3, ScanOrder.ROW_PRIME, 3, 4, "raster")
    b = scan_index(4, ScanOrder.ROW_PRIME, 3, 4, "raster")
    assert (a, b) == ((0, 3), (1, 0))


def test_degenerate_grid():
    fmap = np.arange(4.0).reshape(1, 1, 4)
    for order in SCAN_ORDERS:
        seq = serialize(fmap, order)
        assert len(seq) == 1
        np.testing.assert_array_equal(seq.frames[0], fmap[0, 0])


def test_errors():
    with pytest.raises(IndexError):
        scan_index(16, ScanOrder.ROW_PRIME, 4, 4)
    with pytest.raises(IndexError):
        scan_index(-1, ScanOrder.ROW_PRIME, 4, 4)
    with pytest.raises(ValueError):
        serialize(np.zeros((0, 3, 2)), ScanOrder.ROW_PRIME)
    with pytest.raises(ValueError):
        scan_index(0, ScanOrder.ROW_PRIME, 2, 2, "zigzag")


def test_round_trip_six_by_six():
    m = np.random.default_rng(0).normal(size=(6, 6, 3))
    for order in SCAN_ORDERS:
        np.testing.assert_array_equal(deserialize(serialize(m, order)), m)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 8), w=st.integers(1, 8), order=orders, style=st.sampled_from(["serpentine", "raster"]))
def test_batch_round_trip_property(h, w, order, style):
    m = np.random.default_rng(h * 31 + w).normal(size=(2, h, w, 3))
    seqs = serialize_batch(m, order, style)
    for i in range(2):
        np.testing.assert_array_equal(seqs[i], serialize(m[i], order, style).frames)
    np.testing.assert_array_equal(deserialize_batch(seqs, order, h, w, style), m)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 8), w=st.integers(1, 8))
def test_reversed_orders_play_backwards(h, w):
    for base, rev in ((ScanOrder.ROW_PRIME, ScanOrder.ROW_PRIME_REVERSED),
                      (ScanOrder.COL_PRIME, ScanOrder.COL_PRIME_REVERSED)):
        assert _labels(rev, h, w) == _labels(base, h, w)[::-1]


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 8), w=st.integers(1, 8))
def test_column_scan_is_row_scan_of_transpose(h, w):
    grid = np.arange(h * w).reshape(h, w, 1)
    col = serialize(grid, ScanOrder.COL_PRIME).frames[:, 0]
    row_t = serialize(grid.transpose(1, 0, 2), ScanOrder.ROW_PRIME).frames[:, 0]
    np.testing.assert_array_equal(col, row_t)


def test_sequence_carries_geometry():
    seq = serialize(np.zeros((2, 3, 1)), ScanOrder.COL_PRIME)
    assert isinstance(seq, FeatureSequence) and (seq.height, seq.width) == (2, 3)
