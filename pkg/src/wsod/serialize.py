"""Conversion between 2-D feature maps and 1-D frame sequences.

Four scan orders are supported. With the default serpentine style the row
scan walks row 0 left to right, row 1 right to left and so on, so every pair
of consecutive frames is a pair of neighbouring grid cells. The column scan is
the same walk on the transposed grid, and each reversed order is the full
sequence of its base order played backwards.
"""
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np


class ScanOrder(Enum):
    ROW_PRIME = "row"
    ROW_PRIME_REVERSED = "row_rev"
    COL_PRIME = "col"
    COL_PRIME_REVERSED = "col_rev"

    @property
    def reversed(self):
        return self in (ScanOrder.ROW_PRIME_REVERSED, ScanOrder.COL_PRIME_REVERSED)

    @property
    def by_column(self):
        return self in (ScanOrder.COL_PRIME, ScanOrder.COL_PRIME_REVERSED)


SCAN_ORDERS = (ScanOrder.ROW_PRIME, ScanOrder.ROW_PRIME_REVERSED,
               ScanOrder.COL_PRIME, ScanOrder.COL_PRIME_REVERSED)
STYLES = ("serpentine", "raster")


def _base_index(t, h, w, by_column, style):
    major, minor = (w, h) if by_column else (h, w)
    line, pos = divmod(t, minor)
    if style == "serpentine" and line % 2 == 1:
        pos = minor - 1 - pos
    return (pos, line) if by_column else (line, pos)


def scan_index(t, order, h, w, style="serpentine"):
    """Grid cell (row, col) visited at sequence position ``t``."""
    if style not in STYLES:
        raise ValueError(f"unknown scan style {style!r}")
    total = h * w
    if not 0 <= t < total:
        raise IndexError(f"position {t} outside [0, {total}) for a {h}x{w} grid")
    if order.reversed:
        t = total - 1 - t
    return _base_index(t, h, w, order.by_column, style)


deserialize_point = scan_index


@lru_cache(maxsize=256)
def _permutation(order, h, w, style):
    perm = np.array([r * w + c for r, c in (scan_index(t, order, h, w, style) for t in range(h * w))])
    perm.setflags(write=False)
    return perm


def scan_permutation(order, h, w, style="serpentine"):
    """Flat row-major cell index for every sequence position (length H*W)."""
    return _permutation(order, h, w, style)


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, D)
    order: ScanOrder
    height: int
    width: int
    style: str = "serpentine"

    def __len__(self):
        return self.frames.shape[0]


def serialize(fmap, order, style="serpentine"):
    if fmap.ndim != 3 or 0 in fmap.shape:
        raise ValueError(f"feature map must be a nonempty (H, W, D) array, got {fmap.shape}")
    h, w, d = fmap.shape
    frames = fmap.reshape(h * w, d)[scan_permutation(order, h, w, style)]
    return FeatureSequence(frames, order, h, w, style)


def deserialize(seq):
    h, w = seq.height, seq.width
    out = np.empty((h * w, seq.frames.shape[1]), dtype=seq.frames.dtype)
    out[scan_permutation(seq.order, h, w, seq.style)] = seq.frames
    return out.reshape(h, w, -1)


def serialize_batch(fmaps, order, style="serpentine"):
    """(B, H, W, D) -> (B, T, D) along ``order``."""
    b, h, w, d = fmaps.shape
    return fmaps.reshape(b, h * w, d)[:, scan_permutation(order, h, w, style)]


def deserialize_batch(seqs, order, h, w, style="serpentine"):
    """Inverse of :func:`serialize_batch`; also routes gradients back to the grid."""
    b, _, d = seqs.shape
    out = np.empty((b, h * w, d), dtype=seqs.dtype)
    out[:, scan_permutation(order, h, w, style)] = seqs
    return out.reshape(b, h, w, d)
