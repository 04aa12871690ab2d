"""Boxes, proposal generation around critical points, IoU and RoI max pooling."""
from dataclasses import dataclass, field

import numpy as np

SPACES = ("feature", "image")


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float
    space: str = "image"

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if self.space not in SPACES:
            raise ValueError(f"unknown coordinate space {self.space!r}")

    @classmethod
    def from_xywh(cls, x, y, w, h, space="image"):
        return cls(x + w / 2, y + h / 2, w, h, space)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, space="image"):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, space)

    @property
    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def scaled(self, factor, space):
        return BBox(self.cx * factor, self.cy * factor, self.w * factor, self.h * factor, space)

    def clipped(self, height, width):
        """Clip to [0, width] x [0, height]; None when nothing remains."""
        x1, y1, x2, y2 = self.corners
        x1, x2 = max(x1, 0.0), min(x2, float(width))
        y1, y2 = max(y1, 0.0), min(y2, float(height))
        if x2 <= x1 or y2 <= y1:
            return None
        return BBox.from_corners(x1, y1, x2, y2, self.space)


def boxes_to_array(boxes):
    """(N, 4) array of corner coordinates."""
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.corners for b in boxes], dtype=np.float64)


def iou(a, b):
    if a.space != b.space:
        raise ValueError(f"cannot compare a {a.space}-space box with a {b.space}-space box")
    return float(iou_matrix(boxes_to_array([a]), boxes_to_array([b]))[0, 0])


def iou_matrix(a, b):
    """Pairwise IoU between corner arrays (N, 4) and (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _merge_once(points, radius):
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pts = np.asarray(points, dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            if np.hypot(*(pts[i] - pts[j])) <= radius:
                parent[find(i)] = find(j)
    clusters = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    merged = set()
    for members in clusters.values():
        centroid = pts[members].mean(axis=0)
        # round half up
        merged.add(tuple(int(v) for v in np.floor(centroid + 0.5)))
    return sorted(merged)


def merge_critical_points(point_lists, merge_radius=1.0):
    """Single-linkage clustering of grid points from several scanners.

    Points closer than or at ``merge_radius`` (Euclidean, in cells) are joined;
    each cluster becomes its centroid rounded half-up to a cell. Merging is
    repeated until nothing changes, which makes the operation idempotent.
    """
    if merge_radius < 0:
        raise ValueError("merge radius must be nonnegative")
    points = [tuple(int(v) for v in p) for lst in point_lists for p in lst]
    merged = sorted(set(points))
    while True:
        again = _merge_once(merged, merge_radius)
        if again == merged:
            return merged
        merged = again


@dataclass
class ProposalSet:
    boxes: list
    source_points: list
    scales: list = field(default_factory=list)  # per box
    ratios: list = field(default_factory=list)  # per box
    point_index: list = field(default_factory=list)  # per box, index into source_points

    def __len__(self):
        return len(self.boxes)

    def as_array(self):
        return boxes_to_array(self.boxes)


def generate_proposals(points, scales, ratios, bounds, space="feature", clip=True):
    """Boxes of width s*sqrt(r) and height s/sqrt(r) centred on each grid point.

    A grid point (row, col) is centred at (col + 0.5, row + 0.5) in cell units.
    ``bounds`` is (H, W) in the same units as ``scales``.
    """
    if len(scales) == 0 or len(ratios) == 0:
        raise ValueError("scales and ratios must be nonempty")
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise ValueError("scales and ratios must be positive")
    h_bound, w_bound = bounds
    out = ProposalSet([], [tuple(p) for p in points])
    for k, (row, col) in enumerate(out.source_points):
        for s in scales:
            for r in ratios:
                box = BBox(col + 0.5, row + 0.5, s * np.sqrt(r), s / np.sqrt(r), space)
                if clip:
                    box = box.clipped(h_bound, w_bound)
                    if box is None:
                        continue
                out.boxes.append(box)
                out.scales.append(float(s))
                out.ratios.append(float(r))
                out.point_index.append(k)
    return out


def _bin_edges(lo, hi, bins):
    edges = [int(round(lo + (hi - lo) * i / bins)) for i in range(bins + 1)]
    spans = []
    for i in range(bins):
        s, e = edges[i], edges[i + 1]
        if e <= s:
            # empty bin borrows the boundary cell next to it
            s = min(s, hi - 1)
            e = s + 1
        spans.append((s, e))
    return spans


def roi_region(box, height, width):
    """Integer cell range [r0, r1) x [c0, c1) covered by a feature-space box."""
    x1, y1, x2, y2 = box.corners
    c0, c1 = max(int(np.floor(x1)), 0), min(int(np.ceil(x2)), width)
    r0, r1 = max(int(np.floor(y1)), 0), min(int(np.ceil(y2)), height)
    if c1 <= c0 or r1 <= r0:
        raise ValueError(f"box {box} does not cover any cell of a {height}x{width} map")
    return r0, r1, c0, c1


def roi_pool(fmap, box, out=(2, 2), return_argmax=False):
    """Max-pool the cells under ``box`` into a fixed (p, q, D) grid."""
    h, w, d = fmap.shape
    p, q = out
    r0, r1, c0, c1 = roi_region(box, h, w)
    pooled = np.empty((p, q, d))
    arg = np.empty((p, q, d), dtype=np.int64)
    for i, (rs, re) in enumerate(_bin_edges(r0, r1, p)):
        for j, (cs, ce) in enumerate(_bin_edges(c0, c1, q)):
            patch = fmap[rs:re, cs:ce].reshape(-1, d)
            k = np.argmax(patch, axis=0)
            pooled[i, j] = patch[k, np.arange(d)]
            pr, pc = np.divmod(k, ce - cs)
            arg[i, j] = (rs + pr) * w + (cs + pc)
    if return_argmax:
        return pooled, arg
    return pooled


def roi_pool_naive(fmap, box, out=(2, 2)):
    """Per-bin maximum written with explicit loops, for testing."""
    h, w, d = fmap.shape
    r0, r1, c0, c1 = roi_region(box, h, w)
    res = np.full((out[0], out[1], d), -np.inf)
    for i, (rs, re) in enumerate(_bin_edges(r0, r1, out[0])):
        for j, (cs, ce) in enumerate(_bin_edges(c0, c1, out[1])):
            for r in range(rs, re):
                for c in range(cs, ce):
                    for ch in range(d):
                        res[i, j, ch] = max(res[i, j, ch], fmap[r, c, ch])
    return res


def roi_pool_batch(fmap, boxes, out=(2, 2)):
    """Pool every box of one image; returns (R, p, q, D) features and flat argmax indices."""
    pooled, args = zip(*(roi_pool(fmap, b, out, return_argmax=True) for b in boxes))
    return np.stack(pooled), np.stack(args)


def roi_pool_backward(dpooled, argmax, fmap_shape):
    """Scatter pooled gradients (R, p, q, D) back onto the (H, W, D) map."""
    h, w, d = fmap_shape
    grad = np.zeros((h * w, d))
    ch = np.broadcast_to(np.arange(d), argmax.shape)
    np.add.at(grad, (argmax.reshape(-1), ch.reshape(-1)), dpooled.reshape(-1))
    return grad.reshape(h, w, d)


def nms(boxes, scores, threshold=0.3):
    """Greedy non-maximum suppression on corner arrays; returns kept indices by score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        ov = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= threshold]
    return keep
