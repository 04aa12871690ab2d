"""Count-labelled scenes: a synthetic crater generator and catalog clipping.

Scenes on disk are one 8-bit grayscale PNG per image plus a JSONL manifest
with one object per line::

    {"id": "scene-00000", "png": "images/scene-00000.png", "count": 2,
     "classes": ["crater"], "gt_boxes": [[cx, cy, w, h], ...]}

Box coordinates are image pixels with the origin at the top-left corner of
the top-left pixel. The catalog CSV has the header ``id,x,y,diameter_km``;
``x``/``y`` are in the unit named by the ``units`` argument.
"""
import csv
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .proposals import BBox

log = logging.getLogger(__name__)

CRATER = "crater"
METERS_PER_PIXEL = 100.0


class DataError(ValueError):
    pass


@dataclass
class SceneRecord:
    id: str
    image: np.ndarray  # (H, W) uint8
    count: int
    classes: list
    gt_boxes: list = field(default_factory=list)

    def __post_init__(self):
        if self.count != len(self.gt_boxes):
            raise DataError(f"{self.id}: count {self.count} != {len(self.gt_boxes)} boxes")
        h, w = self.image.shape
        eps = 1e-9  # corners recomputed from centre and size may round past an edge
        for b in self.gt_boxes:
            x1, y1, x2, y2 = b.corners
            if x1 < -eps or y1 < -eps or x2 > w + eps or y2 > h + eps:
                raise DataError(f"{self.id}: box {b} leaves the {h}x{w} image")


@dataclass
class SceneSpec:
    size: int = 64
    count_range: tuple = (1, 4)
    radius_range: tuple = (10, 12)
    noise: float = 12.0
    gap: int = 2
    max_restarts: int = 200


def _render_crater(canvas, cy, cx, r, rng):
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(yy - cy, xx - cx)
    rim = np.clip(1.0 - np.abs(d - (r - 1.0)) / 1.5, 0.0, 1.0)
    floor = np.clip(r - 1.5 - d, 0.0, 1.0)
    canvas += rng.uniform(55, 75) * rim - rng.uniform(35, 50) * floor


def generate_synthetic_scene(seed, spec=None, scene_id=None):
    """A noisy background with rimmed disks (bright ring, dark floor).

    Every disk lies fully inside the scene and disks keep ``spec.gap`` pixels
    apart. The ground-truth box of a disk of radius r centred on pixel (i, j)
    is the (2r+1)-pixel square around that pixel.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    size = spec.size
    lo, hi = spec.count_range
    rmin, rmax = spec.radius_range
    if 2 * rmax + 1 > size:
        raise DataError(f"radius {rmax} does not fit in a {size}px scene")
    count = int(rng.integers(lo, hi + 1))
    placed = None
    for _ in range(spec.max_restarts):
        attempt = []
        for _ in range(count):
            r = int(rng.integers(rmin, rmax + 1))
            for _ in range(200):
                cy, cx = rng.integers(r, size - r, size=2)
                if all(math.hypot(cy - y, cx - x) >= r + q + spec.gap for y, x, q in attempt):
                    attempt.append((int(cy), int(cx), r))
                    break
            else:
                break
        if len(attempt) == count:
            placed = attempt
            break
    if placed is None:
        raise DataError(f"could not place {count} objects (seed {seed})")
    canvas = gaussian_filter(rng.normal(0.0, spec.noise, (size, size)), 1.0) * 2.0 + 120.0
    for cy, cx, r in placed:
        _render_crater(canvas, cy, cx, r, rng)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    boxes = [BBox(cx + 0.5, cy + 0.5, 2 * r + 1, 2 * r + 1) for cy, cx, r in placed]
    sid = scene_id if scene_id is not None else f"scene-{seed}"
    return SceneRecord(sid, image, count, [CRATER] if count else [], boxes)


def generate_dataset(n, seed, spec=None, prefix="scene"):
    base = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in base.spawn(n)]
    return [generate_synthetic_scene(s, spec, f"{prefix}-{i:05d}") for i, s in enumerate(seeds)]


# manifest + PNG storage

def write_manifest(records, out_dir, manifest_name="manifest.jsonl"):
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    lines = []
    for rec in records:
        rel = f"images/{rec.id}.png"
        Image.fromarray(rec.image, mode="L").save(os.path.join(out_dir, rel), optimize=False)
        lines.append(json.dumps({
            "id": rec.id,
            "png": rel,
            "count": rec.count,
            "classes": list(rec.classes),
            "gt_boxes": [[b.cx, b.cy, b.w, b.h] for b in rec.gt_boxes],
        }, sort_keys=True))
    path = os.path.join(out_dir, manifest_name)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_manifest(path):
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                image = np.asarray(Image.open(os.path.join(root, d["png"])).convert("L"))
                boxes = [BBox(*b) for b in d.get("gt_boxes", [])]
                records.append(SceneRecord(d["id"], image, int(d["count"]), list(d.get("classes", [])), boxes))
            except (KeyError, json.JSONDecodeError, OSError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
    return records


def count_histogram(records):
    return dict(sorted(Counter(r.count for r in records).items()))


# catalog

@dataclass(frozen=True)
class CatalogEntry:
    id: str
    x: float
    y: float
    diameter_km: float

    def __post_init__(self):
        if not self.diameter_km > 0:
            raise DataError(f"catalog entry {self.id}: diameter must be positive")


CATALOG_COLUMNS = ("id", "x", "y", "diameter_km")


def ingest_catalog(path, strict=False):
    """Parse a catalog CSV. Bad rows are logged with their line number and
    skipped, or raised when ``strict``."""
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in CATALOG_COLUMNS):
            raise DataError(f"{path}: header must contain {', '.join(CATALOG_COLUMNS)}; got {reader.fieldnames}")
        for row in reader:
            lineno = reader.line_num
            try:
                entries.append(CatalogEntry(row["id"], float(row["x"]), float(row["y"]), float(row["diameter_km"])))
            except (ValueError, TypeError) as exc:
                msg = f"{path}:{lineno}: rejected row ({exc})"
                if strict:
                    raise DataError(msg) from exc
                log.warning(msg)
    return entries


def write_catalog(path, entries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CATALOG_COLUMNS)
        for e in entries:
            w.writerow([e.id, repr(float(e.x)), repr(float(e.y)), repr(float(e.diameter_km))])


class GridIndex:
    """Uniform bucket grid over catalog circles; cells are as wide as the
    largest circle so each circle touches at most a 2x2 block of buckets."""

    def __init__(self, entries, radius_of):
        self.entries = list(entries)
        self._radius = np.array([radius_of(e) for e in self.entries])
        self._xy = np.array([(e.x, e.y) for e in self.entries]).reshape(-1, 2)
        self.cell = max(float(2 * self._radius.max()) if self.entries else 1.0, 1e-9)
        self._buckets = {}
        for i, ((x, y), r) in enumerate(zip(self._xy, self._radius)):
            for key in self._keys(x - r, y - r, x + r, y + r):
                self._buckets.setdefault(key, []).append(i)

    def _keys(self, x1, y1, x2, y2):
        c = self.cell
        for i in range(math.floor(x1 / c), math.floor(x2 / c) + 1):
            for j in range(math.floor(y1 / c), math.floor(y2 / c) + 1):
                yield i, j

    def query(self, x1, y1, x2, y2):
        """Indices of circles that intersect the closed window [x1, x2] x [y1, y2]."""
        if not self.entries:
            return []
        span = (x2 - x1) / self.cell * (y2 - y1) / self.cell
        if span > len(self._buckets):
            candidates = range(len(self.entries))
        else:
            candidates = {i for key in self._keys(x1, y1, x2, y2) for i in self._buckets.get(key, ())}
        return sorted(i for i in candidates if self._hits(i, x1, y1, x2, y2))

    def _hits(self, i, x1, y1, x2, y2):
        x, y = self._xy[i]
        dx = x - min(max(x, x1), x2)
        dy = y - min(max(y, y1), y2)
        return dx * dx + dy * dy <= self._radius[i] ** 2


def linear_scan_query(entries, radius_of, x1, y1, x2, y2):
    out = []
    for i, e in enumerate(entries):
        dx = e.x - min(max(e.x, x1), x2)
        dy = e.y - min(max(e.y, y1), y2)
        if dx * dx + dy * dy <= radius_of(e) ** 2:
            out.append(i)
    return out


def spatial_index_query(index, window):
    return index.query(*window)


def build_pixel_index(catalog, units="pixels", meters_per_pixel=METERS_PER_PIXEL):
    """Index whose coordinates are raster pixels. ``units`` is 'pixels' or 'meters'."""
    if units == "pixels":
        to_px = 1.0
    elif units == "meters":
        to_px = 1.0 / meters_per_pixel
    else:
        raise DataError(f"unsupported catalog units {units!r}")
    px_per_km = 1000.0 / meters_per_pixel
    scaled = [CatalogEntry(e.id, e.x * to_px, e.y * to_px, e.diameter_km) for e in catalog]
    return GridIndex(scaled, lambda e: e.diameter_km * px_per_km / 2)


def clip_scenes(raster, catalog, scene_size, samples, seed, units="pixels",
                meters_per_pixel=METERS_PER_PIXEL, max_attempts=None):
    """Cut random square scenes out of ``raster`` and label them from ``catalog``.

    A crater whose circle lies entirely inside the scene is counted; a crater
    whose circle crosses the scene border causes the scene to be discarded and
    another origin drawn. Returns fewer than ``samples`` scenes, with a
    warning, when the attempt budget runs out.
    """
    raster = np.asarray(raster)
    hr, wr = raster.shape[:2]
    if hr <= scene_size or wr <= scene_size:
        raise DataError(f"raster {hr}x{wr} is not larger than scene size {scene_size}")
    index = build_pixel_index(catalog, units, meters_per_pixel)
    px_per_km = 1000.0 / meters_per_pixel
    rng = np.random.default_rng(seed)
    max_attempts = max_attempts or 50 * samples
    scenes = []
    attempts = 0
    while len(scenes) < samples and attempts < max_attempts:
        attempts += 1
        oy = int(rng.integers(0, hr - scene_size + 1))
        ox = int(rng.integers(0, wr - scene_size + 1))
        boxes = []
        partial = False
        for i in index.query(ox, oy, ox + scene_size, oy + scene_size):
            e = index.entries[i]
            r = e.diameter_km * px_per_km / 2
            x1, y1, x2, y2 = e.x - r, e.y - r, e.x + r, e.y + r
            inside = x1 >= ox and y1 >= oy and x2 <= ox + scene_size and y2 <= oy + scene_size
            if not inside:
                # circles that only touch the border from outside do not count
                gx = e.x - min(max(e.x, ox), ox + scene_size)
                gy = e.y - min(max(e.y, oy), oy + scene_size)
                if gx * gx + gy * gy < r * r:
                    partial = True
                    break
                continue
            boxes.append(BBox(e.x - ox, e.y - oy, 2 * r, 2 * r))
        if partial:
            continue
        img = raster[oy:oy + scene_size, ox:ox + scene_size]
        scenes.append(SceneRecord(f"clip-{len(scenes):05d}-{oy}-{ox}", img.astype(np.uint8), len(boxes),
                                  [CRATER] if boxes else [], boxes))
    if len(scenes) < samples:
        log.warning("sampling budget exhausted: %d of %d scenes after %d attempts", len(scenes), samples, attempts)
    return scenes
