import hashlib
import logging

import numpy as np
import pytest

from wsod.data import (CatalogEntry, DataError, GridIndex, SceneSpec, build_pixel_index, clip_scenes,
                       count_histogram, generate_dataset, generate_synthetic_scene, ingest_catalog,
                       linear_scan_query, read_manifest, spatial_index_query, write_catalog, write_manifest)


def test_blank_scene():
    rec = generate_synthetic_scene(0, SceneSpec(count_range=(0, 0)))
    assert rec.count == 0 and rec.gt_boxes == [] and rec.classes == []
    assert rec.image.dtype == np.uint8 and rec.image.shape == (64, 64)


def test_single_disk_contained():
    rec = generate_synthetic_scene(1, SceneSpec(count_range=(1, 1), radius_range=(8, 8)))
    (box,) = rec.gt_boxes
    assert box.w == box.h == 17
    x1, y1, x2, y2 = box.corners
    assert x1 >= 0 and y1 >= 0 and x2 <= 64 and y2 <= 64


def test_disk_is_centred_in_its_box():
    rec = generate_synthetic_scene(2, SceneSpec(count_range=(1, 1), radius_range=(10, 10), noise=0.0))
    (box,) = rec.gt_boxes
    cy, cx = int(box.cy - 0.5), int(box.cx - 0.5)
    img = rec.image.astype(float)
    assert img[cy, cx] < 100 < img[cy, cx + 9]  # dark floor, bright rim


def test_unplaceable_raises_with_seed():
    with pytest.raises(DataError, match="seed 7"):
        generate_synthetic_scene(7, SceneSpec(count_range=(9, 9), radius_range=(12, 12), max_restarts=3))
    with pytest.raises(DataError):
        generate_synthetic_scene(7, SceneSpec(size=20, radius_range=(12, 12)))


def test_count_histogram_uniform():
    recs = generate_dataset(1000, 5, SceneSpec(size=48, radius_range=(5, 7)))
    hist = count_histogram(recs)
    sigma = np.sqrt(1000 * 0.25 * 0.75)
    assert sorted(hist) == [1, 2, 3, 4]
    assert all(abs(v - 250) <= 3 * sigma for v in hist.values())
    assert all(r.count == len(r.gt_boxes) for r in recs)


def _manifest_bytes(tmp_path, name, seed):
    out = tmp_path / name
    path = write_manifest(generate_dataset(12, seed), out)
    digest = hashlib.sha256(open(path, "rb").read())
    for f in sorted((out / "images").iterdir()):
        digest.update(f.read_bytes())
    return digest.hexdigest()


def test_dataset_byte_deterministic(tmp_path):
    assert _manifest_bytes(tmp_path, "a", 3) == _manifest_bytes(tmp_path, "b", 3)
    assert _manifest_bytes(tmp_path, "a", 3) != _manifest_bytes(tmp_path, "c", 4)


def test_manifest_round_trip(tmp_path):
    recs = generate_dataset(5, 9)
    path = write_manifest(recs, tmp_path)
    back = read_manifest(path)
    assert len(open(path).read().splitlines()) == 5
    for a, b in zip(recs, back):
        assert a.id == b.id and a.count == b.count and a.gt_boxes == b.gt_boxes
        np.testing.assert_array_equal(a.image, b.image)


def test_manifest_bad_line(tmp_path):
    bad = tmp_path / "m.jsonl"
    bad.write_text('{"id": "x"}\n')
    with pytest.raises(DataError, match="m.jsonl:1"):
        read_manifest(bad)


def test_catalog_ingest(tmp_path, caplog):
    path = tmp_path / "cat.csv"
    path.write_text("id,x,y,diameter_km\na,1,2,0.5\nb,3,4,1.0\nc,5,6,2\nd,7,8,-1\n")
    with caplog.at_level(logging.WARNING):
        entries = ingest_catalog(path)
    assert [e.id for e in entries] == ["a", "b", "c"]
    assert ":5:" in caplog.text
    with pytest.raises(DataError, match=":5:"):
        ingest_catalog(path, strict=True)
    missing = tmp_path / "bad.csv"
    missing.write_text("id,x,diameter_km\n")
    with pytest.raises(DataError, match="header"):
        ingest_catalog(missing)


def test_catalog_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    entries = [CatalogEntry(f"c{i}", *rng.uniform(0, 100, 2), rng.uniform(0.1, 3)) for i in range(20)]
    write_catalog(tmp_path / "c.csv", entries)
    assert ingest_catalog(tmp_path / "c.csv") == entries


def _random_catalog(rng, n, extent, dmax):
    return [CatalogEntry(str(i), *rng.uniform(0, extent, 2), rng.uniform(0.1, dmax)) for i in range(n)]


def test_index_trivial_windows():
    rng = np.random.default_rng(1)
    index = build_pixel_index(_random_catalog(rng, 50, 500, 3))
    assert index.query(-1e6, -1e6, 1e6, 1e6) == list(range(50))
    assert spatial_index_query(index, (5000, 5000, 5001, 5001)) == []
    assert GridIndex([], lambda e: 1.0).query(0, 0, 1, 1) == []


def test_index_matches_linear_scan():
    rng = np.random.default_rng(2)
    cat = _random_catalog(rng, 300, 1000, 4)
    index = build_pixel_index(cat)
    radius = index._radius
    for _ in range(2000):
        x1, y1 = rng.uniform(-50, 1000, 2)
        w, h = rng.uniform(0, 200, 2)
        expected = linear_scan_query(index.entries, lambda e: e.diameter_km * 5, x1, y1, x1 + w, y1 + h)
        assert index.query(x1, y1, x1 + w, y1 + h) == expected
    assert np.allclose(radius, [e.diameter_km * 5 for e in cat])


def test_metric_catalog_units():
    cat = [CatalogEntry("a", 1000.0, 2000.0, 1.0)]
    index = build_pixel_index(cat, units="meters")
    assert (index.entries[0].x, index.entries[0].y) == (10.0, 20.0)
    with pytest.raises(DataError):
        build_pixel_index(cat, units="furlongs")


def test_clip_counts_contained_crater():
    raster = np.zeros((100, 100), dtype=np.uint8)
    cat = [CatalogEntry("a", 50.0, 50.0, 1.0)]  # 10 px diameter at 100 m/px
    scenes = clip_scenes(raster, cat, 80, 5, seed=0)
    for s in scenes:
        oy, ox = (int(v) for v in s.id.split("-")[2:])
        if s.count:
            (box,) = s.gt_boxes
            assert box.w == box.h == 10
            assert (box.cx + ox, box.cy + oy) == (50.0, 50.0)


def test_clip_empty_catalog():
    scenes = clip_scenes(np.zeros((50, 50), dtype=np.uint8), [], 32, 4, seed=1)
    assert len(scenes) == 4 and all(s.count == 0 for s in scenes)


def _origin(scene):
    oy, ox = (int(v) for v in scene.id.split("-")[2:])
    return oy, ox


def test_clip_straddling_scene_discarded():
    # 32 px scenes on a 40 px raster have origins 0..8. The crater spans
    # x in [30, 40], so only ox = 8 contains it; every other column origin
    # cuts through it and must be discarded.
    raster = np.zeros((40, 40), dtype=np.uint8)
    cat = [CatalogEntry("edge", 35.0, 20.0, 1.0)]
    scenes = clip_scenes(raster, cat, 32, 5, seed=0)
    assert len(scenes) == 5
    for s in scenes:
        assert _origin(s)[1] == 8 and s.count == 1


def test_clip_budget_warning(caplog):
    # a 30 px crater at the centre of a 40 px raster crosses every 20 px window
    raster = np.zeros((40, 40), dtype=np.uint8)
    cat = [CatalogEntry("c", 20.0, 20.0, 3.0)]
    with caplog.at_level(logging.WARNING):
        scenes = clip_scenes(raster, cat, 20, 3, seed=0, max_attempts=30)
    assert scenes == []
    assert "budget exhausted" in caplog.text


def test_clip_rejects_small_raster():
    with pytest.raises(DataError):
        clip_scenes(np.zeros((10, 10)), [], 16, 1, seed=0)


def test_clip_crater_touching_scene_edge_is_kept():
    # circle flush with the left scene edge: inside in raster coordinates even
    # though the centre-relative box may round a hair past zero
    cat = [CatalogEntry("edge", 312.0 + 7.69387078385267, 20.0, 1.538774156770538)]
    raster = np.zeros((400, 400), dtype=np.uint8)
    hits = [s for s in clip_scenes(raster, cat, 48, 400, seed=0) if s.id.endswith("-312")]
    for s in hits:
        assert s.count == 1
