import hashlib
import math

import numpy as np
import pytest

from sedkit.synthdata import (DatasetConfig, DatasetConfigError, dataset_from_manifest, export_scene,
                              generate_dataset, generate_scene, load_exported_scene, manifest_records,
                              read_manifest, scene_seed, size_cdf, split_counts, write_manifest)

SMALL = DatasetConfig(num_scenes=20, num_test=5, labeled_fraction=0.25)


def digest(scenes):
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.image.tobytes())
        h.update(s.boxes.tobytes())
        h.update(s.labels.tobytes())
    return h.hexdigest()


def test_scene_is_deterministic():
    a = generate_scene(42, SMALL)
    b = generate_scene(42, SMALL)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.boxes, b.boxes)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_scene_contract():
    s = generate_scene(3, SMALL)
    assert s.image.shape == (128, 128, 3) and s.image.dtype == np.float32
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert 1 <= len(s.boxes) <= SMALL.max_objects
    assert np.all(s.boxes[:, 2] > s.boxes[:, 0]) and np.all(s.boxes[:, 3] > s.boxes[:, 1])
    assert s.boxes.min() >= 0 and s.boxes.max() <= 128
    assert set(s.labels.tolist()) <= {0, 1, 2}


def test_max_objects_one_gives_one_box():
    cfg = DatasetConfig(min_objects=1, max_objects=1)
    for seed in range(20):
        assert len(generate_scene(seed, cfg).boxes) == 1


def test_boxes_are_tight_around_shape_pixels():
    from sedkit.synthdata import CLASS_COLORS
    cfg = DatasetConfig(max_objects=1, noise_std=0.0, max_distractors=0, color_jitter=0.0)
    for seed in range(10):
        s = generate_scene(seed, cfg)
        color = np.clip(CLASS_COLORS[s.labels[0]], 0, 1).astype(np.float32)
        ys, xs = np.nonzero(np.all(s.image == color, axis=-1))
        np.testing.assert_array_equal(s.boxes[0], [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])


def test_size_spread_matches_log_uniform_law():
    cfg = DatasetConfig()
    sizes = np.concatenate([np.sqrt((s.boxes[:, 2] - s.boxes[:, 0]) * (s.boxes[:, 3] - s.boxes[:, 1]))
                            for s in (generate_scene(scene_seed(7, i), cfg) for i in range(1000))])
    ratio = np.percentile(sizes, 90) / np.percentile(sizes, 10)
    # oracle: direct sampling of the configured law
    draws = np.exp(np.random.default_rng(0).uniform(math.log(cfg.min_size), math.log(cfg.max_size), 200000))
    oracle = np.percentile(draws, 90) / np.percentile(draws, 10)
    assert oracle == pytest.approx((cfg.max_size / cfg.min_size) ** 0.8, rel=0.02)
    assert ratio >= 5.0


def test_split_counts():
    assert split_counts(DatasetConfig()) == (60, 540, 200)
    assert split_counts(DatasetConfig(labeled_fraction=1.0))[1] == 0
    with pytest.raises(DatasetConfigError, match="labeled_fraction"):
        DatasetConfig(labeled_fraction=0.0).validate()


def test_dataset_splits_and_seeds():
    ds = generate_dataset(SMALL)
    assert (len(ds.labeled), len(ds.unlabeled), len(ds.test)) == (5, 15, 5)
    ds2 = generate_dataset(SMALL)
    assert digest(ds.labeled + ds.unlabeled + ds.test) == digest(ds2.labeled + ds2.unlabeled + ds2.test)
    other = generate_dataset(DatasetConfig(num_scenes=20, num_test=5, labeled_fraction=0.25, seed=1))
    ids_a = {s.scene_id for s in ds.labeled + ds.unlabeled + ds.test}
    ids_b = {s.scene_id for s in other.labeled + other.unlabeled + other.test}
    assert not ids_a & ids_b
    assert {digest([s]) for s in ds.labeled}.isdisjoint({digest([s]) for s in other.labeled})
    assert len(ds.unlabeled_images()) == 15


def test_manifest_round_trip(tmp_path):
    m1 = write_manifest(SMALL, tmp_path / "a.json")
    m2 = write_manifest(SMALL, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert m1 == m2
    cfg, recs = read_manifest(tmp_path / "a.json")
    assert cfg == SMALL and recs == manifest_records(SMALL)
    assert {r["split"] for r in recs} == {"labeled", "unlabeled", "test"}
    ds = dataset_from_manifest(tmp_path / "a.json")
    assert digest(ds.test) == digest(generate_dataset(SMALL).test)


def test_export_round_trip(tmp_path):
    s = generate_scene(5, SMALL, scene_id=17)
    img, side = export_scene(s, tmp_path)
    back = load_exported_scene(img, side)
    np.testing.assert_array_equal(back.image, s.image)
    np.testing.assert_array_equal(back.boxes, s.boxes)
    np.testing.assert_array_equal(back.labels, s.labels)
    assert back.scene_id == 17


class _S:
    def __init__(self, boxes):
        self.boxes = np.asarray(boxes, dtype=float)


def test_size_cdf_examples():
    sizes, frac = size_cdf([_S([[0, 0, 8, 8]])])
    np.testing.assert_array_equal(sizes, [8.0])
    np.testing.assert_array_equal(frac, [1.0])
    sizes, frac = size_cdf([_S([[0, 0, 10, 10], [0, 0, 30, 30]]), _S([[0, 0, 20, 20]])])
    np.testing.assert_allclose(sizes, [10, 20, 30])
    np.testing.assert_allclose(frac, [1 / 3, 2 / 3, 1])


def test_size_cdf_monotone_on_real_data():
    _, frac = size_cdf(generate_dataset(SMALL).labeled)
    assert np.all(np.diff(frac) > 0) and frac[-1] == 1.0
