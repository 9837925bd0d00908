"""Deterministic synthetic detection scenes with wide object-scale variance.

Each scene is a pure function of ``(seed, DatasetConfig)``. Objects are
filled circles, squares and triangles whose side length is drawn
log-uniformly, so the sqrt-area distribution spans roughly a decade.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sedkit.geometry import Box

CLASS_NAMES = ("circle", "square", "triangle")
CLASS_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.25, 0.75, 0.30],
    [0.25, 0.35, 0.90],
])
MANIFEST_VERSION = 1
_ID_STRIDE = 1_000_000


class DatasetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 128
    num_scenes: int = 600
    num_test: int = 200
    labeled_fraction: float = 0.10
    num_classes: int = 3
    min_size: float = 8.0
    max_size: float = 96.0
    min_objects: int = 1
    max_objects: int = 4
    max_distractors: int = 3
    noise_std: float = 0.03
    color_jitter: float = 0.08
    seed: int = 0

    def validate(self) -> "DatasetConfig":
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise DatasetConfigError(
                f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.image_size <= 0 or self.image_size % 2:
            raise DatasetConfigError(f"image_size must be a positive even integer, got {self.image_size}")
        if not 0 < self.min_size <= self.max_size:
            raise DatasetConfigError("need 0 < min_size <= max_size")
        if self.max_size > self.image_size:
            raise DatasetConfigError(
                f"max_size {self.max_size} exceeds image_size {self.image_size}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise DatasetConfigError("need 1 <= min_objects <= max_objects")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise DatasetConfigError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.num_scenes < 1 or self.num_test < 0:
            raise DatasetConfigError("num_scenes must be >= 1 and num_test >= 0")
        return self


@dataclass
class Scene:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    boxes: np.ndarray          # (N, 4) float64
    labels: np.ndarray         # (N,) int64
    scene_id: int
    seed: int

    @property
    def annotations(self) -> list[tuple[Box, int]]:
        return [(Box(*b), int(c)) for b, c in zip(self.boxes.tolist(), self.labels)]


@dataclass
class Dataset:
    labeled: list[Scene]
    unlabeled: list[Scene]
    test: list[Scene]
    config: DatasetConfig = field(default_factory=DatasetConfig)

    def unlabeled_images(self) -> list[np.ndarray]:
        """Images of the unlabeled split with their annotations withheld."""
        return [s.image for s in self.unlabeled]


def scene_seed(master_seed: int, index: int) -> int:
    state = np.random.SeedSequence([master_seed, index]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def _shape_mask(kind: int, x0: int, y0: int, side: int, yy, xx) -> np.ndarray:
    cy, cx = yy + 0.5, xx + 0.5
    if kind == 0:
        r = side / 2.0
        return (cx - (x0 + r)) ** 2 + (cy - (y0 + r)) ** 2 <= r * r
    if kind == 1:
        return (cx >= x0) & (cx < x0 + side) & (cy >= y0) & (cy < y0 + side)
    # isosceles triangle, apex up
    t = (cy - y0) / side
    half = 0.5 * side * t
    mid = x0 + side / 2.0
    return (t >= 0) & (t <= 1) & (cx >= mid - half) & (cx <= mid + half)


def _background(rng, size: int, cfg: DatasetConfig) -> np.ndarray:
    base = rng.uniform(0.35, 0.6, size=3)
    gdir = rng.normal(size=2)
    gdir /= np.linalg.norm(gdir) + 1e-12
    amp = rng.uniform(0.0, 0.15)
    coords = (np.arange(size) + 0.5) / size - 0.5
    ramp = gdir[0] * coords[None, :] + gdir[1] * coords[:, None]
    img = base[None, None, :] + amp * ramp[:, :, None]
    img = img + rng.normal(0.0, cfg.noise_std, size=(size, size, 3))
    return img


def _add_distractors(rng, img: np.ndarray, cfg: DatasetConfig) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(rng.integers(0, cfg.max_distractors + 1)):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(2.0, 6.0)
        tone = rng.uniform(0.2, 0.8)
        w = 0.6 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img *= 1 - w[:, :, None]
        img += w[:, :, None] * tone


def generate_scene(seed: int, cfg: DatasetConfig, scene_id: int = 0) -> Scene:
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    img = _background(rng, size, cfg)
    _add_distractors(rng, img, cfg)
    yy, xx = np.mgrid[0:size, 0:size]

    n_target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes, labels = [], []
    lo, hi = math.log(cfg.min_size), math.log(cfg.max_size)
    attempts = 0
    while len(boxes) < n_target and attempts < 40 * n_target:
        attempts += 1
        kind = int(rng.integers(0, cfg.num_classes))
        side = max(int(round(math.exp(rng.uniform(lo, hi)))), 2)
        x0 = int(rng.integers(0, size - side + 1))
        y0 = int(rng.integers(0, size - side + 1))
        cand = (x0 - 1, y0 - 1, x0 + side + 1, y0 + side + 1)
        if any(cand[0] < b[2] and b[0] < cand[2] and cand[1] < b[3] and b[1] < cand[3]
               for b in boxes):
            continue
        mask = _shape_mask(kind, x0, y0, side, yy, xx)
        ys, xs = np.nonzero(mask)
        if len(ys) == 0:
            continue
        color = np.clip(CLASS_COLORS[kind] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
        img[mask] = color + rng.normal(0.0, cfg.noise_std, size=(len(ys), 3))
        boxes.append((float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)))
        labels.append(kind)

    return Scene(
        image=np.clip(img, 0.0, 1.0).astype(np.float32),
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
        scene_id=scene_id,
        seed=seed,
    )


def split_counts(cfg: DatasetConfig) -> tuple[int, int, int]:
    n_lab = int(math.floor(cfg.labeled_fraction * cfg.num_scenes + 0.5))
    n_lab = max(1, min(cfg.num_scenes, n_lab))
    return n_lab, cfg.num_scenes - n_lab, cfg.num_test


def manifest_records(cfg: DatasetConfig) -> list[dict]:
    cfg.validate()
    n_lab, n_unl, n_test = split_counts(cfg)
    splits = ["labeled"] * n_lab + ["unlabeled"] * n_unl + ["test"] * n_test
    return [
        {"scene_id": cfg.seed * _ID_STRIDE + i, "seed": scene_seed(cfg.seed, i), "split": split}
        for i, split in enumerate(splits)
    ]


def generate_dataset(cfg: DatasetConfig) -> Dataset:
    records = manifest_records(cfg)
    out = {"labeled": [], "unlabeled": [], "test": []}
    for rec in records:
        out[rec["split"]].append(generate_scene(rec["seed"], cfg, scene_id=rec["scene_id"]))
    return Dataset(out["labeled"], out["unlabeled"], out["test"], cfg)


def size_cdf(scenes) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF of sqrt(box area) over all ground-truth boxes.

    Returns ``(sizes, fraction)`` where ``fraction[k]`` is the share of boxes
    with sqrt-area <= ``sizes[k]``; sizes are the distinct observed values.
    """
    sizes = []
    for s in scenes:
        b = np.asarray(s.boxes).reshape(-1, 4)
        sizes.append(np.sqrt((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])))
    sizes = np.concatenate(sizes) if sizes else np.zeros(0)
    if len(sizes) == 0:
        raise ValueError("size_cdf needs at least one ground-truth box")
    values, counts = np.unique(sizes, return_counts=True)
    return values, np.cumsum(counts) / len(sizes)


def write_manifest(cfg: DatasetConfig, path) -> dict:
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "config": dataclasses.asdict(cfg),
        "scenes": manifest_records(cfg),
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> tuple[DatasetConfig, list[dict]]:
    manifest = json.loads(Path(path).read_text())
    if manifest.get("schema_version") != MANIFEST_VERSION:
        raise DatasetConfigError(
            f"manifest schema version {manifest.get('schema_version')} != {MANIFEST_VERSION}")
    return DatasetConfig(**manifest["config"]).validate(), manifest["scenes"]


def dataset_from_manifest(path) -> Dataset:
    cfg, records = read_manifest(path)
    out = {"labeled": [], "unlabeled": [], "test": []}
    for rec in records:
        out[rec["split"]].append(generate_scene(rec["seed"], cfg, scene_id=rec["scene_id"]))
    return Dataset(out["labeled"], out["unlabeled"], out["test"], cfg)


def export_scene(scene: Scene, out_dir) -> tuple[Path, Path]:
    """Write ``<id>.npy`` (float32 image) and ``<id>.json`` (boxes sidecar)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_path = out_dir / f"{scene.scene_id}.npy"
    np.save(img_path, scene.image.astype("<f4"))
    side = {
        "schema_version": MANIFEST_VERSION,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "boxes": [
            {"x1": b[0], "y1": b[1], "x2": b[2], "y2": b[3], "class_id": int(c)}
            for b, c in zip(scene.boxes.tolist(), scene.labels)
        ],
    }
    box_path = out_dir / f"{scene.scene_id}.json"
    box_path.write_text(json.dumps(side, indent=1) + "\n")
    return img_path, box_path


def load_exported_scene(img_path, box_path) -> Scene:
    side = json.loads(Path(box_path).read_text())
    recs = side["boxes"]
    return Scene(
        image=np.load(img_path),
        boxes=np.asarray([[r["x1"], r["y1"], r["x2"], r["y2"]] for r in recs], dtype=np.float64).reshape(-1, 4),
        labels=np.asarray([r["class_id"] for r in recs], dtype=np.int64),
        scene_id=side["scene_id"],
        seed=side["seed"],
    )


def dataset_mean(scenes) -> float:
    """Mean intensity over all pixels and channels (cutout/padding fill)."""
    return float(np.mean([s.image.mean() for s in scenes]))
