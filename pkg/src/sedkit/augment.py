"""Weak (geometric) and strong (photometric) augmentation.

Weak augmentation rescales the image content by a factor in
``[0.8, 1.0]``, pads it back onto the original canvas and flips it
horizontally with probability 0.5. Strong augmentation only touches pixel
values, so boxes computed for the weak view stay valid for the strong view
of the same image.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d


@dataclass(frozen=True)
class AugRecord:
    flip: bool
    resize_factor: float
    rng_seed: int


@dataclass(frozen=True)
class AugConfig:
    resize_range: tuple[float, float] = (0.8, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    # (probability, scale range, aspect-ratio range) per cutout pass
    cutouts: tuple = (
        (0.7, (0.05, 0.2), (0.3, 3.3)),
        (0.5, (0.02, 0.2), (0.1, 6.0)),
        (0.3, (0.02, 0.2), (0.05, 8.0)),
    )


DEFAULT_AUG = AugConfig()


@functools.lru_cache(maxsize=512)
def _area_weights_cached(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    scale = n_in / n_out
    lo = np.arange(n_out) * scale
    hi = lo + scale
    j = np.arange(n_in)
    overlap = np.clip(np.minimum(hi[:, None], j[None, :] + 1) - np.maximum(lo[:, None], j[None, :]), 0, None)
    out = (overlap / scale).astype(dtype)
    out.flags.writeable = False
    return out


def _area_weights(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) matrix averaging input pixels by fractional overlap."""
    return _area_weights_cached(int(n_in), int(n_out), np.dtype(dtype).str)


def resize_area(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average resampling of an (H, W, C) image."""
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        return image.copy()
    wh = _area_weights(h, out_h, image.dtype)
    ww = _area_weights(w, out_w, image.dtype)
    planes = np.ascontiguousarray(image.transpose(2, 0, 1))      # (C, H, W)
    out = wh @ (planes @ ww.T)
    return np.ascontiguousarray(out.transpose(1, 2, 0))


def downsample(image: np.ndarray, s: int) -> np.ndarray:
    """Box-filter downsampling by ``2**s`` per axis.

    Works on (H, W, C) or batched (B, H, W, C) arrays.
    """
    if int(s) != s or s < 1:
        raise ValueError(f"downsample exponent must be a positive integer, got {s}")
    k = 2 ** int(s)
    batched = image.ndim == 4
    x = image if batched else image[None]
    b, h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"image {h}x{w} not divisible by {k}")
    out = None
    for dy in range(k):
        for dx in range(k):
            part = x[:, dy::k, dx::k]
            out = part.copy() if out is None else out + part
    out *= out.dtype.type(1.0 / (k * k))
    return out if batched else out[0]


def flip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = boxes.copy()
    out[:, 0] = width - boxes[:, 2]
    out[:, 2] = width - boxes[:, 0]
    return out


def apply_weak(image: np.ndarray, boxes, record: AugRecord, fill: float = 0.5):
    """Replay the geometry in ``record`` on an image and its boxes."""
    h, w = image.shape[:2]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    nh = max(1, min(h, int(round(h * record.resize_factor))))
    nw = max(1, min(w, int(round(w * record.resize_factor))))
    if (nh, nw) == (h, w):
        out = image.copy()
    else:
        out = np.full_like(image, fill)
        out[:nh, :nw] = resize_area(image, nh, nw)
        boxes = boxes * np.array([nw / w, nh / h, nw / w, nh / h])
    if record.flip:
        out = np.ascontiguousarray(out[:, ::-1])
        boxes = flip_boxes(boxes, w)
    return out, boxes


def sample_weak(rng: np.random.Generator, cfg: AugConfig = DEFAULT_AUG) -> AugRecord:
    seed = int(rng.integers(0, 2 ** 63 - 1))
    sub = np.random.default_rng(seed)
    factor = float(sub.uniform(*cfg.resize_range))
    flip = bool(sub.random() < cfg.flip_prob)
    return AugRecord(flip=flip, resize_factor=factor, rng_seed=seed)


def weak_augment(scene, rng: np.random.Generator, cfg: AugConfig = DEFAULT_AUG, fill: float = 0.5):
    """Returns ``(image, boxes, AugRecord)`` for a scene."""
    record = sample_weak(rng, cfg)
    image, boxes = apply_weak(scene.image, scene.boxes, record, fill)
    return image, boxes, record


def _gray(image: np.ndarray) -> np.ndarray:
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def color_jitter(image, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    out = np.clip(image * brightness, 0, 1)
    m = _gray(out).mean()
    out = np.clip((out - m) * contrast + m, 0, 1)
    g = _gray(out)[..., None]
    return np.clip((out - g) * saturation + g, 0, 1)


def grayscale(image) -> np.ndarray:
    g = _gray(image)
    return np.repeat(g[..., None], 3, axis=-1).astype(image.dtype)


def blur_kernel_size(sigma: float, image_size: int) -> int:
    k = math.ceil(6 * sigma)
    if k % 2 == 0:
        k += 1
    cap = image_size // 8
    if cap % 2 == 0:
        cap -= 1
    return max(1, min(k, cap))


def gaussian_blur(image, sigma: float) -> np.ndarray:
    k = blur_kernel_size(sigma, min(image.shape[:2]))
    if k == 1:
        return image.copy()
    r = k // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    kern = np.exp(-t * t / (2 * sigma * sigma))
    kern /= kern.sum()
    kern = kern.astype(image.dtype)
    out = convolve1d(image, kern, axis=0, mode="reflect")
    return convolve1d(out, kern, axis=1, mode="reflect")


def cutout_rect(rng, h: int, w: int, scale, ratio, tries: int = 10):
    """Sample an erase rectangle ``(y, x, eh, ew)`` or None."""
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(tries):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_r))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            return y, x, eh, ew
    return None


def cutout(image, rng, scale, ratio, fill: float):
    out = image.copy()
    rect = cutout_rect(rng, image.shape[0], image.shape[1], scale, ratio)
    if rect is not None:
        y, x, eh, ew = rect
        out[y:y + eh, x:x + ew] = fill
    return out, rect


def strong_augment(image: np.ndarray, rng: np.random.Generator,
                   cfg: AugConfig = DEFAULT_AUG, fill: float = 0.5) -> np.ndarray:
    """Color jitter, grayscale, blur and three cutout passes, in that order."""
    out = image
    if rng.random() < cfg.jitter_prob:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        out = color_jitter(out, b, c, s)
    if rng.random() < cfg.gray_prob:
        out = grayscale(out)
    if rng.random() < cfg.blur_prob:
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma))
    for prob, scale, ratio in cfg.cutouts:
        if rng.random() < prob:
            out, _ = cutout(out, rng, scale, ratio, fill)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)
