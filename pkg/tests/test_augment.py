import numpy as np
import pytest
from hypothesis import given, strategies as st

from sedkit.augment import (AugConfig, AugRecord, apply_weak, blur_kernel_size, color_jitter, cutout,
                            downsample, flip_boxes, gaussian_blur, grayscale, resize_area,
                            sample_weak, strong_augment)

NEVER = AugConfig(flip_prob=0.0, resize_range=(1.0, 1.0), jitter_prob=0.0, gray_prob=0.0,
                  blur_prob=0.0, cutouts=((0.0, (0.05, 0.2), (0.3, 3.3)),))


def test_weak_identity_record(rng):
    img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    boxes = np.array([[1.0, 2.0, 10.0, 12.0]])
    out, b = apply_weak(img, boxes, AugRecord(False, 1.0, 0))
    np.testing.assert_array_equal(out, img)
    np.testing.assert_array_equal(b, boxes)
    rec = sample_weak(rng, NEVER)
    assert rec.flip is False and rec.resize_factor == 1.0


def test_flip_twice_restores(rng):
    img = rng.uniform(size=(16, 24, 3))
    boxes = np.array([[2.0, 3.0, 7.0, 9.0]])
    rec = AugRecord(True, 1.0, 0)
    once, b1 = apply_weak(img, boxes, rec)
    twice, b2 = apply_weak(once, b1, rec)
    np.testing.assert_array_equal(twice, img)
    np.testing.assert_allclose(b2, boxes)


def test_flip_box_formula():
    np.testing.assert_array_equal(flip_boxes([[10, 0, 20, 10]], 100), [[80, 0, 90, 10]])


def test_weak_resize_keeps_box_on_content():
    img = np.zeros((40, 40, 3))
    img[10:20, 10:30] = 1.0
    out, b = apply_weak(img, [[10, 10, 30, 20]], AugRecord(False, 0.5, 0), fill=0.25)
    assert out.shape == img.shape
    np.testing.assert_allclose(b, [[5, 5, 15, 10]])
    np.testing.assert_allclose(out[5:10, 5:15], 1.0)
    assert np.all(out[20:, :] == 0.25)


def test_strong_identity_when_everything_misses(rng):
    img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    np.testing.assert_array_equal(strong_augment(img, rng, NEVER), img)


def test_grayscale_equal_channels(rng):
    g = grayscale(rng.uniform(size=(8, 8, 3)))
    np.testing.assert_array_equal(g[..., 0], g[..., 1])
    np.testing.assert_array_equal(g[..., 1], g[..., 2])


def test_cutout_area(rng):
    img = np.zeros((128, 128, 3))
    out, rect = cutout(img, rng, (0.1, 0.1), (1.0, 1.0), fill=0.5)
    y, x, h, w = rect
    assert abs(h * w - 0.1 * 128 * 128) <= 2 * 41 + 1     # 1638.4 px^2 up to rounding of sides
    mask = np.all(out == 0.5, axis=-1)
    assert mask.sum() == h * w and mask[y:y + h, x:x + w].all()


def test_color_jitter_neutral_factors(rng):
    img = rng.uniform(size=(8, 8, 3))
    np.testing.assert_allclose(color_jitter(img, 1.0, 1.0, 1.0), img, atol=1e-12)


def test_blur_preserves_constant_and_kernel_cap():
    img = np.full((32, 32, 3), 0.3, dtype=np.float32)
    np.testing.assert_allclose(gaussian_blur(img, 1.5), img, atol=1e-6)
    assert blur_kernel_size(2.0, 128) == 13
    assert blur_kernel_size(2.0, 64) == 7
    assert blur_kernel_size(0.1, 128) == 1


@given(st.integers(0, 1000))
def test_strong_stays_in_range_and_keeps_shape(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    out = strong_augment(img, rng)
    assert out.shape == img.shape and out.dtype == img.dtype
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_downsample_examples():
    with pytest.raises(ValueError):
        downsample(np.zeros((4, 4, 3)), 0)
    assert downsample(np.zeros((128, 128, 3)), 1).shape == (64, 64, 3)
    c = np.full((16, 16, 3), 0.7)
    np.testing.assert_allclose(downsample(c, 2), np.full((4, 4, 3), 0.7))
    x = np.repeat(np.array([[0.0, 1.0], [1.0, 0.0]])[:, :, None], 3, axis=2)
    np.testing.assert_allclose(downsample(x, 1), np.full((1, 1, 3), 0.5))


@given(st.integers(1, 3), st.integers(0, 100))
def test_downsample_is_block_mean(s, seed):
    rng = np.random.default_rng(seed)
    k = 2 ** s
    x = rng.uniform(size=(2, 2 * k, 3 * k, 3))
    ref = x.reshape(2, 2, k, 3, k, 3).mean(axis=(2, 4))
    np.testing.assert_allclose(downsample(x, s), ref, atol=1e-12)


def test_resize_area_matches_downsample_on_integer_factor(rng):
    x = rng.uniform(size=(16, 16, 3))
    np.testing.assert_allclose(resize_area(x, 8, 8), downsample(x, 1), atol=1e-12)
    y = resize_area(x, 11, 13)
    assert y.shape == (11, 13, 3)
    assert y.mean() == pytest.approx(x.mean(), rel=1e-12)
