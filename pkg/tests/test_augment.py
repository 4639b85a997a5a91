import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from nmfnet.errors import ShapeError
from nmfnet.schemas.train import AugmentConfig
from nmfnet.services.augment import (
    CROP,
    augment,
    center_crop,
    color_jitter,
    eval_transform,
    hflip,
    transform_batch,
)


@pytest.fixture
def image(rng):
    return rng.uniform(0.0, 1.0, (3, 32, 32)).astype(np.float32)


def test_hflip_reverses_columns(image):
    assert_array_equal(hflip(image)[:, :, 0], image[:, :, -1])
    assert_array_equal(hflip(hflip(image)), image)


def test_center_crop(image):
    out = center_crop(image)
    assert out.shape == (3, CROP, CROP)
    assert_array_equal(out, image[:, 2:30, 2:30])
    assert_array_equal(eval_transform(image), out)


def test_jitter_without_deltas_is_identity(image, rng):
    assert_array_equal(color_jitter(image, rng, (0.0, 0.0, 0.0)), image)


def test_jitter_stays_in_range_and_keeps_dtype(image, rng):
    out = color_jitter(image, rng, (0.5, 0.5, 0.5))
    assert out.dtype == image.dtype
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert not np.array_equal(out, image)


def test_augment_is_seeded(image):
    a = augment(image, np.random.default_rng(9))
    b = augment(image, np.random.default_rng(9))
    assert a.shape == (3, CROP, CROP)
    assert_array_equal(a, b)


def test_augment_with_everything_disabled_is_center_crop(image, rng):
    cfg = AugmentConfig(hflip=False, color_jitter=(0.0, 0.0, 0.0), crop_32_to_28=False)
    assert_array_equal(augment(image, rng, cfg), center_crop(image))


def test_random_crop_is_a_window_of_the_input(image, rng):
    cfg = AugmentConfig(hflip=False, color_jitter=(0.0, 0.0, 0.0))
    out = augment(image, rng, cfg)
    windows = [image[:, t : t + CROP, l : l + CROP] for t in range(5) for l in range(5)]
    assert any(np.array_equal(out, w) for w in windows)


def test_transform_batch(rng):
    images = rng.uniform(0.0, 1.0, (4, 3, 32, 32))
    assert transform_batch(images, rng).shape == (4, 3, CROP, CROP)
    assert_allclose(transform_batch(images, training=False), images[:, :, 2:30, 2:30])
    with pytest.raises(ValueError):
        transform_batch(images)


def test_rejects_small_or_grey_images(rng):
    with pytest.raises(ShapeError):
        eval_transform(np.zeros((3, 20, 20)))
    with pytest.raises(ShapeError):
        augment(np.zeros((1, 32, 32)), rng)
