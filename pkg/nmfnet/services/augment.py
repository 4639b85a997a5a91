"""Training-time image augmentation for [3, 32, 32] inputs in [0, 1]."""
from typing import Optional

import numpy as np

from ..core.tensor import Tensor
from ..errors import ShapeError
from ..schemas.train import AugmentConfig

CROP = 28
# ITU-R 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114]).reshape(3, 1, 1)


def _check(image: Tensor) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a [3, H, W] image, got {image.shape}")
    if image.shape[1] < CROP or image.shape[2] < CROP:
        raise ShapeError(f"image {image.shape[1:]} is smaller than the {CROP}x{CROP} crop")


def hflip(image: Tensor) -> Tensor:
    return image[:, :, ::-1]


def crop(image: Tensor, top: int, left: int, size: int = CROP) -> Tensor:
    return image[:, top : top + size, left : left + size]


def center_crop(image: Tensor, size: int = CROP) -> Tensor:
    top = (image.shape[1] - size) // 2
    left = (image.shape[2] - size) // 2
    return crop(image, top, left, size)


def color_jitter(image: Tensor, rng: np.random.Generator, deltas: tuple[float, float, float]) -> Tensor:
    """Brightness, contrast then saturation, each a factor drawn from
    [1 - delta, 1 + delta]; the result is clamped to [0, 1]."""
    brightness, contrast, saturation = deltas
    out = image.astype(np.float64)
    if brightness > 0:
        out = out * rng.uniform(1 - brightness, 1 + brightness)
    if contrast > 0:
        mean = (out * _LUMA).sum(axis=0).mean()
        out = (out - mean) * rng.uniform(1 - contrast, 1 + contrast) + mean
    if saturation > 0:
        gray = (out * _LUMA).sum(axis=0, keepdims=True)
        out = gray + (out - gray) * rng.uniform(1 - saturation, 1 + saturation)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def augment(image: Tensor, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None) -> Tensor:
    cfg = cfg or AugmentConfig()
    _check(image)
    out = color_jitter(image, rng, cfg.color_jitter) if any(cfg.color_jitter) else image
    if cfg.hflip and rng.random() < 0.5:
        out = hflip(out)
    if cfg.crop_32_to_28:
        top = int(rng.integers(0, out.shape[1] - CROP + 1))
        left = int(rng.integers(0, out.shape[2] - CROP + 1))
        out = crop(out, top, left)
    else:
        out = center_crop(out)
    return np.ascontiguousarray(out)


def eval_transform(image: Tensor) -> Tensor:
    _check(image)
    return np.ascontiguousarray(center_crop(image))


def transform_batch(
    images: Tensor,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[AugmentConfig] = None,
    training: bool = True,
) -> Tensor:
    """Augment ([N, 3, 32, 32] -> [N, 3, 28, 28]); eval path when not training."""
    if training:
        if rng is None:
            raise ValueError("training transform needs an rng")
        return np.stack([augment(img, rng, cfg) for img in images])
    if images.ndim != 4:
        raise ShapeError(f"expected [N, 3, H, W] images, got {images.shape}")
    if images.shape[0]:
        _check(images[0])
    top = (images.shape[2] - CROP) // 2
    left = (images.shape[3] - CROP) // 2
    return np.ascontiguousarray(images[:, :, top : top + CROP, left : left + CROP])
