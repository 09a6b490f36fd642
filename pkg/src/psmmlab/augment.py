"""Training-time augmentation of square ``H x W x C`` images in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentParams:
    angle: float  # degrees, counter-clockwise
    flip: bool
    crop_y: int
    crop_x: int
    brightness: tuple[float, ...]
    contrast: tuple[float, ...]

    @classmethod
    def identity(cls, pad: int, channels: int = 3) -> AugmentParams:
        return cls(0.0, False, pad // 2, pad // 2, (0.0,) * channels, (0.0,) * channels)


def sample_params(
    rng: np.random.Generator, pad: int, channels: int = 3, max_angle: float = 180.0, jitter: float = 0.2
) -> AugmentParams:
    return AugmentParams(
        angle=float(rng.uniform(-max_angle, max_angle)),
        flip=bool(rng.random() < 0.5),
        crop_y=int(rng.integers(0, pad + 1)),
        crop_x=int(rng.integers(0, pad + 1)),
        brightness=tuple(float(v) for v in rng.uniform(-jitter, jitter, channels)),
        contrast=tuple(float(v) for v in rng.uniform(-jitter, jitter, channels)),
    )


def resize(img: np.ndarray, side: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (side, side):
        return img
    return ndimage.zoom(img, (side / h, side / w, 1), order=1, mode="nearest", grid_mode=True)


def rotate(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the centre with nearest-neighbour sampling and zero fill."""
    if angle % 360 == 0:
        return img
    return ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0.0)


def apply_params(img: np.ndarray, params: AugmentParams, out_size: int, pad: int) -> np.ndarray:
    img = resize(np.asarray(img, dtype=np.float64), out_size + pad)
    img = rotate(img, params.angle)
    if params.flip:
        img = img[:, ::-1]
    img = img[params.crop_y : params.crop_y + out_size, params.crop_x : params.crop_x + out_size]
    b = np.asarray(params.brightness)
    c = np.asarray(params.contrast)
    if np.any(b) or np.any(c):
        mean = img.mean(axis=(0, 1), keepdims=True)
        img = np.clip((img - mean) * (1.0 + c) + mean + b, 0.0, 1.0)
    return np.ascontiguousarray(img)


def augment(img: np.ndarray, seed, out_size: int | None = None, pad: int = 4) -> np.ndarray:
    """Random rotation, horizontal flip, crop and per-channel colour jitter; deterministic per seed."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"augment expects a square image, got {img.shape[:2]}")
    out_size = img.shape[0] if out_size is None else out_size
    params = sample_params(np.random.default_rng(seed), pad, img.shape[2])
    return apply_params(img, params, out_size, pad)
