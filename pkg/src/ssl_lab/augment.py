"""Stochastic image augmentation: flip, contrast, rotation, crop-and-resize.

The ops run in a fixed order and every call draws the same number of random
values, so a stream derived from ``(seed, sample_index, epoch)`` always
produces the same augmentation no matter how samples are batched or ordered.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.7, 1.3)
    rotation_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    crop_fraction_range: tuple[float, float] = (0.01, 0.20)

    def __post_init__(self):
        for name in ("contrast_range", "rotation_range", "crop_fraction_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.contrast_range[0] < 0:
            raise ValueError("contrast factors must be non-negative")
        lo, hi = self.crop_fraction_range
        if lo < 0 or hi >= 1:
            raise ValueError(f"crop fractions must lie in [0, 1), got {self.crop_fraction_range}")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(flip_prob=0.0, contrast_range=(1.0, 1.0), rotation_range=(0.0, 0.0), crop_fraction_range=(0.0, 0.0))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    contrast: float
    angle: float
    crop: float
    # crop window position as a fraction of the removed extent
    crop_offset: tuple[float, float]


def derive_stream(seed: int, sample_index: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(sample_index), int(epoch)])


def sample_params(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentParams:
    u = rng.random(6)
    lerp = lambda r, t: r[0] + (r[1] - r[0]) * t  # noqa: E731
    return AugmentParams(
        flip=bool(u[0] < policy.flip_prob),
        contrast=float(lerp(policy.contrast_range, u[1])),
        angle=float(lerp(policy.rotation_range, u[2])),
        crop=float(lerp(policy.crop_fraction_range, u[3])),
        crop_offset=(float(u[4]), float(u[5])),
    )


def flip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    m = image.mean()
    # written so factor == 1 reproduces the input bit-for-bit
    return image * factor + m * (1.0 - factor)


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image centre; bilinear, zeros outside."""
    h, w = image.shape
    c, s = math.cos(angle), math.sin(angle)
    matrix = np.array([[c, -s], [s, c]])
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre
    return ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def crop_resize(image: np.ndarray, fraction: float, offset: tuple[float, float]) -> np.ndarray:
    """Drop ``fraction`` of each linear extent and resize the window back (bilinear)."""
    h, w = image.shape
    ch, cw = h * (1 - fraction), w * (1 - fraction)
    oy, ox = offset[0] * (h - ch), offset[1] * (w - cw)
    sy, sx = ch / h, cw / w
    return ndimage.affine_transform(
        image,
        np.diag([sy, sx]),
        offset=(oy + 0.5 * sy - 0.5, ox + 0.5 * sx - 0.5),
        order=1,
        mode="nearest",
    )


def apply(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = image
    if params.flip:
        out = flip(out)
    if params.contrast != 1.0:
        out = adjust_contrast(out, params.contrast)
    if params.angle != 0.0:
        out = rotate(out, params.angle)
    if params.crop != 0.0:
        out = crop_resize(out, params.crop, params.crop_offset)
    if out is image:
        return image.copy()
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    return apply(image, sample_params(policy, rng))


def augment_batch(images: np.ndarray, indices, epoch: int, seed: int, policy: AugmentPolicy) -> np.ndarray:
    """Augment ``images[k]`` with the stream of ``(seed, indices[k], epoch)``."""
    out = np.empty_like(images)
    for k, idx in enumerate(indices):
        out[k] = augment(images[k], policy, derive_stream(seed, idx, epoch))
    return out
