"""Stochastic view sampling: resized crop, colour jitter, random grayscale.

Every draw is a pure function of ``(policy, draw_index)``: the generator for a
draw is seeded from ``SeedSequence([rng_seed, draw_index])``, so any part of
an augmentation stream can be replayed without replaying what came before it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoders import ConfigError

LUMA = np.array([0.299, 0.587, 0.114])


class DegenerateCropError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale_range: tuple[float, float] = (0.3, 1.0)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.25
    rng_seed: int = 0

    def validate(self) -> "AugmentPolicy":
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if not 0 < self.aspect_range[0] <= self.aspect_range[1]:
            raise ConfigError("aspect_range must be positive and ordered")
        if self.jitter_strength < 0:
            raise ConfigError("jitter_strength must be >= 0")
        if not 0 <= self.grayscale_prob <= 1:
            raise ConfigError("grayscale_prob must lie in [0, 1]")
        return self

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "AugmentPolicy":
        return cls(crop_scale_range=(1.0, 1.0), aspect_range=(1.0, 1.0), jitter_strength=0.0,
                   grayscale_prob=0.0, rng_seed=rng_seed)


def draw_rng(policy: AugmentPolicy, draw_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([policy.rng_seed, int(draw_index)]))


def _sample_crop(rng, size: int, policy: AugmentPolicy) -> tuple[float, float, float, float]:
    """(top, left, height, width) of a crop in pixel units."""
    lo, hi = policy.crop_scale_range
    area = size * size * rng.uniform(lo, hi)
    log_lo, log_hi = math.log(policy.aspect_range[0]), math.log(policy.aspect_range[1])
    ratio = math.exp(rng.uniform(log_lo, log_hi))
    ch = min(math.sqrt(area / ratio), size)
    cw = min(math.sqrt(area * ratio), size)
    if ch < 1 or cw < 1:
        raise DegenerateCropError(f"crop window {ch:.2f}x{cw:.2f} is smaller than one pixel")
    top = rng.uniform(0, size - ch)
    left = rng.uniform(0, size - cw)
    return top, left, ch, cw


def resize_crop(image: np.ndarray, top: float, left: float, height: float, width: float, out: int) -> np.ndarray:
    """Bilinear resample of a sub-window of a [C,S,S] image to [C,out,out]."""
    c, h, w = image.shape
    # sample positions at output pixel centres, in input pixel-centre coordinates
    ys = top + (np.arange(out) + 0.5) * (height / out) - 0.5
    xs = left + (np.arange(out) + 0.5) * (width / out) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top_row = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot_row = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def _luminance(image: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA.astype(image.dtype), image, axes=(0, 0))


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Multiplicative brightness, contrast and saturation adjustments, in that order."""
    x = image * brightness
    mean_luma = _luminance(x).mean()
    x = (x - mean_luma) * contrast + mean_luma
    gray = _luminance(x)[None]
    return (x - gray) * saturation + gray


def sample_view(policy: AugmentPolicy, image: np.ndarray, draw_index: int) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise ValueError(f"expected a [3,S,S] image, got {image.shape}")
    size = image.shape[1]
    rng = draw_rng(policy, draw_index)

    top, left, ch, cw = _sample_crop(rng, size, policy)
    if ch == size and cw == size:
        x = image.copy()
    else:
        x = resize_crop(image, top, left, ch, cw, size)

    s = policy.jitter_strength
    factors = rng.uniform(1 - s, 1 + s, size=3) if s > 0 else np.ones(3)
    if s > 0:
        x = color_jitter(x, *np.maximum(factors, 0.0))
    if rng.random() < policy.grayscale_prob:
        x = np.broadcast_to(_luminance(x)[None], x.shape).copy()
    return np.clip(x, 0.0, 1.0).astype(image.dtype, copy=False)


def sample_view_pair(policy: AugmentPolicy, image: np.ndarray, pair_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent views; draws ``2*pair_index`` and ``2*pair_index + 1``."""
    return sample_view(policy, image, 2 * pair_index), sample_view(policy, image, 2 * pair_index + 1)


def pair_index(epoch: int, record_index: int, n_records: int) -> int:
    """Stream position of a record's view pair in a given epoch."""
    return epoch * n_records + record_index
