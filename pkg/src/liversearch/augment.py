"""Stochastic view generation for self-supervised training.

Every training slice yields two views: the slice clipped with the narrow
window and the slice clipped with the wide window, each run independently
through the augmentation chain (random resized crop, horizontal flip, color
jitter, random grayscale). A baseline mode clips both views with the wide
window so the windowing contribution can be ablated.

All randomness flows through an explicitly passed generator. Each call to
:func:`augment` consumes a fixed number of draws regardless of outcomes
(coins are drawn even when their transform is disabled), and
:func:`make_views` spawns one independent child stream per view, so view
randomness never correlates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from skimage.color import hsv2rgb, rgb2hsv

from .imaging.windows import NARROW_WINDOW, WIDE_WINDOW, ClipWindow, clip_and_scale, pseudo_rgb

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    out_size: tuple[int, int] = (224, 224)
    hflip_prob: float = 0.5
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_apply_prob: float = 1.0
    grayscale_prob: float = 0.2
    narrow: ClipWindow = NARROW_WINDOW
    wide: ClipWindow = WIDE_WINDOW

    def __post_init__(self):
        for name in ("hflip_prob", "jitter_apply_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        a_lo, a_hi = self.aspect_range
        if not (0.0 < a_lo <= a_hi):
            raise ValueError(f"invalid aspect_range {self.aspect_range}")
        if any(s < 0 for s in self.jitter_strength):
            raise ValueError(f"jitter strengths must be >= 0, got {self.jitter_strength}")
        if any(d < 1 for d in self.out_size):
            raise ValueError(f"out_size must be positive, got {self.out_size}")

    def to_json(self) -> dict:
        return {
            "crop_scale": list(self.crop_scale),
            "aspect_range": list(self.aspect_range),
            "out_size": list(self.out_size),
            "hflip_prob": self.hflip_prob,
            "jitter_strength": list(self.jitter_strength),
            "jitter_apply_prob": self.jitter_apply_prob,
            "grayscale_prob": self.grayscale_prob,
            "narrow": [self.narrow.low, self.narrow.high],
            "wide": [self.wide.low, self.wide.high],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AugmentConfig":
        kwargs = dict(obj)
        for key in ("crop_scale", "aspect_range", "out_size", "jitter_strength"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        for key in ("narrow", "wide"):
            if key in kwargs:
                kwargs[key] = ClipWindow(*kwargs[key])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "AugmentConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def deterministic_config(out_size: tuple[int, int]) -> AugmentConfig:
    """A config with every stochastic transform pinned off (identity up to resize)."""
    return AugmentConfig(
        crop_scale=(1.0, 1.0),
        aspect_range=(1.0, 1.0),
        out_size=out_size,
        hflip_prob=0.0,
        jitter_strength=(0.0, 0.0, 0.0, 0.0),
        jitter_apply_prob=0.0,
        grayscale_prob=0.0,
    )


def _luminance(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA


def _random_resized_crop(img, cfg: AugmentConfig, rng) -> np.ndarray:
    h, w = img.shape[:2]
    area_frac = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
    log_aspect = rng.uniform(np.log(cfg.aspect_range[0]), np.log(cfg.aspect_range[1]))
    aspect = np.exp(log_aspect)
    target_area = area_frac * h * w
    # clamp instead of rejection-resampling so every call draws the same count
    cw = int(np.clip(round(np.sqrt(target_area * aspect)), 1, w))
    ch = int(np.clip(round(np.sqrt(target_area / aspect)), 1, h))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    crop = img[y0 : y0 + ch, x0 : x0 + cw]
    out_h, out_w = cfg.out_size
    if crop.shape[:2] == (out_h, out_w):
        return np.ascontiguousarray(crop)
    return cv2.resize(crop, (out_w, out_h), interpolation=cv2.INTER_LINEAR)


def _adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def _adjust_contrast(img, factor):
    mean = _luminance(img).mean()
    return np.clip((img - mean) * factor + mean, 0.0, 1.0)


def _adjust_saturation(img, factor):
    gray = _luminance(img)[:, :, None]
    return np.clip((img - gray) * factor + gray, 0.0, 1.0)


def _adjust_hue(img, shift):
    if shift == 0.0:
        return img
    hsv = rgb2hsv(img)
    hsv[:, :, 0] = (hsv[:, :, 0] + shift) % 1.0
    return np.clip(hsv2rgb(hsv), 0.0, 1.0).astype(np.float32)


def _color_jitter(img, cfg: AugmentConfig, rng) -> np.ndarray:
    # draws happen unconditionally; application is gated afterwards
    apply_coin = rng.random()
    order = rng.permutation(4)
    sb, sc, ss, sh = cfg.jitter_strength
    brightness = rng.uniform(max(0.0, 1 - sb), 1 + sb)
    contrast = rng.uniform(max(0.0, 1 - sc), 1 + sc)
    saturation = rng.uniform(max(0.0, 1 - ss), 1 + ss)
    hue = rng.uniform(-sh, sh)
    if apply_coin >= cfg.jitter_apply_prob:
        return img
    ops = [
        lambda x: _adjust_brightness(x, brightness),
        lambda x: _adjust_contrast(x, contrast),
        lambda x: _adjust_saturation(x, saturation),
        lambda x: _adjust_hue(x, hue),
    ]
    for i in order:
        img = ops[i](img)
    return img


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the stochastic augmentation chain to an (H, W, 3) image in [0, 1].

    Order: random resized crop (bilinear resize to cfg.out_size), horizontal
    flip, color jitter (brightness/contrast/saturation/hue in a random
    order), random grayscale. Returns float32 in [0, 1] of size out_size.

    Raises:
        ValueError: non-finite pixels or wrong shape.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite pixels")

    img = _random_resized_crop(img, cfg, rng)

    flip_coin = rng.random()
    if flip_coin < cfg.hflip_prob:
        img = img[:, ::-1, :]

    img = _color_jitter(img, cfg, rng)

    gray_coin = rng.random()
    if gray_coin < cfg.grayscale_prob:
        img = np.repeat(_luminance(img)[:, :, None], 3, axis=2)

    return np.ascontiguousarray(np.clip(img, 0.0, 1.0), dtype=np.float32)


def make_views(
    hu: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    *,
    single_clip: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Produce the two training views of a raw HU slice.

    View 1 is clipped with the narrow window and view 2 with the wide window
    (``single_clip=True`` uses the wide window for both; the windowing
    ablation baseline). Each view consumes its own child stream spawned from
    ``rng``, so augmentation draws are independent across views.
    """
    rng1, rng2 = rng.spawn(2)
    window1 = cfg.wide if single_clip else cfg.narrow
    view1 = augment(pseudo_rgb(clip_and_scale(hu, window1)), cfg, rng1)
    view2 = augment(pseudo_rgb(clip_and_scale(hu, cfg.wide)), cfg, rng2)
    return view1, view2
