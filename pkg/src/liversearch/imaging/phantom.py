"""Synthetic CT phantom volumes for controlled validation.

Each slice is a soft-tissue background (HU ~ Uniform[-100, 40]) carrying 1-3
high-attenuation "bone" ellipses (HU ~ Uniform[400, 1000]). Liver slices
additionally contain one large elliptical "liver" region whose HU are drawn
from Normal(55, 5) truncated to the narrow window, so liver pixels survive
both clipping strategies. The liver ellipse doubles as the ground-truth
segmentation mask.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import stats

from .volume import CTVolume, save_volume
from .windows import NARROW_WINDOW

BACKGROUND_HU = (-100, 40)
BONE_HU = (400, 1000)
LIVER_HU_MEAN = 55
LIVER_HU_STD = 5


def _ellipse_mask(shape: tuple[int, int], center, axes, angle: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    y = yy - center[0]
    x = xx - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = x * ca + y * sa
    v = -x * sa + y * ca
    return (u / axes[1]) ** 2 + (v / axes[0]) ** 2 <= 1.0


def _truncated_liver_hu(rng: np.random.Generator, n: int) -> np.ndarray:
    a = (NARROW_WINDOW.low - LIVER_HU_MEAN) / LIVER_HU_STD
    b = (NARROW_WINDOW.high - LIVER_HU_MEAN) / LIVER_HU_STD
    samples = stats.truncnorm.rvs(
        a, b, loc=LIVER_HU_MEAN, scale=LIVER_HU_STD, size=n, random_state=rng
    )
    return np.round(samples).astype(np.int16)


def make_phantom_slice(
    rng: np.random.Generator, size: tuple[int, int], with_liver: bool
) -> tuple[np.ndarray, np.ndarray]:
    """One (hu, mask) slice pair. Mask is all-zero for liver-free slices."""
    h, w = size
    hu = rng.integers(BACKGROUND_HU[0], BACKGROUND_HU[1] + 1, size=size).astype(np.int16)
    mask = np.zeros(size, dtype=np.uint8)

    for _ in range(int(rng.integers(1, 4))):
        center = (rng.uniform(0.1 * h, 0.9 * h), rng.uniform(0.1 * w, 0.9 * w))
        axes = (rng.uniform(0.04 * h, 0.10 * h), rng.uniform(0.04 * w, 0.10 * w))
        bone = _ellipse_mask(size, center, axes, rng.uniform(0, np.pi))
        hu[bone] = rng.integers(BONE_HU[0], BONE_HU[1] + 1, size=int(bone.sum()))

    if with_liver:
        center = (rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w))
        axes = (rng.uniform(0.15 * h, 0.28 * h), rng.uniform(0.15 * w, 0.28 * w))
        liver = _ellipse_mask(size, center, axes, rng.uniform(0, np.pi))
        hu[liver] = _truncated_liver_hu(rng, int(liver.sum()))
        mask = liver.astype(np.uint8)
    return hu, mask


def make_phantom_volume(
    volume_id: str,
    seed: int,
    *,
    size: tuple[int, int] = (64, 64),
    n_liver_slices: int = 8,
    n_nonliver_slices: int = 8,
) -> CTVolume:
    """A phantom volume with liver and liver-free slices in shuffled order."""
    rng = np.random.default_rng(seed)
    flags = [True] * n_liver_slices + [False] * n_nonliver_slices
    rng.shuffle(flags)
    hu_slices, mask_slices = [], []
    for with_liver in flags:
        hu, mask = make_phantom_slice(rng, size, with_liver)
        hu_slices.append(hu)
        mask_slices.append(mask)
    return CTVolume(
        voxels=np.stack(hu_slices),
        liver_mask=np.stack(mask_slices),
        spacing=(5.0, 1.0, 1.0),
        volume_id=volume_id,
    )


def generate_phantom_dataset(
    out_dir: str | Path,
    n_volumes: int,
    seed: int,
    *,
    size: tuple[int, int] = (64, 64),
    n_liver_slices: int = 8,
    n_nonliver_slices: int = 8,
) -> list[Path]:
    """Write ``n_volumes`` phantom volumes (with masks) under ``out_dir``.

    Deterministic given ``seed``: per-volume seeds derive from (seed, index).
    Returns the header paths in volume_id order.
    """
    if n_volumes < 1:
        raise ValueError("n_volumes must be >= 1")
    out_dir = Path(out_dir)
    paths = []
    for i in range(n_volumes):
        vol_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        volume = make_phantom_volume(
            f"phantom_{i:03d}",
            vol_seed,
            size=size,
            n_liver_slices=n_liver_slices,
            n_nonliver_slices=n_nonliver_slices,
        )
        paths.append(save_volume(volume, out_dir))
    return paths
