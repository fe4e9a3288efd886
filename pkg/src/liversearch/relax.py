"""Occlusion-based saliency for learned representations.

Importance of pixel (i, j) is the masked-similarity average
R_ij = (1/N) * sum_n s(h, h_n) * M_ij(n), where h embeds the unmasked image,
h_n embeds the image multiplied elementwise by mask n, and s is cosine
similarity. Masks are low-resolution Bernoulli grids upsampled bilinearly, so
occlusion boundaries are soft.

Masked embeddings with zero norm have no defined similarity; their terms are
skipped (contributing zero) and counted. Accumulation runs in float64 in a
fixed batch order, so results are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import DegenerateVectorError
from .selfsup.models import SiameseModel, extract_h, extract_h_batch

logger = logging.getLogger(__name__)

DEFAULT_GRID = (7, 7)
DEFAULT_P = 0.5
DEFAULT_N_MASKS = 3000
_NORM_FLOOR = 1e-12
_SKIP_WARN_FRACTION = 0.10


@dataclass
class MaskBatch:
    masks: np.ndarray  # (N, H, W) float32 in [0, 1]
    grid: tuple[int, int]
    p: float
    seed: int

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float32)
        if self.masks.ndim != 3 or self.masks.shape[0] < 1:
            raise ValueError(f"masks must be (N, H, W) with N >= 1, got {self.masks.shape}")
        if self.masks.min() < 0.0 or self.masks.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]


@dataclass
class SaliencyMap:
    R: np.ndarray  # (H, W) float64
    n_masks_used: int
    similarity_kind: str = "cosine"
    n_masks_total: int = 0
    n_skipped: int = 0
    uncertainty: np.ndarray | None = None


def generate_masks(
    n: int,
    grid: tuple[int, int],
    p: float,
    out: tuple[int, int],
    seed: int,
    *,
    allow_degenerate: bool = False,
) -> MaskBatch:
    """Sample n Bernoulli(p) grids of shape grid, upsampled bilinearly to out.

    p must be strictly inside (0, 1); the endpoints produce constant masks and
    are only useful for tests, so they are gated behind allow_degenerate.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    gh, gw = int(grid[0]), int(grid[1])
    H, W = int(out[0]), int(out[1])
    if gh < 1 or gw < 1:
        raise ValueError(f"grid must be positive, got {(gh, gw)}")
    if gh >= H or gw >= W:
        raise ValueError(f"grid {(gh, gw)} must be strictly smaller than output {(H, W)}")
    if not allow_degenerate and not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    if allow_degenerate and not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")

    rng = np.random.default_rng(seed)
    cells = (rng.random((n, gh, gw)) < p).astype(np.float32)
    masks = np.empty((n, H, W), dtype=np.float32)
    for i in range(n):
        masks[i] = cv2.resize(cells[i], (W, H), interpolation=cv2.INTER_LINEAR)
    np.clip(masks, 0.0, 1.0, out=masks)
    return MaskBatch(masks=masks, grid=(gh, gw), p=float(p), seed=int(seed))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def relax_importance(
    model: SiameseModel,
    image: np.ndarray,
    mask_batch: MaskBatch,
    *,
    batch_size: int = 64,
    return_uncertainty: bool = False,
) -> SaliencyMap:
    """Accumulate similarity-weighted mask importance over the batch.

    image is the already-windowed (H, W, 3) float input at model size; masking
    multiplies all channels by the same mask. The divisor is the total mask
    count, so concatenating two batches averages their maps weighted by size.

    Raises:
        DegenerateVectorError: the unmasked embedding has zero norm.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    if image.shape[:2] != mask_batch.out_shape:
        raise ValueError(
            f"mask shape {mask_batch.out_shape} does not match image {image.shape[:2]}"
        )

    h = extract_h(model, image).astype(np.float64)
    if np.linalg.norm(h) <= _NORM_FLOOR:
        raise DegenerateVectorError("unmasked image embeds to a zero-norm vector")

    n_total = len(mask_batch)
    H, W = mask_batch.out_shape
    acc = np.zeros((H, W), dtype=np.float64)
    sq_acc = np.zeros((H, W), dtype=np.float64) if return_uncertainty else None
    sims = np.zeros(n_total, dtype=np.float64)
    kept = np.zeros(n_total, dtype=bool)
    n_skipped = 0

    for start in range(0, n_total, batch_size):
        chunk = mask_batch.masks[start : start + batch_size]
        masked = image[None, :, :, :] * chunk[:, :, :, None]
        embeds = extract_h_batch(model, list(masked), batch_size=batch_size).astype(np.float64)
        norms = np.linalg.norm(embeds, axis=1)
        for j in range(len(chunk)):
            if norms[j] <= _NORM_FLOOR:
                n_skipped += 1
                continue
            s = float(h @ embeds[j] / (np.linalg.norm(h) * norms[j]))
            sims[start + j] = s
            kept[start + j] = True
            m64 = chunk[j].astype(np.float64)
            acc += s * m64
            if sq_acc is not None:
                sq_acc += (s * m64) ** 2

    if n_skipped > _SKIP_WARN_FRACTION * n_total:
        logger.warning(
            "%d of %d masked embeddings were degenerate (zero norm) and skipped",
            n_skipped,
            n_total,
        )

    R = acc / n_total
    uncertainty = None
    if sq_acc is not None:
        uncertainty = sq_acc / n_total - R**2
        np.maximum(uncertainty, 0.0, out=uncertainty)
    return SaliencyMap(
        R=R,
        n_masks_used=n_total - n_skipped,
        n_masks_total=n_total,
        n_skipped=n_skipped,
        uncertainty=uncertainty,
    )


def normalize_for_display(R: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map becomes all 0.5."""
    R = np.asarray(R, dtype=np.float64)
    if not np.all(np.isfinite(R)):
        raise ValueError("saliency map has non-finite entries")
    lo = R.min()
    hi = R.max()
    if hi == lo:
        return np.full_like(R, 0.5)
    return (R - lo) / (hi - lo)


def overlay_red_blue(gray: np.ndarray, saliency01: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a diverging colormap (red = important, blue = unimportant) over a
    grayscale [0, 1] image; returns (H, W, 3) uint8."""
    gray = np.asarray(gray, dtype=np.float64)
    s = np.clip(np.asarray(saliency01, dtype=np.float64), 0.0, 1.0)
    if gray.shape != s.shape:
        raise ValueError(f"shape mismatch: image {gray.shape} vs saliency {s.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    g = np.clip(gray, 0.0, 1.0)[:, :, None]
    color = np.stack([s, np.zeros_like(s), 1.0 - s], axis=2)
    blended = (1.0 - alpha) * g + alpha * color
    return np.round(blended * 255.0).astype(np.uint8)


def save_saliency(
    smap: SaliencyMap,
    path: str | Path,
    *,
    slice_id: str,
    model_fingerprint: str,
    mask_batch: MaskBatch | None = None,
    n_masks: int | None = None,
    grid: tuple[int, int] | None = None,
    p: float | None = None,
    seed: int | None = None,
) -> Path:
    """Write the raw map as a 32-bit float grayscale TIFF plus a JSON sidecar.

    Mask provenance fields come from mask_batch when given, otherwise from the
    explicit keyword values. Returns the sidecar path.
    """
    path = Path(path)
    if mask_batch is not None:
        n_masks = len(mask_batch)
        grid = mask_batch.grid
        p = mask_batch.p
        seed = mask_batch.seed
    Image.fromarray(smap.R.astype(np.float32), mode="F").save(path)
    sidecar = path.with_name(path.name + ".json")
    payload = {
        "slice_id": slice_id,
        "n_masks": n_masks,
        "grid": list(grid) if grid is not None else None,
        "p": p,
        "seed": seed,
        "model_fingerprint": model_fingerprint,
        "n_masks_used": smap.n_masks_used,
        "similarity_kind": smap.similarity_kind,
    }
    sidecar.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return sidecar


def load_saliency(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    arr = np.asarray(Image.open(path), dtype=np.float32)
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    return arr, meta
