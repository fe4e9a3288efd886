"""Siamese training loop: SGD with momentum over dual-window views.

Collapse is monitored (per-dimension std of the normalized projector output),
never prevented by extra machinery; the stop-gradient in the loss is the only
guard. Determinism holds in single-process mode: the same seed reproduces the
weight init, the epoch shuffles, and every augmentation draw.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..augment import AugmentConfig, make_views
from ..errors import TrainingDivergedError
from ..imaging.manifest import DatasetManifest, SliceRecord, SliceSource
from .checkpoint import save_checkpoint
from .losses import simsiam_loss
from .models import EncoderSpec, HeadSpec, SiameseModel, views_to_tensor

logger = logging.getLogger(__name__)

COLLAPSE_STD_THRESHOLD = 1e-4
COLLAPSE_PATIENCE = 3


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 250
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # None resolves to the linear scaling rule 0.05 * batch_size / 256.
    # Zero is tolerated so a no-op optimizer step stays expressible in tests.
    base_lr: float | None = None
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.base_lr is not None and self.base_lr < 0:
            raise ValueError(f"base_lr must be >= 0, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    @property
    def resolved_lr(self) -> float:
        if self.base_lr is not None:
            return float(self.base_lr)
        return 0.05 * self.batch_size / 256.0

    def to_json(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "base_lr": self.resolved_lr,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class StepStats:
    loss: float
    z_rows: np.ndarray  # normalized projector outputs, one row per view sample
    batch_size: int


@dataclass
class TrainResult:
    model: SiameseModel
    losses: list[float]
    embedding_stds: list[float]
    checkpoint_path: Path | None
    fingerprint: str | None
    collapsed: bool = False
    history: list[dict] = field(default_factory=list)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(),
        lr=cfg.resolved_lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


def _normalized_rows(z: torch.Tensor) -> np.ndarray:
    z = z.detach()
    norms = z.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return (z / norms).cpu().to(torch.float32).numpy()


def train_step(
    model: SiameseModel,
    optimizer: torch.optim.Optimizer,
    hu_batch: Sequence[np.ndarray],
    augment_cfg: AugmentConfig,
    rng: np.random.Generator,
    *,
    single_clip: bool = False,
    dtype: torch.dtype = torch.float32,
) -> StepStats:
    """One SGD update on the mean symmetric loss over the batch.

    Raises:
        TrainingDivergedError: the batch loss is NaN or infinite. Diagnostics
            carry the loss, the lr, and the normalized-embedding std.
    """
    if len(hu_batch) == 0:
        raise ValueError("hu_batch must be nonempty")
    pairs = [make_views(hu, augment_cfg, rng, single_clip=single_clip) for hu in hu_batch]
    x1 = views_to_tensor([v1 for v1, _ in pairs], dtype=dtype)
    x2 = views_to_tensor([v2 for _, v2 in pairs], dtype=dtype)

    model.train()
    p1, p2, z1, z2 = model.forward_views(x1, x2)
    loss = simsiam_loss(p1, p2, z1, z2)

    z_rows = np.concatenate([_normalized_rows(z1), _normalized_rows(z2)], axis=0)
    loss_value = float(loss.detach())
    if not np.isfinite(loss_value):
        lr = optimizer.param_groups[0]["lr"]
        raise TrainingDivergedError(
            "non-finite training loss",
            diagnostics={
                "loss": loss_value,
                "lr": lr,
                "embedding_std": float(z_rows.std(axis=0).mean()),
            },
        )

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepStats(loss=loss_value, z_rows=z_rows, batch_size=len(hu_batch))


def train(
    manifest: DatasetManifest,
    encoder_spec: EncoderSpec,
    head_spec: HeadSpec,
    cfg: TrainConfig,
    augment_cfg: AugmentConfig | None = None,
    *,
    data_root: str | Path | None = None,
    hu_of: Callable[[SliceRecord], np.ndarray] | None = None,
    out_dir: str | Path | None = None,
    single_clip: bool = False,
) -> TrainResult:
    """Train over the manifest's train split for cfg.epochs epochs.

    Slices come either from volumes under data_root or from an hu_of callable
    (tests inject arrays directly). When out_dir is given, writes
    metrics.jsonl (one JSON object per epoch), periodic checkpoints, and a
    final checkpoint_final.ckpt.
    """
    records = manifest.split_records("train")
    if not records:
        raise ValueError("manifest has an empty train split")
    if hu_of is None:
        if data_root is None:
            raise ValueError("either data_root or hu_of is required")
        source = SliceSource(data_root)
        hu_of = source.hu
    if augment_cfg is None:
        augment_cfg = AugmentConfig()

    torch.manual_seed(cfg.seed)
    model = SiameseModel(encoder_spec, head_spec)
    optimizer = make_optimizer(model, cfg)

    out_path = Path(out_dir) if out_dir is not None else None
    log_handle = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_handle = (out_path / "metrics.jsonl").open("w", encoding="utf-8")

    losses: list[float] = []
    stds: list[float] = []
    history: list[dict] = []
    collapse_streak = 0
    collapsed = False
    n = len(records)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.monotonic()
            # One child stream per slice position plus one for the shuffle,
            # so draw counts never leak between slices or across epochs.
            epoch_ss = np.random.SeedSequence([cfg.seed, epoch])
            shuffle_rng = np.random.default_rng(epoch_ss.spawn(1)[0])
            order = shuffle_rng.permutation(n)

            slice_seeds = epoch_ss.spawn(n)
            epoch_loss = 0.0
            epoch_count = 0
            sum_z = None
            sumsq_z = None
            z_count = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                if len(idx) == 1:
                    # A lone tail sample would starve batch statistics in the
                    # heads; skip it (the shuffle revisits it next epoch).
                    continue
                batch = [hu_of(records[i]) for i in idx]
                rng = np.random.default_rng(slice_seeds[int(idx[0])])
                stats = train_step(
                    model, optimizer, batch, augment_cfg, rng, single_clip=single_clip
                )
                epoch_loss += stats.loss * stats.batch_size
                epoch_count += stats.batch_size
                if sum_z is None:
                    sum_z = stats.z_rows.sum(axis=0).astype(np.float64)
                    sumsq_z = (stats.z_rows.astype(np.float64) ** 2).sum(axis=0)
                else:
                    sum_z += stats.z_rows.sum(axis=0)
                    sumsq_z += (stats.z_rows.astype(np.float64) ** 2).sum(axis=0)
                z_count += stats.z_rows.shape[0]

            mean_loss = epoch_loss / max(epoch_count, 1)
            if z_count > 0:
                var = sumsq_z / z_count - (sum_z / z_count) ** 2
                embedding_std = float(np.sqrt(np.maximum(var, 0.0)).mean())
            else:
                embedding_std = float("nan")
            losses.append(mean_loss)
            stds.append(embedding_std)

            if embedding_std < COLLAPSE_STD_THRESHOLD:
                collapse_streak += 1
                if collapse_streak >= COLLAPSE_PATIENCE and not collapsed:
                    collapsed = True
                    logger.warning(
                        "representation collapse suspected: normalized embedding "
                        "std %.3g below %.0e for %d consecutive epochs",
                        embedding_std,
                        COLLAPSE_STD_THRESHOLD,
                        COLLAPSE_PATIENCE,
                    )
            else:
                collapse_streak = 0

            entry = {
                "epoch": epoch,
                "loss": mean_loss,
                "embedding_std": embedding_std,
                "lr": cfg.resolved_lr,
                "wall_time": time.monotonic() - t0,
            }
            history.append(entry)
            if log_handle is not None:
                log_handle.write(json.dumps(entry) + "\n")
                log_handle.flush()

            if (
                out_path is not None
                and cfg.checkpoint_every > 0
                and (epoch + 1) % cfg.checkpoint_every == 0
            ):
                save_checkpoint(
                    model,
                    out_path / f"checkpoint_epoch{epoch + 1:04d}.ckpt",
                    train_config=cfg.to_json(),
                    augment_config=augment_cfg.to_json(),
                )
    finally:
        if log_handle is not None:
            log_handle.close()

    checkpoint_path = None
    fingerprint = None
    if out_path is not None:
        checkpoint_path = out_path / "checkpoint_final.ckpt"
        fingerprint = save_checkpoint(
            model,
            checkpoint_path,
            train_config=cfg.to_json(),
            augment_config=augment_cfg.to_json(),
        )
    model.eval()
    return TrainResult(
        model=model,
        losses=losses,
        embedding_stds=stds,
        checkpoint_path=checkpoint_path,
        fingerprint=fingerprint,
        collapsed=collapsed,
        history=history,
    )
