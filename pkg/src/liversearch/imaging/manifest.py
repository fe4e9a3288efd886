"""Balanced slice dataset construction.

From each usable volume a fixed number of liver and liver-free slices is
drawn uniformly without replacement, stratified by the segmentation mask.
Volumes are ordered by volume_id ascending; the first ``n_train_volumes``
contribute to the train split and the remainder to the test split, so no
volume (patient) ever spans splits.

Volumes that cannot fill either stratum are skipped with a logged warning
to preserve per-split label balance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InsufficientSlicesError
from .volume import CTVolume, load_volume

logger = logging.getLogger(__name__)

SLICES_PER_VOLUME_LIVER = 5
SLICES_PER_VOLUME_NONLIVER = 5


def make_slice_id(volume_id: str, slice_index: int) -> str:
    return f"{volume_id}:{slice_index:04d}"


def split_slice_id(slice_id: str) -> tuple[str, int]:
    volume_id, _, idx = slice_id.rpartition(":")
    return volume_id, int(idx)


@dataclass
class SliceRecord:
    """One axial slice with provenance. Pixel data is loaded on demand."""

    slice_id: str
    volume_id: str
    slice_index: int
    liver_label: bool
    split: str  # "train" | "test"
    volume_path: str = ""  # header path relative to the dataset root

    def to_json(self) -> dict:
        return {
            "slice_id": self.slice_id,
            "volume_id": self.volume_id,
            "slice_index": self.slice_index,
            "liver_label": self.liver_label,
            "split": self.split,
            "volume_path": self.volume_path,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SliceRecord":
        return cls(
            slice_id=obj["slice_id"],
            volume_id=obj["volume_id"],
            slice_index=int(obj["slice_index"]),
            liver_label=bool(obj["liver_label"]),
            split=obj["split"],
            volume_path=obj.get("volume_path", ""),
        )


@dataclass
class DatasetManifest:
    records: list[SliceRecord]
    seed: int
    skipped_volumes: list[str] = field(default_factory=list)

    def counts(self) -> dict:
        tally: dict[str, dict[str, int]] = {}
        for r in self.records:
            split = tally.setdefault(r.split, {"liver": 0, "non_liver": 0})
            split["liver" if r.liver_label else "non_liver"] += 1
        return tally

    def split_records(self, split: str) -> list[SliceRecord]:
        return [r for r in self.records if r.split == split]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "counts": self.counts(),
            "skipped_volumes": self.skipped_volumes,
            "records": [r.to_json() for r in self.records],
        }

    def save(self, path: str | Path):
        Path(path).write_text(
            json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            records=[SliceRecord.from_json(r) for r in obj["records"]],
            seed=int(obj["seed"]),
            skipped_volumes=list(obj.get("skipped_volumes", [])),
        )


def sample_slices(
    volume: CTVolume,
    n_liver: int = SLICES_PER_VOLUME_LIVER,
    n_nonliver: int = SLICES_PER_VOLUME_NONLIVER,
    rng_seed: int = 0,
) -> list[SliceRecord]:
    """Draw slices uniformly without replacement within each label stratum.

    Deterministic given ``rng_seed``. Records come back ordered by slice
    index. The split field is left empty; the manifest builder assigns it.

    Raises:
        InsufficientSlicesError: either stratum is smaller than requested
            (volume-skipped signal).
        ValueError: the volume has no segmentation mask.
    """
    if volume.liver_mask is None:
        raise ValueError(f"volume {volume.volume_id!r} has no liver mask; cannot stratify")
    has_liver = volume.liver_mask.reshape(volume.n_slices, -1).any(axis=1)
    liver_idx = np.flatnonzero(has_liver)
    nonliver_idx = np.flatnonzero(~has_liver)
    if len(liver_idx) < n_liver or len(nonliver_idx) < n_nonliver:
        raise InsufficientSlicesError(
            f"volume {volume.volume_id!r} has {len(liver_idx)} liver / "
            f"{len(nonliver_idx)} non-liver slices; need {n_liver}/{n_nonliver}"
        )
    rng = np.random.default_rng(rng_seed)
    chosen_liver = rng.choice(liver_idx, size=n_liver, replace=False)
    chosen_nonliver = rng.choice(nonliver_idx, size=n_nonliver, replace=False)

    records = []
    for idx in sorted(int(i) for i in np.concatenate([chosen_liver, chosen_nonliver])):
        records.append(
            SliceRecord(
                slice_id=make_slice_id(volume.volume_id, idx),
                volume_id=volume.volume_id,
                slice_index=idx,
                liver_label=bool(has_liver[idx]),
                split="",
            )
        )
    return records


def build_manifest(
    volumes: list[CTVolume],
    n_train_volumes: int,
    seed: int,
    *,
    n_liver: int = SLICES_PER_VOLUME_LIVER,
    n_nonliver: int = SLICES_PER_VOLUME_NONLIVER,
    volume_paths: dict[str, str] | None = None,
) -> DatasetManifest:
    """Build a balanced slice manifest from an ordered volume list.

    ``volumes`` must already be ordered by volume_id ascending; the first
    ``n_train_volumes`` land in the train split, the rest in test. Each
    non-skipped volume contributes ``n_liver + n_nonliver`` slices. Per-volume
    sampling seeds derive from (seed, position), so the manifest is
    byte-identical across runs with the same inputs.
    """
    if not volumes:
        raise ValueError("cannot build a manifest from an empty volume list")
    ids = [v.volume_id for v in volumes]
    if ids != sorted(ids):
        raise ValueError("volumes must be ordered by volume_id ascending")

    records: list[SliceRecord] = []
    skipped: list[str] = []
    for pos, volume in enumerate(volumes):
        split = "train" if pos < n_train_volumes else "test"
        try:
            vol_records = sample_slices(
                volume, n_liver, n_nonliver, rng_seed=_volume_seed(seed, pos)
            )
        except InsufficientSlicesError as e:
            logger.warning("skipping volume: %s", e)
            skipped.append(volume.volume_id)
            continue
        for r in vol_records:
            r.split = split
            if volume_paths:
                r.volume_path = volume_paths.get(volume.volume_id, "")
        records.extend(vol_records)

    manifest = DatasetManifest(records=records, seed=seed, skipped_volumes=skipped)
    if not manifest.split_records("test"):
        logger.warning("manifest has an empty test split (all volumes assigned to train)")
    return manifest


def _volume_seed(seed: int, position: int) -> int:
    # independent per-volume streams; stable across runs
    return int(np.random.SeedSequence([seed, position]).generate_state(1)[0])


def build_manifest_from_dir(
    data_dir: str | Path,
    n_train_volumes: int,
    seed: int,
    *,
    n_liver: int = SLICES_PER_VOLUME_LIVER,
    n_nonliver: int = SLICES_PER_VOLUME_NONLIVER,
) -> DatasetManifest:
    """Load every volume header under ``data_dir`` and build the manifest.

    Record volume_paths are stored relative to ``data_dir``.
    """
    data_dir = Path(data_dir)
    headers = sorted(data_dir.glob("*.json"))
    volumes = [load_volume(h) for h in headers]
    order = np.argsort([v.volume_id for v in volumes])
    volumes = [volumes[i] for i in order]
    headers = [headers[i] for i in order]
    paths = {v.volume_id: str(h.relative_to(data_dir)) for v, h in zip(volumes, headers)}
    return build_manifest(
        volumes,
        n_train_volumes,
        seed,
        n_liver=n_liver,
        n_nonliver=n_nonliver,
        volume_paths=paths,
    )


class SliceSource:
    """Resolves manifest records to pixel data, caching loaded volumes."""

    def __init__(self, data_root: str | Path):
        self.data_root = Path(data_root)
        self._volumes: dict[str, CTVolume] = {}

    def volume(self, record: SliceRecord) -> CTVolume:
        if record.volume_id not in self._volumes:
            self._volumes[record.volume_id] = load_volume(self.data_root / record.volume_path)
        return self._volumes[record.volume_id]

    def hu(self, record: SliceRecord) -> np.ndarray:
        return self.volume(record).slice_hu(record.slice_index)

    def mask(self, record: SliceRecord) -> np.ndarray | None:
        return self.volume(record).slice_mask(record.slice_index)
