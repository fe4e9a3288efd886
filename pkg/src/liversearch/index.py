"""Embedding store and exact cosine retrieval.

Vectors are the encoder outputs of wide-window slices, stored unnormalized
(normalization happens inside the similarity) so they stay reusable for the
explanation pipeline. Search is exhaustive: the corpora are thousands of
slices, so exactness is cheaper than an approximate index and keeps every
result reproducible against a brute-force sort.

Store file layout: one line of compact JSON (fingerprint, dim, count, ids,
labels, volume_ids), a newline, count*dim little-endian float32 values in row
order, and a trailing 8-byte checksum. The checksum covers the header as well
as the blob, so edits to the fingerprint or id list are caught, not just
vector corruption.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import cv2
import numpy as np
import torch

from .errors import (
    DegenerateVectorError,
    DuplicateSliceError,
    EmptyCandidateError,
    FormatError,
    StoreConsistencyError,
)
from .imaging.manifest import DatasetManifest, SliceRecord, SliceSource
from .imaging.windows import WIDE_WINDOW, clip_and_scale, pseudo_rgb
from .selfsup.checkpoint import CheckpointBundle, load_checkpoint
from .selfsup.models import extract_h_batch

STORE_FORMAT = "liversearch-store"
STORE_VERSION = 1
_NORM_FLOOR = 1e-12


@dataclass
class EmbeddingStore:
    model_fingerprint: str
    dim: int
    ids: list[str] = field(default_factory=list)
    labels: list[bool] = field(default_factory=list)
    volume_ids: list[str] = field(default_factory=list)
    vectors: np.ndarray | None = None
    _id_to_row: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.vectors is None:
            self.vectors = np.zeros((0, self.dim), dtype=np.float32)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
            raise ValueError(
                f"vectors must have shape (n, {self.dim}), got {self.vectors.shape}"
            )
        if not (len(self.ids) == len(self.labels) == len(self.volume_ids) == len(self.vectors)):
            raise ValueError("ids, labels, volume_ids, and vectors must have equal length")
        self._id_to_row = {sid: i for i, sid in enumerate(self.ids)}
        if len(self._id_to_row) != len(self.ids):
            raise DuplicateSliceError("store contains duplicate slice ids")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, slice_id: str) -> bool:
        return slice_id in self._id_to_row

    def add(self, slice_id: str, liver_label: bool, volume_id: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ValueError(f"vector has dim {vec.shape[0]}, store expects {self.dim}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"vector for {slice_id!r} has non-finite entries")
        if slice_id in self._id_to_row:
            raise DuplicateSliceError(f"slice id {slice_id!r} already embedded")
        self._id_to_row[slice_id] = len(self.ids)
        self.ids.append(slice_id)
        self.labels.append(bool(liver_label))
        self.volume_ids.append(volume_id)
        self.vectors = np.concatenate([self.vectors, vec[None, :]], axis=0)

    def extend(self, rows: Iterable[tuple[str, bool, str, np.ndarray]]) -> None:
        rows = list(rows)
        if not rows:
            return
        new_ids = [r[0] for r in rows]
        seen = set(self._id_to_row)
        for sid in new_ids:
            if sid in seen:
                raise DuplicateSliceError(f"slice id {sid!r} already embedded")
            seen.add(sid)
        block = np.stack([np.asarray(r[3], dtype=np.float32).reshape(-1) for r in rows])
        if block.shape[1] != self.dim:
            raise ValueError(f"vectors have dim {block.shape[1]}, store expects {self.dim}")
        if not np.all(np.isfinite(block)):
            raise ValueError("vectors have non-finite entries")
        for sid, label, vid, _ in rows:
            self._id_to_row[sid] = len(self.ids)
            self.ids.append(sid)
            self.labels.append(bool(label))
            self.volume_ids.append(vid)
        self.vectors = np.concatenate([self.vectors, block], axis=0)

    def vector_of(self, slice_id: str) -> np.ndarray:
        row = self._id_to_row.get(slice_id)
        if row is None:
            raise KeyError(f"unknown slice id {slice_id!r}")
        return self.vectors[row]

    def label_of(self, slice_id: str) -> bool:
        row = self._id_to_row.get(slice_id)
        if row is None:
            raise KeyError(f"unknown slice id {slice_id!r}")
        return self.labels[row]

    def volume_of(self, slice_id: str) -> str:
        row = self._id_to_row.get(slice_id)
        if row is None:
            raise KeyError(f"unknown slice id {slice_id!r}")
        return self.volume_ids[row]


@dataclass
class RetrievalResult:
    query_id: str
    hits: list[tuple[str, float]]
    k: int
    clamped: bool = False

    @property
    def hit_ids(self) -> list[str]:
        return [sid for sid, _ in self.hits]


def cosine_similarities(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Cosine similarity of each row against q, computed in float64."""
    v = np.asarray(vectors, dtype=np.float64)
    qv = np.asarray(q, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(qv)
    if qn <= _NORM_FLOOR:
        raise DegenerateVectorError("query vector has zero norm")
    norms = np.maximum(np.linalg.norm(v, axis=1), _NORM_FLOOR)
    return (v @ (qv / qn)) / norms


def query(
    store: EmbeddingStore,
    q,
    k: int,
    *,
    exclude_id: str | None = None,
    restrict_to: str | None = None,
) -> RetrievalResult:
    """Exact top-k by cosine similarity; ties broken by slice_id ascending.

    k larger than the candidate pool is clamped (flagged on the result).

    Raises:
        EmptyCandidateError: no entries survive the filters.
        DegenerateVectorError: the query has zero norm.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    qv = np.asarray(q, dtype=np.float64).reshape(-1)
    if qv.shape[0] != store.dim:
        raise ValueError(f"query has dim {qv.shape[0]}, store expects {store.dim}")

    keep = [
        i
        for i, sid in enumerate(store.ids)
        if sid != exclude_id and (restrict_to is None or store.volume_ids[i] == restrict_to)
    ]
    if not keep:
        raise EmptyCandidateError(
            "no candidate entries"
            + (f" in volume {restrict_to!r}" if restrict_to is not None else "")
        )

    sims = cosine_similarities(store.vectors[keep], qv)
    order = sorted(range(len(keep)), key=lambda j: (-sims[j], store.ids[keep[j]]))
    k_eff = min(k, len(keep))
    hits = [(store.ids[keep[j]], float(sims[j])) for j in order[:k_eff]]
    return RetrievalResult(query_id="", hits=hits, k=k, clamped=k_eff < k)


def query_by_id(
    store: EmbeddingStore,
    slice_id: str,
    k: int,
    *,
    exclude_self: bool = True,
    restrict_to: str | None = None,
) -> RetrievalResult:
    qv = store.vector_of(slice_id)
    result = query(
        store,
        qv,
        k,
        exclude_id=slice_id if exclude_self else None,
        restrict_to=restrict_to,
    )
    result.query_id = slice_id
    return result


def embed_dataset(
    checkpoint: CheckpointBundle | str | Path,
    manifest: DatasetManifest,
    split: str,
    *,
    data_root: str | Path | None = None,
    hu_of=None,
    store: EmbeddingStore | None = None,
    batch_size: int = 64,
    out_size: tuple[int, int] | None = None,
) -> EmbeddingStore:
    """Embed every slice of a split with the wide clipping window.

    No augmentation is applied; slices are windowed, replicated to three
    channels, resized to the model's training input size, and passed through
    the encoder in eval mode. Deterministic for a fixed checkpoint.

    Raises:
        StoreConsistencyError: appending to a store built by another model.
        DuplicateSliceError: a record's slice id is already present.
    """
    bundle = checkpoint
    if not isinstance(bundle, CheckpointBundle):
        bundle = load_checkpoint(bundle)
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"manifest has an empty {split!r} split")
    if hu_of is None:
        if data_root is None:
            raise ValueError("either data_root or hu_of is required")
        source = SliceSource(data_root)
        hu_of = source.hu

    if out_size is None:
        cfg_size = bundle.augment_config.get("out_size")
        if cfg_size is not None:
            out_size = (int(cfg_size[0]), int(cfg_size[1]))

    model = bundle.model
    model.eval()
    dim = model.representation_dim
    if store is None:
        store = EmbeddingStore(model_fingerprint=bundle.fingerprint, dim=dim)
    elif store.model_fingerprint != bundle.fingerprint:
        raise StoreConsistencyError(
            f"store was built by model {store.model_fingerprint}, "
            f"checkpoint is {bundle.fingerprint}"
        )

    def prepare(record: SliceRecord) -> np.ndarray:
        img = clip_and_scale(hu_of(record), WIDE_WINDOW)
        if out_size is not None and img.shape != tuple(out_size):
            img = cv2.resize(img, (out_size[1], out_size[0]), interpolation=cv2.INTER_LINEAR)
        return pseudo_rgb(np.ascontiguousarray(img, dtype=np.float32))

    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = [prepare(r) for r in chunk]
        with torch.no_grad():
            vecs = extract_h_batch(model, images, batch_size=batch_size)
        store.extend(
            (r.slice_id, r.liver_label, r.volume_id, vecs[i]) for i, r in enumerate(chunk)
        )
    return store


def _checksum(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()[:8]


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    header = {
        "format": STORE_FORMAT,
        "version": STORE_VERSION,
        "fingerprint": store.model_fingerprint,
        "dim": store.dim,
        "count": len(store),
        "ids": store.ids,
        "labels": [bool(x) for x in store.labels],
        "volume_ids": store.volume_ids,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = np.ascontiguousarray(store.vectors, dtype="<f4").tobytes()
    body = header_bytes + b"\n" + blob
    Path(path).write_bytes(body + _checksum(body))


def load_store(path: str | Path) -> EmbeddingStore:
    """Load and verify a store file.

    Raises:
        FormatError: truncated file, malformed header, or checksum mismatch
            (any corruption of the header, including the fingerprint, or of
            the vector blob).
    """
    data = Path(path).read_bytes()
    if len(data) < 9:
        raise FormatError(f"store {path} is truncated", offset=len(data))
    body, stored_sum = data[:-8], data[-8:]
    if _checksum(body) != stored_sum:
        raise FormatError(f"store {path} failed its integrity checksum", offset=len(body))
    newline = body.find(b"\n")
    if newline < 0:
        raise FormatError(f"store {path} has no header delimiter", offset=0)
    try:
        header = json.loads(body[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"store {path} header is not valid JSON: {e}", offset=0)
    if header.get("format") != STORE_FORMAT:
        raise FormatError(f"not a {STORE_FORMAT} file: {path}", offset=0)
    if header.get("version") != STORE_VERSION:
        raise FormatError(f"unsupported store version {header.get('version')}", offset=0)

    dim = int(header["dim"])
    count = int(header["count"])
    blob = body[newline + 1 :]
    expected = count * dim * 4
    if len(blob) != expected:
        raise FormatError(
            f"store {path} blob has {len(blob)} bytes, expected {expected}",
            offset=newline + 1,
        )
    vectors = np.frombuffer(blob, dtype="<f4").reshape(count, dim).copy()
    return EmbeddingStore(
        model_fingerprint=header["fingerprint"],
        dim=dim,
        ids=list(header["ids"]),
        labels=[bool(x) for x in header["labels"]],
        volume_ids=list(header["volume_ids"]),
        vectors=vectors,
    )


def stores_equal(a: EmbeddingStore, b: EmbeddingStore) -> bool:
    return (
        a.model_fingerprint == b.model_fingerprint
        and a.dim == b.dim
        and a.ids == b.ids
        and a.labels == b.labels
        and a.volume_ids == b.volume_ids
        and a.vectors.tobytes() == b.vectors.tobytes()
    )
