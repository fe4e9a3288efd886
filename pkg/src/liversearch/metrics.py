"""Retrieval and representation evaluation.

Scores: precision at k, mean average precision over the top-K retrievals
(relevance = liver-label match), kNN classification accuracy under cosine
similarity, and relevance rank accuracy for saliency maps against liver
masks. All metrics are pure functions of stores and arrays, exact enough to
compare against brute-force re-implementations.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyMaskError, StoreConsistencyError
from .index import EmbeddingStore, query

DEFAULT_K = 5


def precision_at_k(hit_labels: Sequence[bool], k: int) -> float:
    """Fraction of the first k hits that are relevant."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(hit_labels) < k:
        raise ValueError(f"need at least {k} hits, got {len(hit_labels)}")
    return sum(bool(x) for x in hit_labels[:k]) / k


def average_precision(hit_labels: Sequence[bool], k: int) -> float:
    """Mean of precision at k' for k' = 1..k over one ranked hit list."""
    if len(hit_labels) < k:
        raise ValueError(f"need at least {k} hits, got {len(hit_labels)}")
    rel = np.asarray([bool(x) for x in hit_labels[:k]], dtype=np.float64)
    precisions = np.cumsum(rel) / np.arange(1, k + 1)
    return float(precisions.mean())


def mean_average_precision(
    store: EmbeddingStore,
    k: int = DEFAULT_K,
    database: str = "test_loo",
    *,
    train_store: EmbeddingStore | None = None,
    return_per_query: bool = False,
):
    """MAP over every entry of `store` used as a query.

    database="test_loo": candidates are the other entries of the same store
    (leave-one-out). database="train": candidates are the entries of
    train_store, no exclusion. Relevance is liver-label agreement.
    """
    if len(store) == 0:
        raise ValueError("store is empty")
    if database == "test_loo":
        candidates = store
        if len(store) - 1 < k:
            raise ValueError(
                f"leave-one-out needs at least {k + 1} entries, store has {len(store)}"
            )
        exclude = True
    elif database == "train":
        if train_store is None:
            raise ValueError("database='train' requires train_store")
        if train_store.model_fingerprint != store.model_fingerprint:
            raise StoreConsistencyError(
                "query and database stores come from different models"
            )
        candidates = train_store
        if len(train_store) < k:
            raise ValueError(
                f"database must hold at least {k} entries, has {len(train_store)}"
            )
        exclude = False
    else:
        raise ValueError(f"unknown database mode {database!r}")

    per_query: list[tuple[str, float]] = []
    for i, qid in enumerate(store.ids):
        result = query(
            candidates,
            store.vectors[i],
            k,
            exclude_id=qid if exclude else None,
        )
        qlabel = store.labels[i]
        hit_labels = [candidates.label_of(sid) == qlabel for sid, _ in result.hits]
        per_query.append((qid, average_precision(hit_labels, k)))

    value = float(np.mean([ap for _, ap in per_query]))
    if return_per_query:
        return value, per_query
    return value


def knn_accuracy(
    train_store: EmbeddingStore,
    test_store: EmbeddingStore,
    k: int = DEFAULT_K,
    *,
    return_per_query: bool = False,
):
    """Majority-vote kNN over cosine similarity; ties fall back to the
    single nearest neighbor's label."""
    if train_store.model_fingerprint != test_store.model_fingerprint:
        raise StoreConsistencyError("train and test stores come from different models")
    if len(test_store) == 0:
        raise ValueError("test store is empty")
    if len(train_store) < k:
        raise ValueError(f"train store must hold at least {k} entries, has {len(train_store)}")

    per_query: list[tuple[str, bool]] = []
    for i, qid in enumerate(test_store.ids):
        result = query(train_store, test_store.vectors[i], k)
        votes = [train_store.label_of(sid) for sid, _ in result.hits]
        n_true = sum(votes)
        n_false = len(votes) - n_true
        if n_true > n_false:
            predicted = True
        elif n_false > n_true:
            predicted = False
        else:
            predicted = votes[0]
        per_query.append((qid, predicted == test_store.labels[i]))

    value = float(np.mean([correct for _, correct in per_query]))
    if return_per_query:
        return value, per_query
    return value


def relevance_rank(R: np.ndarray, S: np.ndarray) -> float:
    """Fraction of the |S| highest-importance pixels that fall inside S.

    Ranking ties are broken in row-major order so the score is deterministic.

    Raises:
        EmptyMaskError: S selects no pixels (caller should exclude the image
            from any mean and report the count).
    """
    R = np.asarray(R, dtype=np.float64)
    S = np.asarray(S).astype(bool)
    if R.shape != S.shape:
        raise ValueError(f"shape mismatch: saliency {R.shape} vs mask {S.shape}")
    m = int(S.sum())
    if m == 0:
        raise EmptyMaskError("mask selects no pixels; relevance rank is undefined")
    flat_r = R.reshape(-1)
    flat_s = S.reshape(-1)
    # Stable sort on the negated values keeps equal scores in row-major order.
    top = np.argsort(-flat_r, kind="stable")[:m]
    return float(flat_s[top].sum() / m)


def mean_relevance_rank(
    saliency_maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]
) -> tuple[float, int, int]:
    """Mean RR over pairs, skipping empty masks; returns (mean, used, skipped)."""
    if len(saliency_maps) != len(masks):
        raise ValueError("need one mask per saliency map")
    scores = []
    skipped = 0
    for R, S in zip(saliency_maps, masks):
        try:
            scores.append(relevance_rank(R, S))
        except EmptyMaskError:
            skipped += 1
    if not scores:
        raise EmptyMaskError("every mask was empty")
    return float(np.mean(scores)), len(scores), skipped


@dataclass
class EvalReport:
    map: float
    knn_accuracy: float
    relevance_rank: float
    k: int
    n_queries: int
    seed: int
    per_query: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("map", "knn_accuracy", "relevance_rank"):
            value = getattr(self, name)
            if np.isfinite(value) and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_json(self) -> dict:
        out = {
            "map": self.map,
            "knn_accuracy": self.knn_accuracy,
            "relevance_rank": self.relevance_rank,
            "k": self.k,
            "n_queries": self.n_queries,
            "seed": self.seed,
            "per_query": self.per_query,
        }
        out.update(self.extras)
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    def save_per_query_csv(self, path: str | Path) -> None:
        if not self.per_query:
            raise ValueError("report has no per-query breakdown")
        fields = sorted({key for row in self.per_query for key in row})
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(self.per_query)
