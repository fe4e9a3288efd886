"""HTTP retrieval service.

Serves one model checkpoint and one embedding store per process. Queries and
explanations read an immutable store snapshot; volume ingestion is serialized
behind a lock and promotes a rebuilt store atomically, so readers observe
either the old or the new index, never a mixture.

Endpoints (JSON unless noted):
    GET  /health                    liveness + fingerprint
    GET  /stores/active             fingerprint, count, dim, slice ids
    GET  /slices/{slice_id}         PNG render, ?window=narrow|wide
    POST /volumes                   packed volume bytes -> ingest + reindex
    POST /query                     {slice_id|image, k, restrict_to_volume}
    GET  /explain/{slice_id}        ?n_masks=&seed=  cached saliency map
"""

from __future__ import annotations

import base64
import binascii
import io
import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from fastapi import Body, Depends, FastAPI, HTTPException, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image
from pydantic import BaseModel, Field

from .errors import EmptyCandidateError, FormatError, LiverSearchError, MaskAlignmentError
from .imaging.manifest import split_slice_id
from .imaging.volume import CTVolume, load_volume, save_volume, unpack_volume
from .imaging.windows import NARROW_WINDOW, WIDE_WINDOW, ClipWindow, clip_and_scale, pseudo_rgb
from .index import EmbeddingStore, load_store, query, save_store
from .relax import DEFAULT_GRID, DEFAULT_P, generate_masks, normalize_for_display, relax_importance
from .selfsup.checkpoint import load_checkpoint
from .selfsup.models import extract_h

logger = logging.getLogger(__name__)

WINDOWS = {"narrow": NARROW_WINDOW, "wide": WIDE_WINDOW}


@dataclass(frozen=True)
class ServiceConfig:
    checkpoint_path: Path
    store_path: Path
    data_root: Path
    host: str = "127.0.0.1"
    port: int = 8000
    n_masks: int = 3000
    max_concurrent_explanations: int = 2
    auth_token: str | None = None
    cors_origins: tuple[str, ...] = ("*",)

    def __post_init__(self):
        if self.n_masks < 1:
            raise ValueError(f"n_masks must be >= 1, got {self.n_masks}")
        if self.max_concurrent_explanations < 1:
            raise ValueError(
                f"max_concurrent_explanations must be >= 1, "
                f"got {self.max_concurrent_explanations}"
            )


class QueryImage(BaseModel):
    shape: list[int] = Field(min_length=2, max_length=2)
    hu_b64: str

    def to_array(self) -> np.ndarray:
        h, w = int(self.shape[0]), int(self.shape[1])
        if h < 1 or w < 1:
            raise ValueError(f"invalid slice shape {self.shape}")
        try:
            raw = base64.b64decode(self.hu_b64, validate=True)
        except (binascii.Error, ValueError) as e:
            raise ValueError(f"hu_b64 is not valid base64: {e}")
        if len(raw) != h * w * 2:
            raise ValueError(f"expected {h * w * 2} bytes of int16 data, got {len(raw)}")
        return np.frombuffer(raw, dtype="<i2").reshape(h, w)


class QueryRequest(BaseModel):
    slice_id: str | None = None
    image: QueryImage | None = None
    k: int = Field(default=5, ge=1)
    restrict_to_volume: str | None = None


class _ServiceState:
    def __init__(self, config: ServiceConfig):
        self.config = config
        self.bundle = load_checkpoint(config.checkpoint_path)
        self.store: EmbeddingStore = load_store(config.store_path)
        if self.store.model_fingerprint != self.bundle.fingerprint:
            raise LiverSearchError(
                f"store fingerprint {self.store.model_fingerprint} does not match "
                f"checkpoint {self.bundle.fingerprint}"
            )
        size = self.bundle.augment_config.get("out_size")
        self.input_size = (int(size[0]), int(size[1])) if size else None
        self.ingest_lock = threading.Lock()
        self.explain_slots = threading.BoundedSemaphore(config.max_concurrent_explanations)
        self.explain_cache: dict[tuple, bytes] = {}
        self.cache_lock = threading.Lock()
        self._volumes: dict[str, CTVolume] = {}

    def volume(self, volume_id: str) -> CTVolume:
        cached = self._volumes.get(volume_id)
        if cached is not None:
            return cached
        for suffix in (".json", ".json.gz"):
            header = Path(self.config.data_root) / f"{volume_id}{suffix}"
            if header.exists():
                vol = load_volume(header)
                self._volumes[volume_id] = vol
                return vol
        raise KeyError(f"unknown volume {volume_id!r}")

    def slice_hu(self, slice_id: str) -> np.ndarray:
        volume_id, index = split_slice_id(slice_id)
        vol = self.volume(volume_id)
        if not 0 <= index < vol.n_slices:
            raise KeyError(f"slice index {index} out of range for volume {volume_id!r}")
        return vol.slice_hu(index)

    def prepare_image(self, hu: np.ndarray) -> np.ndarray:
        img = clip_and_scale(hu, WIDE_WINDOW)
        if self.input_size is not None and img.shape != self.input_size:
            img = cv2.resize(
                img,
                (self.input_size[1], self.input_size[0]),
                interpolation=cv2.INTER_LINEAR,
            )
        return pseudo_rgb(np.ascontiguousarray(img, dtype=np.float32))

    def embed_hu(self, hu: np.ndarray) -> np.ndarray:
        return extract_h(self.bundle.model, self.prepare_image(hu))


def _persist_store(store: EmbeddingStore, path: Path) -> None:
    tmp = path.with_name(path.name + ".staged")
    save_store(store, tmp)
    os.replace(tmp, path)


def create_app(config: ServiceConfig) -> FastAPI:
    for attr in ("checkpoint_path", "store_path", "data_root"):
        p = Path(getattr(config, attr))
        if not p.exists():
            raise FileNotFoundError(f"{attr} does not exist: {p}")

    state = _ServiceState(config)
    app = FastAPI(title="liversearch")
    app.state.search = state
    if config.cors_origins:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=list(config.cors_origins),
            allow_methods=["*"],
            allow_headers=["*"],
        )

    def require_auth(request: Request) -> None:
        if config.auth_token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {config.auth_token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    @app.get("/health")
    def health() -> dict:
        return {
            "status": "ok",
            "model_fingerprint": state.bundle.fingerprint,
            "store_count": len(state.store),
        }

    @app.get("/stores/active", dependencies=[Depends(require_auth)])
    def stores_active() -> dict:
        store = state.store
        return {
            "fingerprint": store.model_fingerprint,
            "count": len(store),
            "dim": store.dim,
            "slice_ids": list(store.ids),
            "volume_ids": sorted(set(store.volume_ids)),
        }

    @app.get("/slices/{slice_id}", dependencies=[Depends(require_auth)])
    def render_slice(slice_id: str, window: str = Query(default="wide")) -> Response:
        win: ClipWindow | None = WINDOWS.get(window)
        if win is None:
            raise HTTPException(status_code=422, detail=f"unknown window {window!r}")
        try:
            hu = state.slice_hu(slice_id)
        except (KeyError, FileNotFoundError):
            raise HTTPException(status_code=404, detail=f"unknown slice {slice_id!r}")
        scaled = clip_and_scale(hu, win)
        png = Image.fromarray(np.round(scaled * 255.0).astype(np.uint8), mode="L")
        buf = io.BytesIO()
        png.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/volumes", dependencies=[Depends(require_auth)])
    async def ingest_volume(request: Request) -> dict:
        payload = await request.body()
        try:
            volume = unpack_volume(payload)
        except (FormatError, MaskAlignmentError, ValueError) as e:
            raise HTTPException(status_code=422, detail=f"volume payload rejected: {e}")

        with state.ingest_lock:
            vid = volume.volume_id
            on_disk = any(
                (Path(config.data_root) / f"{vid}{sfx}").exists()
                for sfx in (".json", ".json.gz")
            )
            if on_disk or vid in set(state.store.volume_ids):
                raise HTTPException(status_code=409, detail=f"volume {vid!r} already ingested")

            staged = EmbeddingStore(
                model_fingerprint=state.store.model_fingerprint,
                dim=state.store.dim,
                ids=list(state.store.ids),
                labels=list(state.store.labels),
                volume_ids=list(state.store.volume_ids),
                vectors=state.store.vectors.copy(),
            )
            rows = []
            for i in range(volume.n_slices):
                sid = f"{vid}:{i:04d}"
                label = volume.slice_has_liver(i) if volume.liver_mask is not None else False
                rows.append((sid, label, vid, state.embed_hu(volume.slice_hu(i))))
            staged.extend(rows)

            header_path = save_volume(volume, config.data_root)
            try:
                _persist_store(staged, Path(config.store_path))
            except Exception:
                header_path.unlink(missing_ok=True)
                raise
            state._volumes[vid] = volume
            state.store = staged
        return {"volume_id": vid, "n_slices": volume.n_slices}

    @app.post("/query", dependencies=[Depends(require_auth)])
    def handle_query(body: QueryRequest = Body(...)) -> dict:
        if (body.slice_id is None) == (body.image is None):
            raise HTTPException(
                status_code=422, detail="provide exactly one of slice_id or image"
            )
        store = state.store
        if body.slice_id is not None:
            if body.slice_id not in store:
                raise HTTPException(
                    status_code=404, detail=f"unknown slice {body.slice_id!r}"
                )
            qvec = store.vector_of(body.slice_id)
            exclude = body.slice_id
            query_id = body.slice_id
        else:
            try:
                hu = body.image.to_array()
            except ValueError as e:
                raise HTTPException(status_code=422, detail=str(e))
            qvec = state.embed_hu(hu)
            exclude = None
            query_id = ""

        try:
            result = query(
                store,
                qvec,
                body.k,
                exclude_id=exclude,
                restrict_to=body.restrict_to_volume,
            )
        except EmptyCandidateError as e:
            raise HTTPException(status_code=409, detail=str(e))
        return {
            "query_id": query_id,
            "k": body.k,
            "clamped": result.clamped,
            "hits": [
                {
                    "slice_id": sid,
                    "similarity": sim,
                    "liver_label": store.label_of(sid),
                    "volume_id": store.volume_of(sid),
                    "url": f"/slices/{sid}",
                }
                for sid, sim in result.hits
            ],
        }

    @app.get("/explain/{slice_id}", dependencies=[Depends(require_auth)])
    def handle_explain(
        slice_id: str,
        n_masks: int | None = Query(default=None, ge=1),
        seed: int = Query(default=0),
    ) -> Response:
        if n_masks is None:
            n_masks = config.n_masks
        if slice_id not in state.store:
            raise HTTPException(status_code=404, detail=f"unknown slice {slice_id!r}")
        key = (slice_id, state.bundle.fingerprint, n_masks, seed)
        with state.cache_lock:
            cached = state.explain_cache.get(key)
        if cached is not None:
            return Response(content=cached, media_type="application/json")

        if not state.explain_slots.acquire(blocking=False):
            raise HTTPException(
                status_code=429,
                detail="explanation budget exhausted; retry shortly",
                headers={"Retry-After": "1"},
            )
        try:
            try:
                hu = state.slice_hu(slice_id)
            except (KeyError, FileNotFoundError):
                raise HTTPException(status_code=404, detail=f"unknown slice {slice_id!r}")
            image = state.prepare_image(hu)
            masks = generate_masks(
                n_masks, DEFAULT_GRID, DEFAULT_P, image.shape[:2], seed
            )
            smap = relax_importance(state.bundle.model, image, masks)
            normalized = normalize_for_display(smap.R)
            payload = json.dumps(
                {
                    "slice_id": slice_id,
                    "model_fingerprint": state.bundle.fingerprint,
                    "n_masks": n_masks,
                    "n_masks_used": smap.n_masks_used,
                    "seed": seed,
                    "grid": list(DEFAULT_GRID),
                    "p": DEFAULT_P,
                    "shape": list(smap.R.shape),
                    "saliency": [[round(float(v), 6) for v in row] for row in normalized],
                },
                sort_keys=True,
            ).encode("utf-8")
        finally:
            state.explain_slots.release()
        with state.cache_lock:
            cached = state.explain_cache.setdefault(key, payload)
        return Response(content=cached, media_type="application/json")

    return app


def run_service(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port)
