"""Self-describing checkpoint container.

Layout: one line of compact JSON (UTF-8, sorted keys), a newline, the
concatenated little-endian parameter blobs in header order, and a trailing
8-byte integrity checksum over everything before it.

The header carries the format version, encoder/head specs, the training and
augmentation configs that produced the model, a tensor manifest
(name/dtype/shape per state-dict entry), and the content fingerprint. The
fingerprint hashes the header (sans fingerprint) plus the blob; embedding
stores record it so vectors can never be mixed across models.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError
from .models import EncoderSpec, HeadSpec, SiameseModel

FORMAT_NAME = "liversearch-checkpoint"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": ("<f4", torch.float32),
    "float64": ("<f8", torch.float64),
    "int64": ("<i8", torch.int64),
    "int32": ("<i4", torch.int32),
    "uint8": ("|u1", torch.uint8),
    "bool": ("|b1", torch.bool),
}
_TORCH_NAMES = {v[1]: k for k, v in _DTYPES.items()}


def _checksum(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()[:8]


def _fingerprint(header: dict, blob: bytes) -> str:
    stripped = {k: v for k, v in header.items() if k != "fingerprint"}
    basis = json.dumps(stripped, sort_keys=True).encode("utf-8") + b"\n" + blob
    return hashlib.sha256(basis).hexdigest()[:16]


@dataclass
class CheckpointBundle:
    model: SiameseModel
    encoder_spec: EncoderSpec
    head_spec: HeadSpec
    train_config: dict
    augment_config: dict
    fingerprint: str


def save_checkpoint(
    model: SiameseModel,
    path: str | Path,
    *,
    train_config: dict | None = None,
    augment_config: dict | None = None,
) -> str:
    """Serialize a model; returns its content fingerprint."""
    state = model.state_dict()
    tensors = []
    parts = []
    for name, tensor in state.items():
        t = tensor.detach().cpu()
        dtype_name = _TORCH_NAMES.get(t.dtype)
        if dtype_name is None:
            raise ValueError(f"unsupported tensor dtype {t.dtype} for {name!r}")
        np_dtype = _DTYPES[dtype_name][0]
        parts.append(t.numpy().astype(np_dtype).tobytes())
        tensors.append({"name": name, "dtype": dtype_name, "shape": list(t.shape)})
    blob = b"".join(parts)

    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "encoder_spec": model.encoder_spec.to_json(),
        "head_spec": model.head_spec.to_json(),
        "train_config": train_config or {},
        "augment_config": augment_config or {},
        "tensors": tensors,
    }
    header["fingerprint"] = _fingerprint(header, blob)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = header_bytes + b"\n" + blob
    Path(path).write_bytes(body + _checksum(body))
    return header["fingerprint"]


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    """Load and verify a checkpoint; rebuilds the model from its specs.

    Raises:
        FormatError: truncated file, corrupted checksum, or malformed header.
    """
    data = Path(path).read_bytes()
    if len(data) < 9:
        raise FormatError(f"checkpoint {path} is truncated", offset=len(data))
    body, stored_sum = data[:-8], data[-8:]
    if _checksum(body) != stored_sum:
        raise FormatError(f"checkpoint {path} failed its integrity checksum", offset=len(body))

    newline = body.find(b"\n")
    if newline < 0:
        raise FormatError(f"checkpoint {path} has no header delimiter", offset=0)
    try:
        header = json.loads(body[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint {path} header is not valid JSON: {e}", offset=0)
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"not a {FORMAT_NAME} file: {path}", offset=0)
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')}", offset=0)

    blob = body[newline + 1 :]
    if _fingerprint(header, blob) != header.get("fingerprint"):
        raise FormatError(f"checkpoint {path} fingerprint mismatch", offset=newline + 1)

    encoder_spec = EncoderSpec.from_json(header["encoder_spec"])
    head_spec = HeadSpec.from_json(header["head_spec"])
    model = SiameseModel(encoder_spec, head_spec)

    state = {}
    offset = 0
    for entry in header["tensors"]:
        np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * np.dtype(np_dtype).itemsize
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(
                f"checkpoint {path} blob truncated at tensor {entry['name']!r}",
                offset=newline + 1 + offset,
            )
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr).to(torch_dtype)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"checkpoint {path} has {len(blob) - offset} trailing blob bytes")

    model.load_state_dict(state)
    model.eval()
    return CheckpointBundle(
        model=model,
        encoder_spec=encoder_spec,
        head_spec=head_spec,
        train_config=header.get("train_config", {}),
        augment_config=header.get("augment_config", {}),
        fingerprint=header["fingerprint"],
    )
