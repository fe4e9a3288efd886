"""CT volume container and on-disk format.

A volume is stored as a pair of files sharing a stem:

    <stem>.json       JSON header: {"shape": [D, H, W], "dtype": "int16",
                      "byte_order": "little", "spacing": [..], "volume_id": ..,
                      "has_mask": bool}
    <stem>.hu.raw     D*H*W little-endian int16 HU values, C order
    <stem>.mask.raw   optional companion uint8 mask blob, same shape

Blobs may be gzip-compressed (``.raw.gz`` suffix); both are tried on load.
Slices are indexed along the first array axis (axial stacks).
"""

from __future__ import annotations

import gzip
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, MaskAlignmentError
from .windows import HU_MAX, HU_MIN

_HEADER_DTYPE = "int16"


@dataclass
class CTVolume:
    """A 3-D grid of Hounsfield units plus an optional liver mask.

    Attributes:
        voxels: (D, H, W) int16 HU array, saturated into [-1024, 3071].
        liver_mask: optional (D, H, W) uint8 binary array.
        spacing: (mm/voxel) along each axis.
        volume_id: opaque identifier; also used to order volumes.
    """

    voxels: np.ndarray
    liver_mask: np.ndarray | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    volume_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3-D, got shape {self.voxels.shape}")
        self.voxels = np.clip(self.voxels, HU_MIN, HU_MAX).astype(np.int16)
        if self.liver_mask is not None:
            self.liver_mask = np.asarray(self.liver_mask)
            if self.liver_mask.shape != self.voxels.shape:
                raise MaskAlignmentError(
                    f"mask shape {self.liver_mask.shape} != voxel shape {self.voxels.shape}"
                )
            self.liver_mask = (self.liver_mask != 0).astype(np.uint8)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    def slice_hu(self, index: int) -> np.ndarray:
        return self.voxels[index]

    def slice_mask(self, index: int) -> np.ndarray | None:
        return None if self.liver_mask is None else self.liver_mask[index]

    def slice_has_liver(self, index: int) -> bool:
        """True iff the slice's mask has at least one nonzero pixel."""
        if self.liver_mask is None:
            return False
        return bool(self.liver_mask[index].any())


def _read_blob(path: Path) -> bytes:
    gz = path.with_name(path.name + ".gz")
    if path.exists():
        return path.read_bytes()
    if gz.exists():
        with gzip.open(gz, "rb") as f:
            return f.read()
    raise FormatError(f"missing blob file: {path} (or {gz.name})")


def save_volume(volume: CTVolume, directory: str | Path, *, compress: bool = False) -> Path:
    """Write a volume (and its mask, when present) under ``directory``.

    Returns the header path. Blobs are little-endian regardless of host order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / volume.volume_id
    header = {
        "shape": list(volume.voxels.shape),
        "dtype": _HEADER_DTYPE,
        "byte_order": "little",
        "spacing": list(volume.spacing),
        "volume_id": volume.volume_id,
        "has_mask": volume.liver_mask is not None,
    }
    header_path = stem.with_suffix(".json")
    header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    hu_bytes = volume.voxels.astype("<i2").tobytes()
    _write_blob(Path(str(stem) + ".hu.raw"), hu_bytes, compress)
    if volume.liver_mask is not None:
        _write_blob(Path(str(stem) + ".mask.raw"), volume.liver_mask.tobytes(), compress)
    return header_path


def _write_blob(path: Path, data: bytes, compress: bool):
    if compress:
        gz_path = path.with_name(path.name + ".gz")
        # mtime pinned to zero so identical voxels produce identical bytes
        with open(gz_path, "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
                f.write(data)
    else:
        path.write_bytes(data)


def load_volume(header_path: str | Path) -> CTVolume:
    """Load a volume from its JSON header path.

    Raises:
        FormatError: header or blob fails to parse (offset reported when known).
        MaskAlignmentError: mask blob size disagrees with the voxel shape.
    """
    header_path = Path(header_path)
    try:
        text = header_path.read_text(encoding="utf-8")
        header = json.loads(text)
    except FileNotFoundError:
        raise FormatError(f"no such volume header: {header_path}")
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid volume header {header_path}: {e.msg}", offset=e.pos)

    try:
        shape = tuple(int(s) for s in header["shape"])
        dtype = header["dtype"]
        byte_order = header.get("byte_order", "little")
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed volume header {header_path}: {e}")
    if len(shape) != 3:
        raise FormatError(f"volume shape must have 3 dims, got {shape}")
    if dtype != _HEADER_DTYPE:
        raise FormatError(f"unsupported voxel dtype {dtype!r}")

    stem = header_path.with_suffix("")
    hu_bytes = _read_blob(Path(str(stem) + ".hu.raw"))
    n_expected = int(np.prod(shape)) * 2
    if len(hu_bytes) != n_expected:
        raise FormatError(
            f"HU blob for {header_path.stem} has {len(hu_bytes)} bytes, expected {n_expected}",
            offset=min(len(hu_bytes), n_expected),
        )
    hu_dtype = "<i2" if byte_order == "little" else ">i2"
    voxels = np.frombuffer(hu_bytes, dtype=hu_dtype).reshape(shape).astype(np.int16)

    mask = None
    if header.get("has_mask"):
        mask_bytes = _read_blob(Path(str(stem) + ".mask.raw"))
        if len(mask_bytes) != int(np.prod(shape)):
            raise MaskAlignmentError(
                f"mask blob for {header_path.stem} has {len(mask_bytes)} bytes, "
                f"expected {int(np.prod(shape))}"
            )
        mask = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(shape)

    spacing = tuple(header.get("spacing", (1.0, 1.0, 1.0)))
    volume_id = header.get("volume_id", header_path.stem)
    return CTVolume(voxels=voxels, liver_mask=mask, spacing=spacing, volume_id=volume_id)


def list_volume_headers(directory: str | Path) -> list[Path]:
    """All volume header paths under ``directory``, sorted by volume id."""
    return sorted(Path(directory).glob("*.json"))


# Single-stream framing of the same header+blob layout, used for HTTP uploads:
# [4-byte LE header length][header JSON utf-8][HU blob][mask blob if has_mask].
def pack_volume(volume: CTVolume) -> bytes:
    header = {
        "shape": list(volume.voxels.shape),
        "dtype": _HEADER_DTYPE,
        "byte_order": "little",
        "spacing": list(volume.spacing),
        "volume_id": volume.volume_id,
        "has_mask": volume.liver_mask is not None,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(struct.pack("<I", len(header_bytes)))
    out.write(header_bytes)
    out.write(volume.voxels.astype("<i2").tobytes())
    if volume.liver_mask is not None:
        out.write(volume.liver_mask.tobytes())
    return out.getvalue()


def unpack_volume(payload: bytes) -> CTVolume:
    """Inverse of :func:`pack_volume`; raises FormatError on truncation."""
    if len(payload) < 4:
        raise FormatError("volume payload shorter than length prefix", offset=len(payload))
    (header_len,) = struct.unpack("<I", payload[:4])
    if len(payload) < 4 + header_len:
        raise FormatError("volume payload truncated inside header", offset=len(payload))
    try:
        header = json.loads(payload[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"invalid packed volume header: {e}", offset=4)
    try:
        shape = tuple(int(s) for s in header["shape"])
        has_mask = bool(header.get("has_mask"))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed packed volume header: {e}", offset=4)
    if len(shape) != 3 or header.get("dtype") != _HEADER_DTYPE:
        raise FormatError("unsupported packed volume header", offset=4)

    n_vox = int(np.prod(shape))
    offset = 4 + header_len
    hu_end = offset + n_vox * 2
    if len(payload) < hu_end:
        raise FormatError("volume payload truncated inside HU blob", offset=len(payload))
    voxels = np.frombuffer(payload[offset:hu_end], dtype="<i2").reshape(shape)
    mask = None
    if has_mask:
        if len(payload) < hu_end + n_vox:
            raise FormatError("volume payload truncated inside mask blob", offset=len(payload))
        mask = np.frombuffer(payload[hu_end : hu_end + n_vox], dtype=np.uint8).reshape(shape)
    return CTVolume(
        voxels=voxels.astype(np.int16),
        liver_mask=mask,
        spacing=tuple(header.get("spacing", (1.0, 1.0, 1.0))),
        volume_id=header.get("volume_id", ""),
    )
