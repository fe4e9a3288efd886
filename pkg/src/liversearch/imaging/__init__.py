"""CT volume loading, Hounsfield windowing, and dataset manifest building."""

from .manifest import (
    DatasetManifest,
    SliceRecord,
    SliceSource,
    build_manifest,
    build_manifest_from_dir,
    make_slice_id,
    sample_slices,
    split_slice_id,
)
from .phantom import generate_phantom_dataset, make_phantom_slice, make_phantom_volume
from .volume import (
    CTVolume,
    list_volume_headers,
    load_volume,
    pack_volume,
    save_volume,
    unpack_volume,
)
from .windows import (
    HU_MAX,
    HU_MIN,
    NARROW_WINDOW,
    WIDE_WINDOW,
    ClipWindow,
    clip_and_scale,
    pseudo_rgb,
)

__all__ = [
    "CTVolume",
    "ClipWindow",
    "DatasetManifest",
    "HU_MAX",
    "HU_MIN",
    "NARROW_WINDOW",
    "SliceRecord",
    "SliceSource",
    "WIDE_WINDOW",
    "build_manifest",
    "build_manifest_from_dir",
    "clip_and_scale",
    "generate_phantom_dataset",
    "list_volume_headers",
    "load_volume",
    "make_phantom_slice",
    "make_phantom_volume",
    "make_slice_id",
    "pack_volume",
    "pseudo_rgb",
    "sample_slices",
    "save_volume",
    "split_slice_id",
    "unpack_volume",
]
