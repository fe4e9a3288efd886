"""Siamese encoder/projector/predictor models.

The downstream representation h is always the output of the encoder's global
average pooling. The projector maps h to z (where the loss lives) and the
predictor maps z to p. Two encoder families are provided: a standard
ResNet-50 (2048-d, optionally initialized from externally supplied
ImageNet weights) and a small from-scratch convnet for desk-scale runs and
numeric tests.

Head normalization follows the encoder family: BatchNorm for ResNet-50,
LayerNorm for the tiny encoder (LayerNorm is batch-size independent, which
keeps single-image forwards and gradient checks well-defined).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

ENCODER_KINDS = ("resnet50", "tiny_conv")
_DEFAULT_OUT_DIM = {"resnet50": 2048, "tiny_conv": 128}


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "tiny_conv"
    out_dim: int | None = None  # None: family default (2048 / 128)
    init: str = "random"  # "random" | "imagenet_pretrained"
    width: int = 32  # tiny_conv stem width; ignored by resnet50
    weights_path: str | None = None  # external ImageNet weights (not serialized)

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.init not in ("random", "imagenet_pretrained"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.kind == "resnet50" and self.out_dim not in (None, 2048):
            raise ValueError("resnet50 representation dimension is fixed at 2048")

    @property
    def dim(self) -> int:
        return self.out_dim if self.out_dim is not None else _DEFAULT_OUT_DIM[self.kind]

    def to_json(self) -> dict:
        # weights_path is environment-specific and intentionally dropped
        return {"kind": self.kind, "out_dim": self.dim, "init": self.init, "width": self.width}

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderSpec":
        return cls(
            kind=obj["kind"],
            out_dim=obj.get("out_dim"),
            init=obj.get("init", "random"),
            width=obj.get("width", 32),
        )


@dataclass(frozen=True)
class HeadSpec:
    proj_dim: int | None = None  # None: equal to encoder dim
    norm: str | None = None  # None: by encoder family; "batch" | "layer"
    direct: bool = False  # ablation: project h and predict it directly (no predictor)

    def resolved(self, encoder: EncoderSpec) -> tuple[int, str]:
        proj_dim = self.proj_dim if self.proj_dim is not None else encoder.dim
        norm = self.norm if self.norm is not None else (
            "batch" if encoder.kind == "resnet50" else "layer"
        )
        if norm not in ("batch", "layer"):
            raise ValueError(f"unknown head norm {norm!r}")
        return proj_dim, norm

    def to_json(self) -> dict:
        return {"proj_dim": self.proj_dim, "norm": self.norm, "direct": self.direct}

    @classmethod
    def from_json(cls, obj: dict) -> "HeadSpec":
        return cls(
            proj_dim=obj.get("proj_dim"),
            norm=obj.get("norm"),
            direct=obj.get("direct", False),
        )


def _norm1d(kind: str, dim: int, affine: bool = True) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm1d(dim, affine=affine)
    return nn.LayerNorm(dim, elementwise_affine=affine)


class TinyConvEncoder(nn.Module):
    """Three strided conv blocks with GroupNorm, ending in global average pooling.

    Fully convolutional: accepts any input at least 1x1. The representation
    dimension equals the final block's channel count.
    """

    def __init__(self, out_dim: int = 128, width: int = 32):
        super().__init__()
        c1, c2 = width, width * 2

        def block(cin, cout):
            return [
                nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(math.gcd(cout, 8), cout),
                nn.ReLU(inplace=True),
            ]

        self.features = nn.Sequential(*block(3, c1), *block(c1, c2), *block(c2, out_dim))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = out_dim

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.kind == "tiny_conv":
        return TinyConvEncoder(out_dim=spec.dim, width=spec.width)

    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.fc = nn.Identity()
    if spec.init == "imagenet_pretrained":
        if not spec.weights_path:
            raise ValueError(
                "imagenet_pretrained init needs weights_path pointing to a "
                "torchvision resnet50 state dict"
            )
        state = torch.load(spec.weights_path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        net.load_state_dict(state, strict=False)
    net.out_dim = 2048
    return net


class Projector(nn.Module):
    """Three fully connected layers, each followed by normalization; the two
    hidden layers carry rectifiers, the output normalization has no affine."""

    def __init__(self, in_dim: int, out_dim: int, norm: str):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, out_dim),
            _norm1d(norm, out_dim),
            nn.ReLU(inplace=True),
            nn.Linear(out_dim, out_dim),
            _norm1d(norm, out_dim),
            nn.ReLU(inplace=True),
            nn.Linear(out_dim, out_dim),
            _norm1d(norm, out_dim, affine=False),
        )

    def forward(self, x):
        return self.net(x)


class Predictor(nn.Module):
    """Two-layer bottleneck: hidden dimension is a quarter of the output."""

    def __init__(self, dim: int, norm: str):
        super().__init__()
        hidden = max(1, dim // 4)
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            _norm1d(norm, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, dim),
        )

    def forward(self, x):
        return self.net(x)


class SiameseModel(nn.Module):
    """Encoder f, projector g, predictor q.

    ``forward_views`` returns (p1, p2, z1, z2): predictor outputs and the
    projector outputs that serve as (to-be-frozen) targets. In direct mode
    the targets are the raw representations h and the projector doubles as
    the predictor.
    """

    def __init__(self, encoder_spec: EncoderSpec, head_spec: HeadSpec = HeadSpec()):
        super().__init__()
        self.encoder_spec = encoder_spec
        self.head_spec = head_spec
        self.encoder = build_encoder(encoder_spec)
        d = self.encoder.out_dim
        proj_dim, norm = head_spec.resolved(encoder_spec)
        if head_spec.direct:
            self.projector = Projector(d, d, norm)
            self.predictor = nn.Identity()
            self.proj_dim = d
        else:
            self.projector = Projector(d, proj_dim, norm)
            self.predictor = Predictor(proj_dim, norm)
            self.proj_dim = proj_dim

    @property
    def representation_dim(self) -> int:
        return self.encoder.out_dim

    def forward_views(self, x1, x2):
        h1 = self.encoder(x1)
        h2 = self.encoder(x2)
        if self.head_spec.direct:
            return self.projector(h1), self.projector(h2), h1, h2
        z1 = self.projector(h1)
        z2 = self.projector(h2)
        return self.predictor(z1), self.predictor(z2), z1, z2

    def forward(self, x1, x2):
        return self.forward_views(x1, x2)

    def represent(self, x):
        """Encoder output h for a batch; used for retrieval and saliency."""
        return self.encoder(x)


def views_to_tensor(views, dtype=torch.float32) -> torch.Tensor:
    """Stack (H, W, 3) float views into an (N, 3, H, W) tensor."""
    arr = np.stack([np.transpose(v, (2, 0, 1)) for v in views])
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def extract_h(model: SiameseModel, image: np.ndarray) -> np.ndarray:
    """Representation of one (H, W, 3) image in inference mode.

    Raises:
        ValueError: image is not 3-channel.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    return extract_h_batch(model, [image])[0]


def extract_h_batch(model: SiameseModel, images, batch_size: int = 64) -> np.ndarray:
    """Representations for a sequence of (H, W, 3) images, row per image."""
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = views_to_tensor(images[start : start + batch_size])
            chunks.append(model.represent(batch).numpy().astype(np.float32))
    if was_training:
        model.train()
    return np.concatenate(chunks, axis=0)
