from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .losses import neg_cosine, simsiam_loss
from .models import (
    ENCODER_KINDS,
    EncoderSpec,
    HeadSpec,
    Predictor,
    Projector,
    SiameseModel,
    TinyConvEncoder,
    build_encoder,
    extract_h,
    extract_h_batch,
    views_to_tensor,
)
from .train import (
    COLLAPSE_PATIENCE,
    COLLAPSE_STD_THRESHOLD,
    StepStats,
    TrainConfig,
    TrainResult,
    make_optimizer,
    train,
    train_step,
)

__all__ = [
    "CheckpointBundle",
    "load_checkpoint",
    "save_checkpoint",
    "neg_cosine",
    "simsiam_loss",
    "ENCODER_KINDS",
    "EncoderSpec",
    "HeadSpec",
    "Predictor",
    "Projector",
    "SiameseModel",
    "TinyConvEncoder",
    "build_encoder",
    "extract_h",
    "extract_h_batch",
    "views_to_tensor",
    "COLLAPSE_PATIENCE",
    "COLLAPSE_STD_THRESHOLD",
    "StepStats",
    "TrainConfig",
    "TrainResult",
    "make_optimizer",
    "train",
    "train_step",
]
