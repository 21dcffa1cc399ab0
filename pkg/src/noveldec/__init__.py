"""One-class novelty detection with a jointly trained decoder-encoder."""

__version__ = "0.1.0"

from .estimator import DecoderEncoderDetector, check_images  # noqa: E402
from .exceptions import ConfigError, DataError, IngestionError, NovelDecError, NumericError, ShapeError  # noqa: E402
from .trainer import ABLATIONS, TrainConfig, apply_ablation, load_checkpoint, train  # noqa: E402

__all__ = [
    "ABLATIONS",
    "ConfigError",
    "DataError",
    "DecoderEncoderDetector",
    "IngestionError",
    "NovelDecError",
    "NumericError",
    "ShapeError",
    "TrainConfig",
    "apply_ablation",
    "check_images",
    "load_checkpoint",
    "train",
]
