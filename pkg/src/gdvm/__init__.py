"""Classifiers with a Gaussian latent layer, trained end to end on a small numpy autodiff engine."""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    FormatError,
    GdvmError,
    NumericAbort,
)
from .model import (
    BASELINE,
    GDVM,
    GSNN,
    Architecture,
    GdvmModel,
    ModelVariant,
    TrainConfig,
    load_checkpoint,
    predict_deterministic,
    predict_mc,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BASELINE", "GDVM", "GSNN", "Architecture", "GdvmModel", "ModelVariant", "TrainConfig",
    "load_checkpoint", "predict_deterministic", "predict_mc", "save_checkpoint", "train",
    "CheckpointError", "ConfigError", "ContractError", "DataError", "DimensionError", "DomainError",
    "FormatError", "GdvmError", "NumericAbort",
]
