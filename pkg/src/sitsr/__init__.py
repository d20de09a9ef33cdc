"""Time-aware multi-image super-resolution for irregular satellite image time series."""

from .backbones import ModelSpec, build_model, super_resolve
from .core import Raster, SRSample, TimedSeries, Timestamp
from .datapipe import SynthConfig, synth_generate
from .encoding import EncodingConfig, absolute_encoding, relative_encoding
from .fusion import FusionConfig, LTAE2d
from .trainer import Checkpoint, TrainConfig, train

__all__ = [
    "Checkpoint", "EncodingConfig", "FusionConfig", "LTAE2d", "ModelSpec", "Raster", "SRSample",
    "SynthConfig", "TimedSeries", "Timestamp", "TrainConfig", "absolute_encoding", "build_model",
    "relative_encoding", "super_resolve", "synth_generate", "train",
]
