"""Optical flow by global matching over a 4D cost volume, refined with a
convolutional GRU.  Pure numpy, with a built-in reverse-mode tensor engine."""

__version__ = "0.1.0"

from .fields import EIGHTH, FULL, FlowField
from .pipeline import ModelConfig, ModelParams, PipelineOutput, bind_model, forward, init_model

__all__ = [
    "EIGHTH",
    "FULL",
    "FlowField",
    "ModelConfig",
    "ModelParams",
    "PipelineOutput",
    "bind_model",
    "forward",
    "init_model",
    "__version__",
]
