"""Event-aware video grounding: dynamic moment queries from slot-attention event
reasoning, gated sentence fusion, and Hungarian-matched span losses."""

from .geometry import MomentSpan, generalized_temporal_iou, sinusoidal_encode, span_to_interval
from .model import GroundingModel, ModelConfig, build_model

__version__ = "0.1.0"

__all__ = [
    "MomentSpan",
    "generalized_temporal_iou",
    "sinusoidal_encode",
    "span_to_interval",
    "GroundingModel",
    "ModelConfig",
    "build_model",
]
