"""Temporal catheter and aorta segmentation for synthetic axial ultrasound."""

from .autograd import Tensor, backward, no_grad, precision
from .model import ModelConfig, TemporalSegmenter

__all__ = ["Tensor", "backward", "no_grad", "precision", "ModelConfig", "TemporalSegmenter"]
__version__ = "0.1.0"
