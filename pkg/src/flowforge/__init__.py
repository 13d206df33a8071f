"""Occlusion-aware unsupervised optical flow, end to end at desk scale."""

from flowforge.tensor import Tape, Tensor

__all__ = ["Tape", "Tensor"]
__version__ = "0.1.0"
