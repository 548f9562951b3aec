"""Unpaired bimodal segmentation with a shared attention backbone and
removable external attention modules."""

from .tensor import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward"]
__version__ = "0.1.0"
