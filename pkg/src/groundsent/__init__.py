"""Visually grounded self-attentive sentence representations.

A bidirectional LSTM encoder with multi-head self-attention produces a
fixed-width sentence vector that is trained to predict a target caption,
an associated image-feature vector, or both.
"""

__version__ = "0.1.0"

from .autodiff import Matrix, Tape, ShapeError, grad_check

__all__ = ["Matrix", "Tape", "ShapeError", "grad_check", "__version__"]
