"""Reparameterisable RepViT backbone, sparse masked pretraining, box losses and detection metrics."""

from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
