"""Federated learning simulator with distribution-controlled client selection."""

from dcfl.dataset import Dataset

__version__ = "0.1.0"

__all__ = ["Dataset", "__version__"]
