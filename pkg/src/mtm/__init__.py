"""Masked-token pretraining then MAML meta-learning for few-shot text classification."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
