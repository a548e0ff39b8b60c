"""Reward-gated distillation with hint-assisted rollouts on a toy sequence task."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
