"""Loss-landscape toolkit for deep linear networks under squared loss."""

from .linalg import DEFAULT_TOLERANCES, ToleranceConfig
from .model import DatasetPair, NetworkShape, WeightStack, forward, loss

__all__ = [
    "DEFAULT_TOLERANCES",
    "DatasetPair",
    "NetworkShape",
    "ToleranceConfig",
    "WeightStack",
    "forward",
    "loss",
]
