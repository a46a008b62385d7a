"""Confidence-gated interactive policy learning on a simulated highway."""

__version__ = "0.1.0"

from .domain import Action, DemoSource, FeatureScaler, StateVector, TrainingPoint

__all__ = [
    "Action",
    "DemoSource",
    "FeatureScaler",
    "StateVector",
    "TrainingPoint",
    "__version__",
]
