"""Parametric 3D curve reconstruction from multi-view edge maps.

Curves are rendered through Gaussians whose placement, orientation and size
are derived from the curve, so image-space gradients reach the control points
directly.
"""

from .curves import CurveSet, ParametricCurve, load_curves, save_curves
from .evaluation import MetricsReport, evaluate_run
from .render import Camera, render
from .scene import load_dataset, make_scene
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "Camera", "CurveSet", "MetricsReport", "ParametricCurve", "TrainConfig", "Trainer",
    "evaluate_run", "load_curves", "load_dataset", "make_scene", "render", "save_curves", "train",
]
