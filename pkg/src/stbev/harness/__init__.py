"""Synthetic scenes, toy metrics, and the experiment drivers behind the CLI."""

from .metrics import ToyMetrics, average_precision, evaluate
from .scenes import (CLASS_NAMES, LANDMARK, MOVER, FrameSample, GroundTruth, SceneConfig,
                     current_first, ego_pose, generate_sequence, load_sequence, make_sequences,
                     render_semantic, save_sequence, toy_grid)

__all__ = [
    "ToyMetrics", "average_precision", "evaluate", "CLASS_NAMES", "LANDMARK", "MOVER",
    "FrameSample", "GroundTruth", "SceneConfig", "current_first", "ego_pose", "generate_sequence",
    "load_sequence", "make_sequences", "render_semantic", "save_sequence", "toy_grid",
]
