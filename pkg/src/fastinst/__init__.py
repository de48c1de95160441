"""Desk-scale query-based instance segmentation."""
from .config import RunConfig
from .evaluate import Detection, evaluate, postprocess, predict
from .matching import MatchingAssignment, hungarian_match
from .model import FastInst, ModelConfig
from .scenes import DatasetSpec, SceneSample, generate_dataset, generate_scene

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec", "Detection", "FastInst", "MatchingAssignment", "ModelConfig", "RunConfig", "SceneSample",
    "evaluate", "generate_dataset", "generate_scene", "hungarian_match", "postprocess", "predict",
]
