"""Iterative amortized variational inference with score-conditioned flows."""

from .numerics import Rng, SpdMatrix
from .flow import CouplingFlow, load_checkpoint, save_checkpoint
from .problems import LinearGaussianProblem, NonlinearToyProblem
from .pipeline import (
    FlowConfig,
    PosteriorEnsemble,
    TrainConfig,
    TrainedPipeline,
    infer,
    intermediate_trajectory,
    load_pipeline,
    save_pipeline,
    train_pipeline,
)
from .summary import FiducialDataset, advance_stage, build_stage0, load_dataset, save_dataset

__all__ = [
    "Rng",
    "SpdMatrix",
    "CouplingFlow",
    "load_checkpoint",
    "save_checkpoint",
    "LinearGaussianProblem",
    "NonlinearToyProblem",
    "FlowConfig",
    "TrainConfig",
    "TrainedPipeline",
    "PosteriorEnsemble",
    "train_pipeline",
    "infer",
    "intermediate_trajectory",
    "save_pipeline",
    "load_pipeline",
    "FiducialDataset",
    "build_stage0",
    "advance_stage",
    "save_dataset",
    "load_dataset",
]

__version__ = "0.1.0"
