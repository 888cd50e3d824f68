"""Experiment harness: configs, training runner, suite matrices and CLI."""

from .config import CorpusSpec, EvalSpec, ExperimentConfig, TrainSpec, config_hash
from .runner import build_corpus, evaluate_detector, run, train_teacher

__all__ = [
    "CorpusSpec",
    "EvalSpec",
    "ExperimentConfig",
    "TrainSpec",
    "config_hash",
    "build_corpus",
    "evaluate_detector",
    "run",
    "train_teacher",
]
