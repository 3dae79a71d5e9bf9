"""Compositional meta-RL with per-DoV task encoders and EMA label targets.

Tasks are combinations of labels along named degrees of variation (DoVs).
One encoder per DoV infers a Gaussian block of the task embedding; blocks
are pulled toward moving-average targets kept per label, which lets the
policy be conditioned zero-shot on embeddings composed from those targets.
"""
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .agent import Agent, load_checkpoint, save_checkpoint
from .trainer import run
from .zeroshot import EvalReport, MissingLabelError, UnsupportedCompositionError, evaluate_method

__all__ = ["Agent", "ConfigError", "EvalReport", "ExperimentConfig", "MissingLabelError",
           "UnsupportedCompositionError", "evaluate_method", "load_checkpoint", "load_config", "run",
           "save_checkpoint", "save_config"]

__version__ = "0.1.0"
