"""Composite set detection of (subject, predicate, object) relations with part and sum queries."""
from .attention import AttentionConfig, ConfigError
from .data import DataError, Entity, Relation, RelationInstance, Scene, Vocab, pad_targets
from .decoder import DecoderConfig, TABLE_ROWS, VARIANTS
from .geometry import Box
from .loss import LossReport, LossWeights, set_loss
from .matching import brute_force_assignment, hungarian, match, matching_cost
from .model import ModelConfig, PSTModel
from .prediction import CompositePrediction
from .scenes import SceneGenConfig, generate_dataset, load_dataset, render_tokens, save_dataset
from .train import DivergenceError, TrainConfig, train

__all__ = [
    "AttentionConfig", "Box", "CompositePrediction", "ConfigError", "DataError", "DecoderConfig",
    "DivergenceError", "Entity", "LossReport", "LossWeights", "ModelConfig", "PSTModel", "Relation",
    "RelationInstance", "Scene", "SceneGenConfig", "TABLE_ROWS", "TrainConfig", "VARIANTS", "Vocab",
    "brute_force_assignment", "generate_dataset", "hungarian", "load_dataset", "match", "matching_cost",
    "pad_targets", "render_tokens", "save_dataset", "set_loss", "train",
]
