"""Joint neural modeling of conversation topics and discourse roles."""

from .corpus import (
    BowDataset,
    ConversationInstance,
    ConversationTree,
    CorpusError,
    RawPost,
    Vocabulary,
    build_trees,
    build_vocabulary,
    flatten_to_paths,
    normalize_tokens,
    split_dataset,
    vectorize,
)
from .model import ModelConfig, TopicDiscourseModel
from .objectives import LossBreakdown, NonFiniteLossError, total_loss
from .trainer import TrainConfig, TrainHistory, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BowDataset",
    "ConversationInstance",
    "ConversationTree",
    "CorpusError",
    "LossBreakdown",
    "ModelConfig",
    "NonFiniteLossError",
    "RawPost",
    "TopicDiscourseModel",
    "TrainConfig",
    "TrainHistory",
    "Vocabulary",
    "build_trees",
    "build_vocabulary",
    "flatten_to_paths",
    "load_checkpoint",
    "normalize_tokens",
    "save_checkpoint",
    "split_dataset",
    "total_loss",
    "train",
    "vectorize",
]
