"""Visual-textual rationale generation pipeline.

Conditioning a decoder-only language model on textual context plus
precomputed visual features (object detections, situation frames,
commonsense inferences) to generate free-text rationales, with the
matching automatic-metric and human-judgment tooling.
"""

from rationale_vt.estimator import RationaleGenerator
from rationale_vt.feature_store import (
    CommonsenseInferences,
    FeatureStore,
    FeatureWriter,
    LengthLimits,
    ObjectDetections,
    RationaleInstance,
    RegionDetection,
    SituationFrame,
    SituationRole,
    Task,
    VisualFeatureSet,
    compute_length_limits,
    load_instances,
)
from rationale_vt.fusion import VARIANTS, FusedSequence, build_sequence
from rationale_vt.model import (
    ModelConfig,
    TransformerLM,
    generate_greedy,
    load_checkpoint,
    save_checkpoint,
)
from rationale_vt.text_codec import SpecialTokenInventory, Vocabulary, train_bpe
from rationale_vt.trainer import TrainConfig, TrainResult, train

__all__ = [
    "CommonsenseInferences",
    "FeatureStore",
    "FeatureWriter",
    "FusedSequence",
    "LengthLimits",
    "ModelConfig",
    "ObjectDetections",
    "RationaleGenerator",
    "RationaleInstance",
    "RegionDetection",
    "SituationFrame",
    "SituationRole",
    "SpecialTokenInventory",
    "Task",
    "TrainConfig",
    "TrainResult",
    "TransformerLM",
    "VARIANTS",
    "VisualFeatureSet",
    "Vocabulary",
    "build_sequence",
    "compute_length_limits",
    "generate_greedy",
    "load_checkpoint",
    "load_instances",
    "save_checkpoint",
    "train",
    "train_bpe",
]

__version__ = "0.1.0"
