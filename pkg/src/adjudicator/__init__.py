"""Preference reward modeling over token-embedding sequences.

The model refines token states through a gated stack of transformer
blocks, pools them from several perspectives (final response token,
response mean, learned attention), scores each perspective, and routes
among the scores with a prompt-conditioned mixture. Training uses a
focal-reweighted Bradley-Terry objective with an entropy floor on the
routing weights. Everything runs on a small tape-based autodiff engine
over numpy float64, deterministic for a fixed seed.
"""

from .tensor import (
    DomainError,
    GradCheckReport,
    ShapeError,
    Tape,
    Tensor,
    UsageError,
    finite_diff_check,
)
from .nn import ConfigError, wants_decay
from .refine import RefinementStack, SequenceError, TokenSequence, TransformerBlock
from .aggregate import (
    ModelConfig,
    RewardModel,
    RewardOutput,
    ROUTE_MODES,
    SINGLE_VIEW_MODES,
    VIEW_NAMES,
    reward,
)
from .objective import LossConfig, PairLossBreakdown, pair_loss
from .data import (
    EmbeddingStore,
    ManifestError,
    PreferencePair,
    REGIMES,
    ResolvedPair,
    StoreFormatError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_pairs,
    save_dataset,
)
from .training import (
    CheckpointError,
    NumericError,
    OptimizerState,
    TrainConfig,
    TrainResult,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .evaluate import (
    AccuracyReport,
    AlignmentReport,
    EvalReport,
    RoutingProfile,
    ablation_eval,
    alignment_score,
    pairwise_accuracy,
    routing_profile,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "UsageError",
    "ConfigError",
    "SequenceError",
    "ManifestError",
    "StoreFormatError",
    "CheckpointError",
    "NumericError",
    "GradCheckReport",
    "finite_diff_check",
    "wants_decay",
    "TokenSequence",
    "TransformerBlock",
    "RefinementStack",
    "ModelConfig",
    "RewardModel",
    "RewardOutput",
    "ROUTE_MODES",
    "SINGLE_VIEW_MODES",
    "VIEW_NAMES",
    "reward",
    "LossConfig",
    "PairLossBreakdown",
    "pair_loss",
    "REGIMES",
    "EmbeddingStore",
    "PreferencePair",
    "ResolvedPair",
    "SyntheticSpec",
    "generate_synthetic",
    "load_pairs",
    "load_dataset",
    "save_dataset",
    "TrainConfig",
    "TrainResult",
    "OptimizerState",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "AccuracyReport",
    "RoutingProfile",
    "AlignmentReport",
    "EvalReport",
    "pairwise_accuracy",
    "routing_profile",
    "alignment_score",
    "ablation_eval",
]
