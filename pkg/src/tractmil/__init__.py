"""Gated-attention multiple-instance learning for census-tract food-insecurity
classification from bags of street-view image embeddings."""

__version__ = "0.1.0"

from .bags import InstanceEmbedding, TractBag
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    FormatError,
    GeometryError,
    NumericError,
    ShapeError,
    TractMILError,
)
from .estimator import GatedAttentionMIL, as_bags
from .fusion import IncomeStats, attach_fusion, fit_income_stats, fused_logit
from .geodata import (
    SplitPlan,
    TractBoundary,
    assign_to_tracts,
    build_bags,
    holdout_city_split,
    load_atlas,
    load_boundaries,
    load_embeddings,
    load_income,
    load_split,
    save_split,
    stratified_split,
)
from .metrics import (
    AttentionRecord,
    EvalReport,
    dump_attention,
    emit_prediction_map,
    evaluate,
    write_attention_csv,
)
from .milcore import (
    ForwardResult,
    GatedAttentionModel,
    GradientSet,
    LossConfig,
    attention_scores,
    backward,
    forward,
    loss,
    pool_bag,
    predict_logit,
    sigmoid,
)
from .synth import SynthConfig, SynthDataset, generate, is_witness, write_dataset
from .trainer import (
    AdamState,
    EpochRecord,
    TrainConfig,
    TrainResult,
    adam_step,
    compute_pos_weight,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [
    "__version__",
    "InstanceEmbedding",
    "TractBag",
    "TractMILError",
    "ShapeError",
    "NumericError",
    "FormatError",
    "ConfigError",
    "GeometryError",
    "DataError",
    "CheckpointError",
    "GatedAttentionMIL",
    "as_bags",
    "IncomeStats",
    "fit_income_stats",
    "attach_fusion",
    "fused_logit",
    "SplitPlan",
    "TractBoundary",
    "assign_to_tracts",
    "build_bags",
    "holdout_city_split",
    "load_atlas",
    "load_boundaries",
    "load_embeddings",
    "load_income",
    "load_split",
    "save_split",
    "stratified_split",
    "AttentionRecord",
    "EvalReport",
    "dump_attention",
    "emit_prediction_map",
    "evaluate",
    "write_attention_csv",
    "ForwardResult",
    "GatedAttentionModel",
    "GradientSet",
    "LossConfig",
    "attention_scores",
    "backward",
    "forward",
    "loss",
    "pool_bag",
    "predict_logit",
    "sigmoid",
    "SynthConfig",
    "SynthDataset",
    "generate",
    "is_witness",
    "write_dataset",
    "AdamState",
    "EpochRecord",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "compute_pos_weight",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
