"""Imbalance-robust training of a small detection head for AI-generated faces
on pre-extracted feature vectors."""

from .augment import AugmentConfig, NoiseDraw, augment_bank, draw_noise
from .bank import (
    BankFormatError,
    ClassCounts,
    FeatureBank,
    Sample,
    class_counts,
    generate_synthetic,
    load_bank,
    save_bank,
    split_bank,
)
from .estimator import ImbalanceRobustClassifier
from .losses import (
    AucConfig,
    AucUndefinedError,
    CvarConfig,
    LossBreakdown,
    VsParams,
    auc_indicator_loss,
    auc_surrogate_loss,
    ce_loss,
    cvar_loss,
    cvar_quantile_oracle,
    cvar_solve_lambda,
    default_omegas,
    total_loss,
    vs_loss,
)
from .metrics import (
    EvalReport,
    RocPoint,
    auc_score,
    classification_report,
    eer,
    format_report,
    parse_report,
    parse_roc_csv,
    roc_area,
    roc_curve,
    roc_to_csv,
)
from .mlp import (
    CheckpointFormatError,
    ForwardCache,
    MlpParams,
    MlpSpec,
    backward,
    forward,
    hidden_dims_for_depth,
    init_params,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
)
from .optim import (
    AdamWConfig,
    AdamWState,
    CosineSchedule,
    NumericError,
    SamConfig,
    adamw_step,
    lr_at,
    sam_perturbation,
    sam_update,
)
from .trainer import (
    TrainConfig,
    TrainOutcome,
    TrainRecord,
    ablate_depth,
    ablate_gamma,
    ablation_to_csv,
    evaluate,
    format_train_log,
    parse_ablation_csv,
    parse_train_log,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamWConfig",
    "AdamWState",
    "AucConfig",
    "AucUndefinedError",
    "AugmentConfig",
    "BankFormatError",
    "CheckpointFormatError",
    "ClassCounts",
    "CosineSchedule",
    "CvarConfig",
    "EvalReport",
    "FeatureBank",
    "ForwardCache",
    "ImbalanceRobustClassifier",
    "LossBreakdown",
    "MlpParams",
    "MlpSpec",
    "NoiseDraw",
    "NumericError",
    "RocPoint",
    "Sample",
    "SamConfig",
    "TrainConfig",
    "TrainOutcome",
    "TrainRecord",
    "VsParams",
    "ablate_depth",
    "ablate_gamma",
    "ablation_to_csv",
    "adamw_step",
    "auc_indicator_loss",
    "auc_score",
    "auc_surrogate_loss",
    "augment_bank",
    "backward",
    "ce_loss",
    "class_counts",
    "classification_report",
    "cvar_loss",
    "cvar_quantile_oracle",
    "cvar_solve_lambda",
    "default_omegas",
    "draw_noise",
    "eer",
    "evaluate",
    "format_report",
    "format_train_log",
    "parse_ablation_csv",
    "forward",
    "generate_synthetic",
    "hidden_dims_for_depth",
    "init_params",
    "load_bank",
    "load_checkpoint",
    "lr_at",
    "parse_report",
    "parse_roc_csv",
    "parse_train_log",
    "predict_logits",
    "roc_area",
    "roc_curve",
    "roc_to_csv",
    "sam_perturbation",
    "sam_update",
    "save_bank",
    "save_checkpoint",
    "split_bank",
    "total_loss",
    "train",
    "vs_loss",
]
