from .checkpoint import load_checkpoint, save_checkpoint, spec_from_dict, spec_to_dict
from .model import (
    Model,
    linear_only_model,
    ModelSpec,
    NumericError,
    SpecError,
    StageSpec,
    SPEC_PRESETS,
    build_model,
    count_layers,
    count_params,
    desk_spec,
    paper_spec,
    predict,
    receptive_field,
    tiny_spec,
)
from .train import AdamW, TrainConfig, TrainResult, grad_check, loss_curve_rows, train_model

__all__ = [
    "AdamW",
    "Model",
    "ModelSpec",
    "NumericError",
    "SpecError",
    "StageSpec",
    "SPEC_PRESETS",
    "TrainConfig",
    "TrainResult",
    "build_model",
    "count_layers",
    "count_params",
    "desk_spec",
    "grad_check",
    "linear_only_model",
    "load_checkpoint",
    "loss_curve_rows",
    "paper_spec",
    "predict",
    "receptive_field",
    "save_checkpoint",
    "spec_from_dict",
    "spec_to_dict",
    "tiny_spec",
    "train_model",
]
