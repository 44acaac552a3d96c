from .model import (
    PRESETS,
    ArchDescriptor,
    ModelParams,
    desk_arch,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    predict_class,
    predictive_entropy,
    save_checkpoint,
    table1_arch,
)
from .train import TrainConfig, lr_at, train

__all__ = [
    "PRESETS", "ArchDescriptor", "ModelParams", "TrainConfig", "desk_arch", "forward", "init_params",
    "load_checkpoint", "loss_and_grad", "lr_at", "predict_class", "predictive_entropy",
    "save_checkpoint", "table1_arch", "train",
]
