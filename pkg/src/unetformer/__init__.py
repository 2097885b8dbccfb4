"""Efficient semantic segmentation with a global-local window transformer.

A self-contained NumPy implementation: reverse-mode autodiff tensor core,
windowed attention blocks, a ResNet-style encoder with a transformer
decoder, the composite training objective, data tooling, and a CLI.
"""

from .attention import (GLTB, AttentionConfig, CrossWindowInteraction,
                        GlobalLocalAttention, LocalBranch, WindowMHSA,
                        window_partition, window_reverse)
from .checkpoint import (LoadReport, load_checkpoint, load_encoder_weights,
                         load_model, save_checkpoint)
from .config import (DataConfig, OptimizerConfig, RunConfig, ScheduleConfig,
                     load_run_config, run_config_from_dict)
from .errors import (CheckpointError, ConfigError, DataError, GraphError,
                     NumericError, ShapeError, UnetformerError, UsageError)
from .losses import (LossConfig, LossReport, cross_entropy, dice_loss,
                     total_loss)
from .metrics import ConfusionMatrix, accumulate_confusion, compute_metrics
from .network import (ModelConfig, UNetFormer, build_model, count_params,
                      estimate_macs, estimate_macs_table, measure_macs,
                      params_table)
from .nn import Module, Parameter, init_model
from .optim import AdamW, cosine_lr
from .tensor import Tensor, backward, no_grad
from .trainer import evaluate, predict_logits, train

__version__ = "1.0.0"

__all__ = [
    "AdamW", "AttentionConfig", "CheckpointError", "ConfigError",
    "ConfusionMatrix", "CrossWindowInteraction", "DataConfig", "DataError",
    "GLTB", "GlobalLocalAttention", "GraphError", "LoadReport", "LocalBranch",
    "LossConfig", "LossReport", "ModelConfig", "Module", "NumericError",
    "OptimizerConfig", "Parameter", "RunConfig", "ScheduleConfig",
    "ShapeError", "Tensor", "UNetFormer", "UnetformerError", "UsageError",
    "WindowMHSA", "accumulate_confusion", "backward", "build_model",
    "compute_metrics", "cosine_lr", "count_params", "cross_entropy",
    "dice_loss", "estimate_macs", "estimate_macs_table", "evaluate",
    "init_model", "load_checkpoint", "load_encoder_weights", "load_model",
    "load_run_config", "measure_macs", "no_grad", "params_table",
    "predict_logits", "run_config_from_dict", "save_checkpoint",
    "total_loss", "train", "window_partition", "window_reverse",
]
