"""Self-supervised pre-training: encoder, Barlow Twins loss and training loop."""

from .barlow import DEFAULT_LAMBDA, barlow_backward, barlow_loss, cross_correlation
from .encoder import Encoder, EncoderConfig, clip_by_global_norm, sgd_step, to_input
from .pretrain import NumericalError, PairSource, PretrainResult, TrainConfig, learning_rate, pretrain

__all__ = [
    "DEFAULT_LAMBDA",
    "Encoder",
    "EncoderConfig",
    "NumericalError",
    "PairSource",
    "PretrainResult",
    "TrainConfig",
    "barlow_backward",
    "barlow_loss",
    "clip_by_global_norm",
    "cross_correlation",
    "learning_rate",
    "pretrain",
    "sgd_step",
    "to_input",
]
