from .checkpoint import load_checkpoint, save_checkpoint
from .layers import Conv2d, Encoder, EncoderConfig, Linear, Module, ParamGroup
from .optim import (
    OptState,
    accumulate_gradients,
    adam_state,
    adam_step,
    lars_state,
    lars_step,
    step,
    trust_ratio,
)
from .tensor import Tensor, no_grad

__all__ = [
    "Conv2d",
    "Encoder",
    "EncoderConfig",
    "Linear",
    "Module",
    "OptState",
    "ParamGroup",
    "Tensor",
    "accumulate_gradients",
    "adam_state",
    "adam_step",
    "lars_state",
    "lars_step",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "step",
    "trust_ratio",
]
