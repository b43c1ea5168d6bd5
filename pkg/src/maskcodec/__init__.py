"""Desk-scale learned image codec with cube and channel mask sampling modules.

The package is a numpy library first: tensors with reverse-mode autodiff
(`tensor`, `gradcheck`), transforms (`layers`), mask sampling and the
channel gate (`masking`), discretized likelihoods (`entropy`), a bit-exact
range coder (`rangecoder`), the assembled codec (`model`, `train`, `codec`),
and evaluation metrics (`metrics`).  `cli` adds the `maskcodec` command.
"""

from .codec import decode_image, encode_image
from .errors import (ConfigError, DataError, MaskCodecError, NumericsError,
                     ShapeError)
from .gradcheck import grad_check
from .masking import ChannelGate, MaskSpec, apply_mask, cube_mask, lccm_complete, lcmm_select
from .model import CodecConfig, ModelState, init_model, load_checkpoint, save_checkpoint
from .tensor import Graph, Tensor, backward
from .train import TrainConfig, train_stage

__all__ = [
    "ChannelGate", "CodecConfig", "ConfigError", "DataError", "Graph",
    "MaskCodecError", "MaskSpec", "ModelState", "NumericsError", "ShapeError",
    "Tensor", "TrainConfig", "apply_mask", "backward", "cube_mask",
    "decode_image", "encode_image", "grad_check", "init_model",
    "lccm_complete", "lcmm_select", "load_checkpoint", "save_checkpoint",
    "train_stage",
]

__version__ = "0.1.0"
