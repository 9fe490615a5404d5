"""Learned image compression built from spatial-shift blocks.

The package is pure numpy/scipy: a small reverse-mode autodiff engine, the
shift and attention blocks, a hyperprior codec with a real range coder,
rate-distortion training and complexity/BD-rate analysis.
"""

from .analysis import RdCurve, bd_rate, closed_form, count_model, eval_dataset
from .codec import Bitstream, BitstreamError, compress, decode_image, decompress, encode_image
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .shift import ShiftSpec, channel_shuffle, spatial_shift, ssb_flops, ssb_param_count
from .tensor import Parameter, Tape, Tensor, backward, count_macs
from .training import TrainConfig, rd_loss, train_loop

__version__ = "0.1.0"

__all__ = [
    "Bitstream", "BitstreamError", "Model", "ModelConfig", "Parameter", "RdCurve",
    "ShiftSpec", "Tape", "Tensor", "TrainConfig", "backward", "bd_rate", "channel_shuffle",
    "closed_form", "compress", "count_macs", "count_model", "decode_image", "decompress",
    "encode_image", "eval_dataset", "load_checkpoint", "rd_loss", "save_checkpoint",
    "spatial_shift", "ssb_flops", "ssb_param_count", "train_loop",
]
