"""Desk-scale sparse-voxel network, differentiation core and optimizers."""
from .autodiff import Tensor
from .checkpoint import (decode_checkpoint, encode_checkpoint, infer_config, load_checkpoint,
                         model_from_state, save_checkpoint)
from .gradcheck import check_gradients
from .model import CLS_HEAD, PRE_HEAD, SEG_HEAD, NetConfig, SparseUNet
from .optim import SGD, Adam, adam_step, make_optimizer, poly_lr, sgd_momentum_step

__all__ = [
    "Tensor", "NetConfig", "SparseUNet", "SEG_HEAD", "CLS_HEAD", "PRE_HEAD",
    "SGD", "Adam", "sgd_momentum_step", "adam_step", "make_optimizer", "poly_lr",
    "check_gradients", "encode_checkpoint", "decode_checkpoint", "save_checkpoint",
    "load_checkpoint", "infer_config", "model_from_state",
]
