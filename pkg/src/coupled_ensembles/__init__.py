"""Coupled ensembles of convolutional basic blocks on a small numpy autodiff engine."""

from .blocks import BasicBlockSpec, build_basic_block, count_params, densenet_layout
from .ensemble import (
    CoupledEnsemble,
    CoupledEnsembleConfig,
    fuse_models,
    fuse_predict,
    fuse_train,
    pack_params,
    split_params,
)
from .harness import RunLog, TrainConfig, final_error, train
from .params import ParamVector, sgd_step
from .stats import summarize
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
