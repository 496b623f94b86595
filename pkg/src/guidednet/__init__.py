"""Semi-supervised multi-organ segmentation on synthetic phantoms.

Two tiny 3D U-Nets supervise each other with pseudo-labels.  A
class-conditional Gaussian mixture fitted on labelled-voxel features
rectifies those pseudo-labels, and per-class weights derived from how well
each class is already learned rebalance the cross supervision.
"""
from .cgmm import GmmState, PosteriorMap, posterior, update_statistics
from .ktcps import ClassWeightState, class_weights, loss_ktcps
from .tensor import backend
from .trainer import LossReport, TrainConfig, init_state, load_checkpoint, save_checkpoint, train_loop, train_step
from .unet import UNetConfig, build

__version__ = "0.1.0"

__all__ = [
    "ClassWeightState",
    "GmmState",
    "LossReport",
    "PosteriorMap",
    "TrainConfig",
    "UNetConfig",
    "backend",
    "build",
    "class_weights",
    "init_state",
    "load_checkpoint",
    "loss_ktcps",
    "posterior",
    "save_checkpoint",
    "train_loop",
    "train_step",
    "update_statistics",
]
