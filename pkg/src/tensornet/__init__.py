from .layers import BatchNorm, Concat, Conv2d, Layer, MaxPool2, ReLU, Sigmoid, UpsampleNearest2
from .losses import DiceFocal, dbl_loss, dice_focal_loss, pair_labels, pairwise_sq_distances
from .network import LayerSpec, Network, NetworkSpec
from .optim import AdamState, PlateauSchedule, adam_step

__all__ = [
    "AdamState",
    "BatchNorm",
    "Concat",
    "Conv2d",
    "DiceFocal",
    "Layer",
    "LayerSpec",
    "MaxPool2",
    "Network",
    "NetworkSpec",
    "PlateauSchedule",
    "ReLU",
    "Sigmoid",
    "UpsampleNearest2",
    "adam_step",
    "dbl_loss",
    "dice_focal_loss",
    "pair_labels",
    "pairwise_sq_distances",
]
