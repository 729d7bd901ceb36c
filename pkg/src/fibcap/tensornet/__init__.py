from .layers import (
    BilinearUpsample,
    Conv2d,
    GroupNorm,
    NumericalError,
    ReLU,
    ResBlock,
    Sigmoid,
    SpatialDropout,
)
from .segresnet import ModelSpec, SegModel, build_segresnet
from .weights import LoadReport, ShapeMismatchError, WeightsFormatError, load_weights, save_weights

__all__ = [
    "BilinearUpsample",
    "Conv2d",
    "GroupNorm",
    "LoadReport",
    "ModelSpec",
    "NumericalError",
    "ReLU",
    "ResBlock",
    "SegModel",
    "ShapeMismatchError",
    "Sigmoid",
    "SpatialDropout",
    "WeightsFormatError",
    "build_segresnet",
    "load_weights",
    "save_weights",
]
