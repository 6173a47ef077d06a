"""Factorized bilinear layers with DropFactor, oracles and a small training stack."""

from .fb_conv import FbConvLayer, fb_conv_backward, fb_conv_forward
from .fb_dense import (
    DropFactorMask,
    FbGradients,
    FbLayerParams,
    fb_backward,
    fb_forward,
    inference_mask,
    init_params,
    param_count,
    sample_mask,
)
from .tensor import ConvGeometry, col2im, im2col, matmul

__version__ = "0.1.0"
