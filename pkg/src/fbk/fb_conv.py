"""Factorized bilinear convolution via im2col.

Every receptive field is flattened into a patch row and pushed through the
dense FB transform. Padded positions enter the patch as zeros, so they also
take part in the quadratic term. A single DropFactor mask is shared by all
spatial locations of all samples in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .fb_dense import (
    DropFactorMask,
    FbCache,
    FbGradients,
    FbLayerParams,
    MacCounter,
    fb_backward,
    fb_forward,
)
from .tensor import ConvGeometry, col2im_batch, im2col_batch


@dataclass
class FbConvLayer:
    geometry: ConvGeometry
    params: FbLayerParams
    p: float = 1.0

    def __post_init__(self):
        g = self.geometry
        if self.params.n != g.patch_size or self.params.c != g.out_channels:
            raise DimensionError(
                f"params (c={self.params.c}, n={self.params.n}) do not fit geometry "
                f"(out_channels={g.out_channels}, patch size={g.patch_size})"
            )


def to_patch_rows(x: np.ndarray, g: ConvGeometry):
    """(N, C, H, W) -> patch rows (N*Ho*Wo, C*kh*kw) and the output extent."""
    cols = im2col_batch(x, g)
    n, size, locs = cols.shape
    ho, wo = g.output_hw(*x.shape[2:])
    return cols.transpose(0, 2, 1).reshape(n * locs, size), (ho, wo)


def from_patch_rows(rows: np.ndarray, n: int, hw: tuple[int, int]) -> np.ndarray:
    """(N*Ho*Wo, c) -> (N, c, Ho, Wo)."""
    ho, wo = hw
    return np.ascontiguousarray(rows.reshape(n, ho * wo, -1).transpose(0, 2, 1).reshape(n, -1, ho, wo))


def rows_from_output_grad(dy: np.ndarray) -> np.ndarray:
    """(N, c, Ho, Wo) -> (N*Ho*Wo, c), the inverse of :func:`from_patch_rows`."""
    n, c = dy.shape[:2]
    return dy.reshape(n, c, -1).transpose(0, 2, 1).reshape(-1, c)


def patch_grad_to_image(d_rows: np.ndarray, g: ConvGeometry, in_shape) -> np.ndarray:
    n, _, h, w = in_shape
    d_cols = d_rows.reshape(n, -1, g.patch_size).transpose(0, 2, 1)
    return col2im_batch(d_cols, g, h, w)


@dataclass
class FbConvCache:
    fb: FbCache
    in_shape: tuple
    out_hw: tuple


def fb_conv_forward(x: np.ndarray, layer: FbConvLayer, mask: DropFactorMask,
                    counter: MacCounter | None = None):
    """Returns ``(y, cache)`` with ``y`` of shape (N, out_channels, Ho, Wo)."""
    if x.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W) input, got shape {x.shape}")
    rows, hw = to_patch_rows(x, layer.geometry)
    y_rows, fb_cache = fb_forward(rows, layer.params, mask, counter)
    return from_patch_rows(y_rows, x.shape[0], hw), FbConvCache(fb_cache, x.shape, hw)


def fb_conv_backward(dy: np.ndarray, cache: FbConvCache, layer: FbConvLayer,
                     mask: DropFactorMask):
    """Returns ``(grads, d_x)``.

    Parameter gradients are summed over the batch and all locations;
    ``grads.d_x`` is the patch-space gradient and ``d_x`` its col2im scatter
    back onto the (N, C, H, W) input.
    """
    expected = (cache.in_shape[0], layer.params.c, *cache.out_hw)
    if dy.shape != expected:
        raise ContractError(f"upstream gradient shape {dy.shape} does not match cache {expected}")
    grads: FbGradients = fb_backward(rows_from_output_grad(dy), cache.fb, layer.params, mask)
    return grads, patch_grad_to_image(grads.d_x, layer.geometry, cache.in_shape)
