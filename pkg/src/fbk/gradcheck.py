"""Finite-difference checks of the FB layer backward passes."""

from __future__ import annotations

import itertools

import numpy as np

from . import fb_conv, fb_dense
from .fb_dense import TRAIN, FbLayerParams, inference_mask, init_params, sample_mask
from .oracles import finite_diff_grad
from .tensor import ConvGeometry

# entries whose magnitude is below this are compared on an absolute scale
REL_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _mask(k: int, p: float, mode: str, rng):
    if mode == TRAIN:
        mask = sample_mask(k, p, rng)
        if k and not mask.m.any():
            mask.m[0] = 1.0  # keep at least one factor live so d_F is exercised
        return mask
    return inference_mask(k, p)


def _worst(name, analytic, numeric):
    err = rel_error(analytic, numeric)
    idx = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    return {"tensor": name, "max_rel_err": float(err.max(initial=0.0)), "worst_index": [int(i) for i in idx],
            "analytic": float(analytic[idx]) if err.size else 0.0,
            "numeric": float(numeric[idx]) if err.size else 0.0}


def check_dense(k: int, mode: str, seed: int = 0, n: int = 6, c: int = 3, batch: int = 2,
                p: float = 0.7, h: float = 1e-5) -> dict:
    rng = np.random.default_rng(seed)
    params = init_params(c, n, k, rng, factor_std=0.5 if k else None)
    mask = _mask(k, p, mode, rng)
    x = rng.standard_normal((batch, n))
    r = rng.standard_normal((batch, c))

    y, cache = fb_dense.fb_forward(x, params, mask)
    grads = fb_dense.fb_backward(r, cache, params, mask)

    def loss_with(**over):
        pr = FbLayerParams(over.get("b", params.b), over.get("W", params.W), over.get("F", params.F))
        return float(np.sum(r * fb_dense.fb_forward(over.get("x", x), pr, mask)[0]))

    checks = [
        _worst("b", grads.d_b, finite_diff_grad(lambda v: loss_with(b=v), params.b, h)),
        _worst("W", grads.d_W, finite_diff_grad(lambda v: loss_with(W=v), params.W, h)),
        _worst("F", grads.d_F, finite_diff_grad(lambda v: loss_with(F=v), params.F, h)),
        _worst("x", grads.d_x, finite_diff_grad(lambda v: loss_with(x=v), x, h)),
    ]
    return {"layer": "fb-dense", "k": k, "mode": mode, "seed": seed, "checks": checks,
            "max_rel_err": max(ch["max_rel_err"] for ch in checks)}


def check_conv(k: int, mode: str, kernel: int = 3, seed: int = 0, channels: int = 2, size: int = 5,
               out_channels: int = 2, batch: int = 2, p: float = 0.7, h: float = 1e-5) -> dict:
    rng = np.random.default_rng(seed)
    g = ConvGeometry(channels, out_channels, kernel, kernel, stride=1, pad=kernel // 2)
    params = init_params(out_channels, g.patch_size, k, rng, factor_std=0.5 if k else None)
    layer = fb_conv.FbConvLayer(g, params, p)
    mask = _mask(k, p, mode, rng)
    x = rng.standard_normal((batch, channels, size, size))
    y, cache = fb_conv.fb_conv_forward(x, layer, mask)
    r = rng.standard_normal(y.shape)
    grads, d_x = fb_conv.fb_conv_backward(r, cache, layer, mask)

    def loss_with(**over):
        pr = FbLayerParams(over.get("b", params.b), over.get("W", params.W), over.get("F", params.F))
        out, _ = fb_conv.fb_conv_forward(over.get("x", x), fb_conv.FbConvLayer(g, pr, p), mask)
        return float(np.sum(r * out))

    checks = [
        _worst("b", grads.d_b, finite_diff_grad(lambda v: loss_with(b=v), params.b, h)),
        _worst("W", grads.d_W, finite_diff_grad(lambda v: loss_with(W=v), params.W, h)),
        _worst("F", grads.d_F, finite_diff_grad(lambda v: loss_with(F=v), params.F, h)),
        _worst("x", d_x, finite_diff_grad(lambda v: loss_with(x=v), x, h)),
    ]
    return {"layer": "fb-conv", "k": k, "mode": mode, "kernel": kernel, "seed": seed, "checks": checks,
            "max_rel_err": max(ch["max_rel_err"] for ch in checks)}


def run_grid(ks=(0, 1, 5, 20), kernels=(1, 3), modes=("train", "infer"), seed: int = 0) -> list[dict]:
    results = []
    for i, (k, mode) in enumerate(itertools.product(ks, modes)):
        results.append(check_dense(k, mode, seed=seed + i))
        for kernel in kernels:
            results.append(check_conv(k, mode, kernel=kernel, seed=seed + i))
    return results
