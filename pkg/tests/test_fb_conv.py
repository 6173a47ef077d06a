import numpy as np
import numpy.testing as npt
import pytest

from fbk.errors import ContractError, DimensionError
from fbk.fb_conv import FbConvLayer, fb_conv_backward, fb_conv_forward
from fbk.fb_dense import FbLayerParams, fb_forward, inference_mask, init_params, sample_mask
from fbk.gradcheck import check_conv
from fbk.oracles import fb_equals_bilinear_construction, naive_fb
from fbk.tensor import ConvGeometry


def make_layer(rng, cin, cout, kernel, k, pad=0, stride=1, p=1.0, factor_std=0.6):
    g = ConvGeometry(cin, cout, kernel, kernel, stride=stride, pad=pad)
    return FbConvLayer(g, init_params(cout, g.patch_size, k, rng, factor_std=factor_std), p)


def sliding_oracle(x, layer):
    """Per-location patch extraction by plain slicing, then the literal double sum."""
    g = layer.geometry
    xp = np.pad(x, ((0, 0), (0, 0), (g.pad, g.pad), (g.pad, g.pad)))
    ho, wo = g.output_hw(*x.shape[2:])
    out = np.zeros((x.shape[0], g.out_channels, ho, wo))
    for s in range(x.shape[0]):
        for i in range(ho):
            for j in range(wo):
                r, c = i * g.stride, j * g.stride
                patch = xp[s, :, r:r + g.kernel_h, c:c + g.kernel_w].reshape(-1)
                out[s, :, i, j] = naive_fb(patch, layer.params, p=layer.p)
    return out


def test_single_pixel_one_by_one_is_dense(rng):
    layer = make_layer(rng, 4, 3, 1, 2)
    x = rng.standard_normal((2, 4, 1, 1))
    y, _ = fb_conv_forward(x, layer, inference_mask(2, 1.0))
    dense, _ = fb_forward(x.reshape(2, 4), layer.params, inference_mask(2, 1.0))
    npt.assert_allclose(y.reshape(2, 3), dense, atol=1e-14)


def test_zero_factors_match_plain_convolution(rng):
    g = ConvGeometry(2, 3, 3, 3, pad=1)
    params = FbLayerParams(rng.standard_normal(3), rng.standard_normal((3, 18)), np.zeros((3, 2, 18)))
    layer = FbConvLayer(g, params)
    x = rng.standard_normal((2, 2, 5, 4))
    y, _ = fb_conv_forward(x, layer, inference_mask(2))
    assert y.shape == (2, 3, 5, 4)
    npt.assert_allclose(y, sliding_oracle(x, layer), atol=1e-12)


@pytest.mark.parametrize("kernel,pad,stride", [(1, 0, 1), (3, 1, 1), (3, 0, 2), (2, 1, 2)])
def test_matches_sliding_oracle(rng, kernel, pad, stride):
    layer = make_layer(rng, 2, 2, kernel, 3, pad=pad, stride=stride, p=0.6)
    x = rng.standard_normal((2, 2, 6, 5))
    y, _ = fb_conv_forward(x, layer, inference_mask(3, 0.6))
    npt.assert_allclose(y, sliding_oracle(x, layer), atol=1e-10)


def test_average_pooled_one_by_one_is_bilinear_pooling(rng):
    features = rng.standard_normal((6, 4))
    report = fb_equals_bilinear_construction(
        rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2), features)
    assert report["max_abs_diff"] <= 1e-10
    assert report["max_abs_diff_unnormalized"] <= 1e-10


def test_one_by_one_equals_reshaped_dense(rng):
    layer = make_layer(rng, 3, 2, 1, 4)
    x = rng.standard_normal((2, 3, 4, 5))
    mask = sample_mask(4, 0.5, 11)
    y, _ = fb_conv_forward(x, layer, mask)
    rows = x.transpose(0, 2, 3, 1).reshape(-1, 3)
    dense, _ = fb_forward(rows, layer.params, mask)
    npt.assert_allclose(y, dense.reshape(2, 4, 5, 2).transpose(0, 3, 1, 2), atol=1e-13)


def test_zero_upstream_gives_zero_gradients(rng):
    layer = make_layer(rng, 2, 2, 3, 2, pad=1)
    mask = sample_mask(2, 0.5, 0)
    y, cache = fb_conv_forward(rng.standard_normal((1, 2, 4, 4)), layer, mask)
    grads, d_x = fb_conv_backward(np.zeros_like(y), cache, layer, mask)
    for arr in (grads.d_b, grads.d_W, grads.d_F, d_x):
        assert not arr.any()


def test_backward_checks_upstream_shape(rng):
    layer = make_layer(rng, 2, 2, 3, 2, pad=1)
    mask = inference_mask(2)
    y, cache = fb_conv_forward(rng.standard_normal((1, 2, 4, 4)), layer, mask)
    with pytest.raises(ContractError):
        fb_conv_backward(np.zeros((1, 2, 3, 4)), cache, layer, mask)


def test_geometry_mismatch_rejected(rng):
    with pytest.raises(DimensionError):
        FbConvLayer(ConvGeometry(2, 2, 3, 3), init_params(2, 8, 1, rng))
    layer = make_layer(rng, 2, 2, 1, 1)
    with pytest.raises(DimensionError):
        fb_conv_forward(np.zeros((2, 4, 4)), layer, inference_mask(1))


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_three_by_three_finite_differences(mode):
    res = check_conv(k=2, mode=mode, kernel=3, seed=5, channels=2, size=5, out_channels=2)
    assert res["max_rel_err"] <= 1e-5, res


def test_translation_equivariance(rng):
    layer = make_layer(rng, 2, 2, 3, 3)
    x = rng.standard_normal((1, 2, 8, 8))
    mask = inference_mask(3)
    y, _ = fb_conv_forward(x, layer, mask)
    shifted, _ = fb_conv_forward(x[:, :, 2:, 1:], layer, mask)
    npt.assert_allclose(shifted, y[:, :, 2:, 1:], atol=1e-12)
