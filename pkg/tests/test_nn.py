import numpy as np
import numpy.testing as npt
import pytest

from fbk.config import RngStreams, TrainConfig
from fbk.data import SyntheticQuadraticSpec, gen_synthetic
from fbk.errors import ConfigError, ContractError, DataError, DimensionError, TrainingAborted
from fbk.gradcheck import rel_error
from fbk.nn.layers import BatchNorm, Dropout, FbDense, Linear, Tanh
from fbk.nn.network import Network, forward_backward, softmax_cross_entropy
from fbk.nn.optim import layer_multipliers, sgd_step, warmup_schedule
from fbk.nn.presets import build_preset, structural_diff
from fbk.nn.train import Split, evaluate, load_checkpoint, save_checkpoint, train
from fbk.oracles import finite_diff_grad


def plain_config(**kw):
    base = dict(lr=0.1, momentum=0.9, weight_decay=0.0)
    base.update(kw)
    return TrainConfig(**base)


def test_sgd_without_momentum():
    p = {"w": np.array([1.0, 2.0])}
    sgd_step(p, {"w": np.array([1.0, -1.0])}, {}, plain_config(momentum=0.0))
    npt.assert_allclose(p["w"], [0.9, 2.1])


def test_sgd_two_momentum_steps():
    p, state, g = {"w": np.array([0.0])}, {}, {"w": np.array([2.0])}
    cfg = plain_config()
    sgd_step(p, g, state, cfg)
    sgd_step(p, g, state, cfg)
    npt.assert_allclose(p["w"], [-0.1 * 2.9 * 2.0])


def test_sgd_weight_decay_and_exemptions():
    p = {"w": np.array([1.0]), "gamma": np.array([1.0])}
    zero = {"w": np.zeros(1), "gamma": np.zeros(1)}
    sgd_step(p, zero, {}, plain_config(momentum=0.0, weight_decay=0.5), no_decay={"gamma"})
    npt.assert_allclose(p["w"], [0.95])
    npt.assert_allclose(p["gamma"], [1.0])


def test_sgd_rejects_non_finite_gradients():
    p = {"w": np.ones(3)}
    with pytest.raises(TrainingAborted, match="non-finite"):
        sgd_step(p, {"w": np.array([0.0, np.nan, np.inf])}, {}, plain_config())
    npt.assert_array_equal(p["w"], np.ones(3))


def test_warmup_schedule():
    cfg = plain_config(warmup_epochs=3, warmup_start=0.1)
    assert warmup_schedule(0, cfg) == pytest.approx(0.1)
    assert warmup_schedule(1, cfg) == pytest.approx(0.4)
    assert warmup_schedule(3, cfg) == 1.0
    assert warmup_schedule(0, cfg, is_fb=False) == 1.0
    assert warmup_schedule(1, plain_config(warmup_shape="constant")) == pytest.approx(0.1)


def test_warmup_only_touches_fb_layers_with_factors():
    net = Network([Linear(4, 4), Tanh(), FbDense(4, 3, k=2), ], (4,), 3)
    assert layer_multipliers(net, 0.0, plain_config()) == [1.0, 1.0, pytest.approx(0.1)]
    net0 = Network([FbDense(4, 3, k=0)], (4,), 3)
    assert layer_multipliers(net0, 0.0, plain_config()) == [1.0]


def test_cross_entropy_examples():
    loss, d = softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert loss == pytest.approx(np.log(4))
    npt.assert_allclose(d.sum(axis=1), 0.0, atol=1e-15)
    with pytest.raises(DataError):
        softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 4]))


def test_untrained_loss_near_log_classes(rng):
    net = build_preset("fbn", classes=10, in_shape=(3, 16, 16), width=(8, 8, 8), k=4).init(rng)
    labels = rng.integers(0, 10, 64)  # uniform random labels
    loss, _, _ = forward_backward(net, rng.standard_normal((64, 3, 16, 16)), labels, "infer")
    assert abs(loss - np.log(10)) <= 0.1 * np.log(10)


def small_split(rank=4, n_train=512, n_test=256, seed=0):
    data = gen_synthetic(SyntheticQuadraticSpec(n=8, rank=rank, classes=3, n_train=n_train,
                                                n_test=n_test, seed=seed))
    return Split(data.train_x, data.train_y, data.test_x, data.test_y, 3)


def test_loss_decreases(rng):
    split = small_split()
    net = build_preset("fb-dense", classes=3, in_shape=(8,), k=4, p=0.8).init(rng)
    cfg = plain_config(lr=0.05, batch_size=64, epochs=7, warmup_epochs=0)
    losses = train(net, split, cfg).step_losses
    assert len(losses) >= 50
    assert np.mean(losses[-5:]) < 0.8 * np.mean(losses[:5])


def _net_grad_check(net, x, labels, rng, tol):
    net.resample(rng)  # freeze one mask for the whole check

    def loss_now():
        return softmax_cross_entropy(net.forward(x, True), labels)[0]

    _, d = softmax_cross_entropy(net.forward(x, True), labels)
    dx = net.backward(d)
    analytic = [dict(layer.grads) for layer in net.layers]
    worst = float(rel_error(dx, finite_diff_grad(lambda v: softmax_cross_entropy(
        net.forward(v, True), labels)[0], x, 1e-5)).max())
    for layer, grads in zip(net.layers, analytic):
        for name, param in layer.params.items():
            def f(v, param=param):
                saved = param.copy()
                param[...] = v
                out = loss_now()
                param[...] = saved
                return out
            worst = max(worst, float(rel_error(grads[name], finite_diff_grad(f, param.copy(), 1e-5)).max()))
    assert worst <= tol, worst


def test_end_to_end_gradients_dense(rng):
    net = Network([Linear(5, 6), Tanh(), FbDense(6, 3, k=3, p=0.5)], (5,), 3).init(rng)
    _net_grad_check(net, rng.standard_normal((4, 5)), np.array([0, 1, 2, 1]), rng, 1e-4)


def test_end_to_end_gradients_image_preset(rng):
    net = build_preset("fbn-dropout", classes=3, in_shape=(2, 8, 8), width=(3, 4), k=2, p=0.5,
                       dropout=0.3).init(rng)
    _net_grad_check(net, rng.standard_normal((3, 2, 8, 8)), np.array([0, 2, 1]), rng, 1e-4)


def test_batchnorm_running_stats(rng):
    bn = BatchNorm(2)
    bn.init(rng, np.float64)
    x = rng.standard_normal((64, 2, 3, 3)) * 3 + 5
    y = bn.forward(x, True)
    npt.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    npt.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))


def test_presets_differ_only_in_head():
    base = build_preset("baseline", width=(8, 8, 8))
    for name in ("fbn", "fbn-3x3", "fbn-dropout"):
        other = build_preset(name, width=(8, 8, 8))
        diffs = structural_diff(base, other)
        assert diffs and min(i for i, _, _ in diffs) >= base.head_start == other.head_start


def test_zero_k_matches_baseline_parameter_count():
    rng = np.random.default_rng(0)
    base = build_preset("baseline", classes=10, width=(8, 16, 32)).init(rng)
    assert build_preset("fbn", classes=10, k=0, width=(8, 16, 32)).init(rng).param_count() == base.param_count()
    assert (build_preset("fbn", classes=10, k=20, width=(8, 16, 32)).init(rng).param_count()
            == base.param_count() + 10 * 20 * 32)


def test_preset_errors():
    with pytest.raises(ConfigError):
        build_preset("resnet")
    with pytest.raises(ConfigError):
        build_preset("fbn", in_shape=(16,))
    with pytest.raises(DimensionError):
        Network([Linear(4, 3)], (4,), 5)


def test_training_is_deterministic():
    split = small_split(n_train=320)
    cfg = plain_config(lr=0.05, batch_size=32, epochs=2, seed=3)
    runs = []
    for _ in range(2):
        net = build_preset("fb-dense", classes=3, in_shape=(8,), k=4, p=0.5).init(RngStreams(3).get("init"))
        res = train(net, split, cfg)
        runs.append((res.step_losses, [a.copy() for _, a in net.named_arrays()]))
    assert len(runs[0][0]) == 20
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1], runs[1][1]):
        npt.assert_array_equal(a, b)


def test_zero_k_trains_bitwise_like_linear():
    split = small_split(n_train=256)
    cfg = plain_config(lr=0.05, batch_size=32, epochs=3, seed=1, weight_decay=1e-4)
    out = {}
    for name in ("linear", "fb-dense"):
        net = build_preset(name, classes=3, in_shape=(8,), k=0, p=0.5).init(RngStreams(1).get("init"))
        res = train(net, split, cfg)
        out[name] = (res.step_losses, net.layers[0].params["W"].copy(), net.layers[0].params["b"].copy())
    assert out["linear"][0] == out["fb-dense"][0]
    npt.assert_array_equal(out["linear"][1], out["fb-dense"][1])
    npt.assert_array_equal(out["linear"][2], out["fb-dense"][2])


def test_full_keep_probability_train_equals_infer(rng):
    layer = FbDense(5, 2, k=6, p=1.0)
    layer.init(rng, np.float64)
    layer.resample(rng)
    x = rng.standard_normal((3, 5))
    npt.assert_array_equal(layer.forward(x, True), layer.forward(x, False))


def test_train_forward_needs_a_mask(rng):
    layer = FbDense(5, 2, k=2, p=0.5)
    layer.init(rng, np.float64)
    with pytest.raises(ContractError):
        layer.forward(np.zeros((1, 5)), True)
    with pytest.raises(ContractError):
        Dropout(0.5).forward(np.zeros((1, 5)), True)


def test_debug_bounds(rng):
    net = Network([FbDense(4, 2, k=3)], (4,), 2).init(rng)
    net.set_debug(True)
    with pytest.raises(AssertionError, match="Tanh"):
        net.forward(np.full((1, 4), 2.0), False)
    guarded = Network([Tanh(), FbDense(4, 2, k=3)], (4,), 2).init(rng)
    guarded.set_debug(True)
    guarded.forward(rng.standard_normal((8, 4)) * 50, False)


def test_diverging_run_aborts(rng):
    split = small_split(n_train=64)
    split.train_x = split.train_x.copy()
    split.train_x[5, 0] = np.nan
    net = build_preset("linear", classes=3, in_shape=(8,)).init(rng)
    with pytest.raises(TrainingAborted):
        train(net, split, plain_config(batch_size=64, epochs=1))


def test_checkpoint_roundtrip(tmp_path, rng):
    split = small_split(n_train=128)
    cfg = plain_config(batch_size=32, epochs=1)
    net = build_preset("fb-dense", classes=3, in_shape=(8,), k=2).init(rng)
    res = train(net, split, cfg)
    save_checkpoint(tmp_path / "ck", net, res.opt_state, 1, cfg)
    fresh = build_preset("fb-dense", classes=3, in_shape=(8,), k=2).init(np.random.default_rng(99))
    next_epoch, opt, _ = load_checkpoint(tmp_path / "ck", fresh)
    assert next_epoch == 1
    for (_, a), (_, b) in zip(net.named_arrays(), fresh.named_arrays()):
        npt.assert_array_equal(a, b)
    npt.assert_array_equal(opt[0]["F"], res.opt_state[0]["F"])
    assert evaluate(fresh, split) == evaluate(net, split)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "ck", build_preset("linear", classes=3, in_shape=(8,)).init(rng))
