"""SGD with momentum, weight decay, step decay and FB slow-start warmup."""

from __future__ import annotations

import numpy as np

from ..config import TrainConfig
from ..errors import TrainingAborted


def sgd_step(params: dict, grads: dict, state: dict, config: TrainConfig,
             lr: float | None = None, no_decay=()) -> None:
    """In-place update: ``v = momentum*v + grad + wd*param``; ``param -= lr*v``.

    ``state`` holds one velocity buffer per parameter name and is created on
    first use. Names in ``no_decay`` skip the weight-decay term.
    """
    lr = config.lr if lr is None else lr
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
            raise TrainingAborted(f"{bad} non-finite entries in gradient of {name!r} {grad.shape}")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(param)
        v *= config.momentum
        v += grad
        if config.weight_decay and name not in no_decay:
            v += config.weight_decay * param
        param -= lr * v


def warmup_schedule(epoch: float, config: TrainConfig, is_fb: bool = True) -> float:
    """Learning-rate multiplier for a layer at ``epoch``.

    FB layers start at ``warmup_start`` (0.1) and climb linearly to 1.0 at
    ``warmup_epochs``; every other layer always gets 1.0.
    """
    if not is_fb or epoch >= config.warmup_epochs:
        return 1.0
    if config.warmup_shape == "constant":
        return config.warmup_start
    return config.warmup_start + epoch * (1.0 - config.warmup_start) / config.warmup_epochs


def base_lr(epoch: int, config: TrainConfig) -> float:
    """Step-decayed base rate: multiplied by ``lr_decay`` at every epoch in ``lr_steps``."""
    steps = sum(1 for s in config.lr_steps if epoch >= s)
    return config.lr * config.lr_decay ** steps


def layer_multipliers(net, epoch: float, config: TrainConfig) -> list[float]:
    # a k = 0 FB layer is a plain linear layer and trains like one
    return [warmup_schedule(epoch, config, layer.is_fb and layer.k > 0) for layer in net.layers]


def no_decay_names(layer, config: TrainConfig) -> set:
    names = set()
    if not config.decay_bn:
        names |= layer.no_decay
    if layer.is_fb and not config.decay_factors:
        names.add("F")
    return names
