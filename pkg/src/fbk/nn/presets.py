"""Desk-scale network presets.

Image presets are a three-block CNN (conv 3x3, batch norm, activation, 2x2
max pool) whose variants differ only in the head:

* ``baseline``: ReLU, global average pool, linear classifier
* ``fbn``: Tanh, 1x1 FB conv to class scores, global average pool
* ``fbn-3x3``: as ``fbn`` with a 3x3 FB conv (pad 1)
* ``fbn-dropout``: as ``fbn`` with unit dropout in front of the FB conv

Vector presets for the synthetic task are a single ``linear`` layer or a
single ``fb-dense`` layer.
"""

from __future__ import annotations

from ..config import TrainConfig
from ..errors import ConfigError
from ..tensor import ConvGeometry
from .layers import (
    BatchNorm,
    Conv2d,
    Dropout,
    FbConv,
    FbDense,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    ReLU,
    Tanh,
)
from .network import Network

IMAGE_PRESETS = ("baseline", "fbn", "fbn-3x3", "fbn-dropout")
VECTOR_PRESETS = ("linear", "fb-dense", "fb-dense-dropout")
PRESETS = IMAGE_PRESETS + VECTOR_PRESETS


def _trunk(in_shape, width):
    layers = []
    channels = in_shape[0]
    for i, out in enumerate(width):
        layers += [Conv2d(ConvGeometry(channels, out, 3, 3, stride=1, pad=1)), BatchNorm(out)]
        if i < len(width) - 1:
            layers.append(ReLU())
        layers.append(MaxPool2d(2))
        channels = out
    return layers, channels


def build_preset(name: str, classes: int = 10, in_shape=(3, 32, 32), k: int = 20, p: float = 1.0,
                 width=(16, 32, 64), dropout: float = 0.5, inverted: bool = False,
                 factor_std: float | None = None) -> Network:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    fb = dict(k=k, p=p, inverted=inverted, factor_std=factor_std)
    if name in VECTOR_PRESETS:
        if len(in_shape) != 1:
            raise ConfigError(f"preset {name!r} takes vector inputs, got shape {tuple(in_shape)}")
        n = in_shape[0]
        if name == "linear":
            layers = [Linear(n, classes)]
        elif name == "fb-dense":
            layers = [FbDense(n, classes, **fb)]
        else:
            layers = [Dropout(dropout), FbDense(n, classes, **fb)]
        return Network(layers, in_shape, classes, name)

    if len(in_shape) != 3:
        raise ConfigError(f"preset {name!r} takes (C, H, W) inputs, got shape {tuple(in_shape)}")
    layers, channels = _trunk(in_shape, width)
    if name == "baseline":
        head = [ReLU(), GlobalAvgPool(), Linear(channels, classes)]
    elif name == "fbn":
        head = [Tanh(), FbConv(ConvGeometry(channels, classes, 1, 1), **fb), GlobalAvgPool()]
    elif name == "fbn-3x3":
        head = [Tanh(), FbConv(ConvGeometry(channels, classes, 3, 3, pad=1), **fb), GlobalAvgPool()]
    else:
        head = [Tanh(), Dropout(dropout), FbConv(ConvGeometry(channels, classes, 1, 1), **fb), GlobalAvgPool()]
    net = Network(layers + head, in_shape, classes, name)
    net.head_start = len(layers)
    return net


def preset_from_config(config: TrainConfig, classes: int, in_shape) -> Network:
    name = config.preset
    if name in ("fbn", "fbn-3x3") and config.kernel == 3:
        name = "fbn-3x3"
    return build_preset(
        name, classes=classes, in_shape=tuple(in_shape), k=config.k, p=config.p,
        width=tuple(config.width), dropout=config.dropout or 0.5,
        inverted=config.inverted_dropfactor, factor_std=config.factor_std,
    )


def structural_diff(a: Network, b: Network) -> list[tuple[int, dict | None, dict | None]]:
    """Positions where two networks' layer descriptions differ."""
    da, db = a.describe(), b.describe()
    out = []
    for i in range(max(len(da), len(db))):
        la = da[i] if i < len(da) else None
        lb = db[i] if i < len(db) else None
        if la != lb:
            out.append((i, la, lb))
    return out
