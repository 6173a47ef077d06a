from __future__ import annotations

import numpy as np

from ..errors import DataError, DimensionError
from .layers import Layer


class Network:
    """Ordered layers ending in raw class scores; the loss head is softmax cross-entropy."""

    def __init__(self, layers: list[Layer], in_shape: tuple, classes: int, name: str = ""):
        self.layers = layers
        self.in_shape = tuple(in_shape)
        self.classes = classes
        self.name = name
        shape = self.in_shape
        for layer in layers:
            shape = layer.out_shape(shape)
        if shape != (classes,):
            raise DimensionError(f"network {name!r} ends in shape {shape}, expected ({classes},)")

    def init(self, rng: np.random.Generator, dtype=np.float64) -> Network:
        for layer in self.layers:
            layer.init(rng, dtype)
        return self

    def set_debug(self, flag: bool) -> None:
        for layer in self.layers:
            layer.debug = flag

    def resample(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.resample(rng)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def named_arrays(self):
        """(key, array) for every parameter and buffer, in a fixed order."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"{i}.{name}", arr
            for name, arr in layer.buffers.items():
                yield f"{i}.buf.{name}", arr


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    d = np.exp(log_probs)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def forward_backward(net: Network, x: np.ndarray, labels: np.ndarray, mode: str = "train",
                     rng: np.random.Generator | None = None):
    """One pass over a batch. Returns ``(loss, accuracy, grads)``.

    In training mode every stochastic layer draws a fresh mask from ``rng``
    first, once per call. ``grads`` is one dict per layer, empty for layers
    without parameters. Inference mode skips the backward pass and returns
    ``grads=None``.
    """
    train = mode == "train"
    if train:
        if rng is None:
            raise DataError("training mode needs an rng for mask sampling")
        net.resample(rng)
    logits = net.forward(x, train)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    accuracy = float(np.mean(logits.argmax(axis=1) == labels))
    if not train:
        return loss, accuracy, None
    net.backward(dlogits)
    return loss, accuracy, [dict(layer.grads) for layer in net.layers]


def predict(net: Network, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = [net.forward(x[i:i + batch_size], train=False) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.classes))


def error_rate(net: Network, x: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> float:
    return float(np.mean(predict(net, x, batch_size).argmax(axis=1) != labels))
