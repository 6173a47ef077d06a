"""Epoch loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..config import RngStreams, TrainConfig
from ..data import augment
from ..errors import ConfigError
from ..tensor import load_tensor, save_tensor
from .network import Network, error_rate, forward_backward
from .optim import base_lr, layer_multipliers, no_decay_names, sgd_step


@dataclass
class Split:
    """Arrays a training run consumes; ``normalize`` maps a raw batch to network input."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: int
    normalize: Callable[[np.ndarray], np.ndarray] = staticmethod(lambda x: x)
    images: bool = False
    content_hash: str = ""

    @property
    def in_shape(self) -> tuple:
        return tuple(self.train_x.shape[1:])


@dataclass
class TrainResult:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    opt_state: list = field(default_factory=list)
    truncated: bool = False


def evaluate(net: Network, split: Split, which: str = "test", batch_size: int = 512) -> float:
    x, y = (split.test_x, split.test_y) if which == "test" else (split.train_x, split.train_y)
    errs = []
    for i in range(0, len(x), batch_size):
        xb = split.normalize(x[i:i + batch_size])
        errs.append(error_rate(net, xb, y[i:i + batch_size], batch_size) * len(xb))
    return float(sum(errs) / len(x))


def train(net: Network, split: Split, config: TrainConfig, start_epoch: int = 0,
          opt_state: list | None = None, on_epoch: Callable[[dict], None] | None = None,
          checkpoint_dir: str | Path | None = None, deadline: float | None = None) -> TrainResult:
    """Run epochs ``start_epoch .. config.epochs - 1``.

    Shuffling, augmentation and DropFactor masks draw from per-epoch streams,
    so resuming from an epoch checkpoint replays the uninterrupted run exactly.
    """
    streams = RngStreams(config.seed)
    state = opt_state if opt_state is not None else [dict() for _ in net.layers]
    decay_skip = [no_decay_names(layer, config) for layer in net.layers]
    result = TrainResult(opt_state=state)
    n = len(split.train_y)
    batches = max(1, -(-n // config.batch_size))
    t0 = time.perf_counter()
    for epoch in range(start_epoch, config.epochs):
        if deadline is not None and time.perf_counter() > deadline:
            result.truncated = True
            break
        order = streams.get("data", epoch).permutation(n)
        aug_rng = streams.get("augment", epoch)
        mask_rng = streams.get("mask", epoch)
        lr = base_lr(epoch, config)
        loss_sum = correct = 0.0
        for b in range(batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            xb = split.train_x[idx]
            if config.augment and split.images:
                xb = augment(xb, aug_rng)
            xb = split.normalize(xb)
            loss, acc, grads = forward_backward(net, xb, split.train_y[idx], "train", mask_rng)
            mults = layer_multipliers(net, epoch + b / batches, config)
            for layer, g, st, m, skip in zip(net.layers, grads, state, mults, decay_skip):
                if layer.params:
                    sgd_step(layer.params, g, st, config, lr=lr * m, no_decay=skip)
            result.step_losses.append(loss)
            loss_sum += loss * len(idx)
            correct += acc * len(idx)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / n,
            "train_err": 1.0 - correct / n,
            "test_err": evaluate(net, split, "test"),
            "wallclock": time.perf_counter() - t0,
        }
        result.epochs.append(record)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}", net, state, epoch + 1, config)
        if on_epoch is not None:
            on_epoch(record)
    return result


def save_checkpoint(directory: str | Path, net: Network, opt_state: list, next_epoch: int,
                    config: TrainConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for key, arr in net.named_arrays():
        save_tensor(directory / f"{key}.fbkt", arr)
        names.append(key)
    opt_names = []
    for i, st in enumerate(opt_state):
        for name, arr in st.items():
            key = f"opt.{i}.{name}"
            save_tensor(directory / f"{key}.fbkt", arr)
            opt_names.append(key)
    manifest = {
        "preset": net.name,
        "in_shape": list(net.in_shape),
        "classes": net.classes,
        "layers": net.describe(),
        "next_epoch": next_epoch,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "arrays": names,
        "optimizer": opt_names,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path, net: Network):
    """Restore arrays into ``net``. Returns ``(next_epoch, opt_state, manifest)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no checkpoint manifest in {directory}") from exc
    if manifest["layers"] != net.describe() or manifest["classes"] != net.classes:
        raise ConfigError(f"checkpoint {directory} was written for a different network")
    own = dict(net.named_arrays())
    if sorted(own) != sorted(manifest["arrays"]):
        raise ConfigError(f"checkpoint {directory} array set does not match the network")
    for i, layer in enumerate(net.layers):
        for store in (layer.params, layer.buffers):
            prefix = f"{i}." if store is layer.params else f"{i}.buf."
            for name in store:
                arr = load_tensor(directory / f"{prefix}{name}.fbkt")
                if arr.shape != store[name].shape:
                    raise ConfigError(f"checkpoint array {prefix}{name} has shape {arr.shape}")
                store[name] = arr.astype(store[name].dtype)
    opt_state = [dict() for _ in net.layers]
    for key in manifest["optimizer"]:
        _, i, name = key.split(".", 2)
        opt_state[int(i)][name] = load_tensor(directory / f"{key}.fbkt")
    return manifest["next_epoch"], opt_state, manifest
