"""Fully connected factorized bilinear layer.

For output unit ``j`` with bias ``b_j``, linear weight ``w_j`` and factor matrix
``F_j`` (k x n)::

    y_j = b_j + w_j . x + sum_t g_t * (f_jt . x)^2

where ``g_t`` is the DropFactor gain: the Bernoulli draw ``m_t`` while training
and the retain probability ``p`` at inference. The quadratic term is always
evaluated through the projections ``F_j x``; the n x n matrix ``F_j^T F_j`` is
never formed, so a forward pass costs O(k n) per unit and sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import DEFAULT_DTYPE, load_tensor, save_tensor

TRAIN = "train"
INFER = "infer"


@dataclass
class FbLayerParams:
    b: np.ndarray  # (c,)
    W: np.ndarray  # (c, n)
    F: np.ndarray  # (c, k, n)

    def __post_init__(self):
        c, n = self.W.shape if self.W.ndim == 2 else (None, None)
        if c is None or self.b.shape != (c,) or self.F.ndim != 3 or self.F.shape[0] != c or self.F.shape[2] != n:
            raise DimensionError(
                f"inconsistent FB parameter shapes b={self.b.shape} W={self.W.shape} F={self.F.shape}"
            )

    @property
    def c(self) -> int:
        return self.W.shape[0]

    @property
    def n(self) -> int:
        return self.W.shape[1]

    @property
    def k(self) -> int:
        return self.F.shape[1]

    def copy(self) -> FbLayerParams:
        return FbLayerParams(self.b.copy(), self.W.copy(), self.F.copy())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"b": self.b, "W": self.W, "F": self.F}


def init_linear(c: int, n: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
    """Fan-in uniform init shared by linear, conv and FB layers: returns (W, b)."""
    bound = 1.0 / np.sqrt(n)
    W = rng.uniform(-bound, bound, size=(c, n)).astype(dtype)
    b = rng.uniform(-bound, bound, size=c).astype(dtype)
    return W, b


def init_params(c: int, n: int, k: int, rng: np.random.Generator,
                factor_std: float | None = None, dtype=DEFAULT_DTYPE) -> FbLayerParams:
    """Linear part as :func:`init_linear`; factors i.i.d. N(0, 1/(k n)) unless ``factor_std`` given.

    The linear weights are drawn first, so with ``k == 0`` the rng consumption
    and resulting values match a plain linear layer exactly.
    """
    if k < 0:
        raise ConfigError(f"factor count must be >= 0, got {k}")
    W, b = init_linear(c, n, rng, dtype)
    if factor_std is None:
        factor_std = np.sqrt(1.0 / (k * n)) if k else 0.0
    F = (rng.standard_normal((c, k, n)) * factor_std).astype(dtype) if k else np.zeros((c, 0, n), dtype)
    return FbLayerParams(b, W, F)


@dataclass
class DropFactorMask:
    """Per-layer factor mask. One mask is shared by every unit, sample and location."""

    p: float
    m: np.ndarray
    mode: str = TRAIN
    inverted: bool = False

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"retain probability must lie in (0, 1], got {self.p}")
        if self.mode not in (TRAIN, INFER):
            raise ConfigError(f"mask mode must be {TRAIN!r} or {INFER!r}, got {self.mode!r}")
        self.m = np.asarray(self.m)

    @property
    def k(self) -> int:
        return self.m.shape[0]

    def gains(self, dtype=DEFAULT_DTYPE) -> np.ndarray:
        """Per-factor multipliers applied to the squared projections."""
        if self.mode == TRAIN:
            g = self.m.astype(dtype)
            return g / self.p if self.inverted else g
        if self.inverted:
            return np.ones(self.k, dtype=dtype)
        return np.full(self.k, self.p, dtype=dtype)


def sample_mask(k: int, p: float, seed, inverted: bool = False) -> DropFactorMask:
    """Training mask of ``k`` independent Bernoulli(p) draws.

    ``seed`` may be an int, a ``SeedSequence`` or an existing ``Generator``.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"retain probability must lie in (0, 1], got {p}")
    if k < 0:
        raise ConfigError(f"factor count must be >= 0, got {k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = (rng.random(k) < p).astype(np.float64) if k else np.zeros(0)
    return DropFactorMask(p=p, m=m, mode=TRAIN, inverted=inverted)


def inference_mask(k: int, p: float = 1.0, inverted: bool = False) -> DropFactorMask:
    return DropFactorMask(p=p, m=np.ones(k), mode=INFER, inverted=inverted)


class MacCounter:
    """Tally of multiply-accumulate terms, one per accumulated product."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


def forward_macs(batch: int, c: int, n: int, k: int) -> int:
    """Closed form matching the counter in :func:`fb_forward`.

    Per sample and unit: n for ``w . x``, k n for the projections ``F x``,
    k for the gain-weighted sum of squared projections and k n for the
    back-projection ``F^T (g * F x)`` that the backward pass reuses for d_x.
    """
    return batch * c * (n + 2 * k * n + k)


@dataclass
class FbCache:
    x: np.ndarray                 # (batch, n)
    proj: np.ndarray              # (batch, c, k): f_jt . x_s
    back: np.ndarray | None       # (batch, c, n): F_j^T (g * F_j x_s); None when k == 0
    gains: np.ndarray = field(repr=False)
    mode: str = TRAIN


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ W.T + b


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns (d_b, d_W, d_x) of ``x @ W.T + b``; batch reduction is a sum."""
    return dy.sum(axis=0), dy.T @ x, dy @ W


def fb_forward(x: np.ndarray, params: FbLayerParams, mask: DropFactorMask,
               counter: MacCounter | None = None):
    """Evaluate the layer on a (batch, n) input. Returns ``(y, cache)``."""
    if x.ndim != 2 or x.shape[1] != params.n:
        raise DimensionError(f"input shape {x.shape} does not match layer width n={params.n}")
    if mask.k != params.k:
        raise DimensionError(f"mask has {mask.k} factors, layer has {params.k}")
    batch, (c, k, n) = x.shape[0], params.F.shape
    y = linear_forward(x, params.W, params.b)
    g = mask.gains(x.dtype)
    if k == 0:
        proj = np.zeros((batch, c, 0), dtype=x.dtype)
        back = None
    else:
        # (c*k, n) @ (n, batch) -> (batch, c, k)
        proj = (params.F.reshape(c * k, n) @ x.T).T.reshape(batch, c, k)
        gp = proj * g
        y = y + np.einsum("sck,sck->sc", proj, gp)
        # (c, batch, k) @ (c, k, n) -> (batch, c, n)
        back = np.matmul(gp.transpose(1, 0, 2), params.F).transpose(1, 0, 2)
    if counter is not None:
        counter.add(forward_macs(batch, c, n, k))
    return y, FbCache(x=x, proj=proj, back=back, gains=g.copy(), mode=mask.mode)


@dataclass
class FbGradients:
    d_b: np.ndarray
    d_W: np.ndarray
    d_F: np.ndarray
    d_x: np.ndarray


def fb_backward(dy: np.ndarray, cache: FbCache, params: FbLayerParams,
                mask: DropFactorMask) -> FbGradients:
    """Gradients of the loss given ``dy`` (batch, c), summed over the batch."""
    if mask.mode != cache.mode or not np.array_equal(mask.gains(cache.gains.dtype), cache.gains):
        raise ContractError("mask differs from the one used in the forward pass")
    x = cache.x
    if dy.shape != (x.shape[0], params.c):
        raise DimensionError(f"upstream gradient shape {dy.shape} != {(x.shape[0], params.c)}")
    d_b, d_W, d_x = linear_backward(dy, x, params.W)
    c, k, n = params.F.shape
    if k == 0:
        return FbGradients(d_b, d_W, np.zeros_like(params.F), d_x)
    coef = 2.0 * dy[:, :, None] * cache.proj * cache.gains   # (batch, c, k)
    d_F = (coef.reshape(-1, c * k).T @ x).reshape(c, k, n)
    d_x = d_x + 2.0 * np.einsum("sc,scn->sn", dy, cache.back)
    return FbGradients(d_b, d_W, d_F, d_x)


def param_count(c: int, n: int, k: int) -> dict[str, int]:
    quadratic = c * k * n
    linear = c * n + c
    return {"quadratic": quadratic, "linear": linear, "total": quadratic + linear}


# -- serialization -----------------------------------------------------------

def save_layer(directory: str | Path, params: FbLayerParams, p: float = 1.0,
               layer_type: str = "fb-dense", extra: dict | None = None) -> Path:
    """Write b/W/F tensors plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in params.arrays().items():
        save_tensor(directory / f"{name}.fbkt", arr)
    manifest = {"type": layer_type, "c": params.c, "n": params.n, "k": params.k, "p": p}
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_layer(directory: str | Path) -> tuple[FbLayerParams, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = FbLayerParams(*(load_tensor(directory / f"{name}.fbkt") for name in ("b", "W", "F")))
    if (params.c, params.n, params.k) != (manifest["c"], manifest["n"], manifest["k"]):
        raise ConfigError(
            f"manifest {manifest} disagrees with tensors (c={params.c}, n={params.n}, k={params.k})"
        )
    return params, manifest
