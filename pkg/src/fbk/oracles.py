"""Brute-force references for testing the FB kernels.

Everything here is written with explicit loops over indices and shares no
quadratic-form code with :mod:`fbk.fb_dense`; a shared helper would hide a
shared bug. None of these functions are meant to be fast.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import DataError, DimensionError
from .fb_dense import FbLayerParams


@dataclass
class GlobalDescriptor:
    z: np.ndarray  # (n, n)


@dataclass
class BilinearPoolingModel:
    """Classifier on vec(z): ``y = b + W vec(z)`` with ``W`` of shape (c, n*n)."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        c, nn = self.W.shape
        n = int(round(np.sqrt(nn)))
        if n * n != nn or self.b.shape != (c,):
            raise DimensionError(f"bad bilinear model shapes W={self.W.shape} b={self.b.shape}")

    @property
    def n(self) -> int:
        return int(round(np.sqrt(self.W.shape[1])))

    def reshaped(self, j: int) -> np.ndarray:
        """Per-class interaction matrix, row j of W laid out as n x n."""
        return self.W[j].reshape(self.n, self.n)

    @classmethod
    def from_matrices(cls, mats, b) -> BilinearPoolingModel:
        mats = [np.asarray(m, dtype=np.float64) for m in mats]
        return cls(np.stack([m.reshape(-1) for m in mats]), np.asarray(b, dtype=np.float64))


def bilinear_pool(features: np.ndarray) -> GlobalDescriptor:
    """Sum of outer products of the location features (|S|, n)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise DataError("bilinear pooling needs at least one feature vector")
    s, n = features.shape
    z = np.zeros((n, n))
    for loc in range(s):
        x = features[loc]
        for a in range(n):
            for c in range(n):
                z[a, c] += x[a] * x[c]
    return GlobalDescriptor(z)


def bilinear_paths(features: np.ndarray, model: BilinearPoolingModel):
    """Scores through vec(z) and through per-location quadratic forms.

    The two are algebraically identical; returning both lets callers check it.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.n:
        raise DimensionError(f"features {features.shape} do not match model width n={model.n}")
    c, n = model.b.shape[0], model.n
    vz = bilinear_pool(features).z.reshape(-1)
    via_vec = np.array([model.b[j] + sum(model.W[j, i] * vz[i] for i in range(n * n)) for j in range(c)])
    via_locations = model.b.astype(np.float64).copy()
    for j in range(c):
        R = model.reshaped(j)
        for x in features:
            for a in range(n):
                for d in range(n):
                    via_locations[j] += x[a] * R[a, d] * x[d]
    return via_vec, via_locations


def bilinear_classify(features: np.ndarray, model: BilinearPoolingModel, tol: float = 1e-10) -> np.ndarray:
    via_vec, via_locations = bilinear_paths(features, model)
    gap = np.max(np.abs(via_vec - via_locations), initial=0.0)
    if gap > tol * max(1.0, np.max(np.abs(via_vec), initial=0.0)):
        raise AssertionError(f"vec(z) and per-location evaluations disagree by {gap:.3e}")
    return via_vec


def naive_fb(x: np.ndarray, params: FbLayerParams, p: float = 1.0,
             gains: np.ndarray | None = None) -> np.ndarray:
    """Literal O(k n^2) double sum over column inner products.

    ``x`` may be a single vector (n,) or a batch (batch, n). Without ``gains``
    every factor is scaled by ``p`` (inference form); with ``gains`` factor t is
    scaled by ``gains[t]`` (a training mask).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x[None] if single else x
    if xs.shape[1] != params.n:
        raise DimensionError(f"input width {xs.shape[1]} != n={params.n}")
    c, k, n = params.F.shape
    g = np.full(k, float(p)) if gains is None else np.asarray(gains, dtype=np.float64)
    out = np.zeros((xs.shape[0], c))
    for s, xv in enumerate(xs):
        for j in range(c):
            F = params.F[j]
            total = float(params.b[j])
            for i in range(n):
                total += params.W[j, i] * xv[i]
            for i in range(n):
                for i2 in range(n):
                    inner = 0.0
                    for t in range(k):
                        inner += g[t] * F[t, i] * F[t, i2]
                    total += inner * xv[i] * xv[i2]
            out[s, j] = total
    return out[0] if single else out


def interaction_matrices(F: np.ndarray) -> list[np.ndarray]:
    """W^R_j = F_j^T F_j built entry by entry from column inner products."""
    c, k, n = F.shape
    mats = []
    for j in range(c):
        R = np.zeros((n, n))
        for a in range(n):
            for d in range(n):
                R[a, d] = sum(F[j, t, a] * F[j, t, d] for t in range(k))
        mats.append(R)
    return mats


def top_eigenvalues(M: np.ndarray, count: int, iters: int = 200, seed: int = 0) -> np.ndarray:
    """Leading eigenvalue magnitudes of a symmetric matrix by subspace (block power) iteration."""
    n = M.shape[0]
    count = min(count, n)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, count)))
    for _ in range(iters):
        Q, _ = np.linalg.qr(M @ Q)
    ritz = Q.T @ M @ Q
    return np.sort(np.abs(np.linalg.eigvalsh((ritz + ritz.T) / 2)))[::-1]


def numerical_rank(M: np.ndarray, max_rank: int, rel_tol: float = 1e-10) -> int:
    """Count eigenvalues above ``rel_tol * sigma_max`` among the leading ``max_rank + 1``."""
    vals = top_eigenvalues(M, max_rank + 1)
    if vals[0] == 0.0:
        return 0
    return int(np.sum(vals > rel_tol * vals[0]))


def psd_probe(z: np.ndarray, probes: int = 100, seed: int = 0) -> float:
    """Smallest ``v^T z v`` over random unit probes."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(probes):
        v = rng.standard_normal(z.shape[0])
        v /= np.linalg.norm(v)
        worst = min(worst, float(v @ z @ v))
    return worst


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def fb_equals_bilinear_construction(F, w, b, features) -> dict:
    """Compare a 1x1 FB conv + global average pool with a bilinear pooling oracle.

    The oracle uses ``W^R_j = F_j^T F_j`` and bias ``b_j``; its per-location
    quadratic sum is divided by |S| and the averaged linear term is added.
    The report also carries the unnormalized bilinear score, for which
    ``(fb - b - mean linear) * |S| + b`` must match.
    """
    from .fb_conv import FbConvLayer, fb_conv_forward
    from .fb_dense import inference_mask
    from .tensor import ConvGeometry

    F = np.asarray(F, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    c, k, n = F.shape
    s = features.shape[0]

    geometry = ConvGeometry(n, c, 1, 1)
    layer = FbConvLayer(geometry, FbLayerParams(b, w, F), p=1.0)
    image = features.T.reshape(1, n, s, 1)
    y, _ = fb_conv_forward(image, layer, inference_mask(k, 1.0))
    fb_side = y.reshape(c, s).mean(axis=1)

    model = BilinearPoolingModel.from_matrices(interaction_matrices(F), b)
    _, bilinear = bilinear_paths(features, model)
    linear_mean = np.array([sum(w[j, i] * x[i] for x in features for i in range(n)) / s for j in range(c)])
    oracle_side = b + (bilinear - b) / s + linear_mean
    rescaled_fb = (fb_side - b - linear_mean) * s + b

    return {
        "inputs_digest": digest(F, w, b, features),
        "locations": s,
        "fb_pipeline": fb_side.tolist(),
        "bilinear_oracle": oracle_side.tolist(),
        "bilinear_unnormalized": bilinear.tolist(),
        "fb_rescaled": rescaled_fb.tolist(),
        "max_abs_diff": float(np.max(np.abs(fb_side - oracle_side))),
        "max_abs_diff_unnormalized": float(np.max(np.abs(rescaled_fb - bilinear))),
    }


def fm_predict(x_sparse: Mapping[int, float], params: FbLayerParams, p: float = 1.0) -> float:
    """Two-way FM score of a sparse input {index: value} with a one-unit FB layer.

    Pairs run over all nonzero (i, j) including i == j, matching the dense FB
    expansion. Classic FMs drop the diagonal; this oracle keeps it on purpose.
    """
    if params.c != 1:
        raise DimensionError(f"FM needs a single output unit, got c={params.c}")
    F = params.F[0]
    k = F.shape[0]
    items = [(int(i), float(v)) for i, v in x_sparse.items() if v != 0.0]
    total = float(params.b[0])
    for i, v in items:
        total += params.W[0, i] * v
    for i, vi in items:
        for j, vj in items:
            total += p * sum(F[t, i] * F[t, j] for t in range(k)) * vi * vj
    return total


def finite_diff_grad(fn: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn(point)
        flat[i] = orig - h
        minus = fn(point)
        flat[i] = orig
        g[i] = (plus - minus) / (2 * h)
    return grad
