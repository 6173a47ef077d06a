"""Parameter/computation formulas and runtime scaling of the FB kernel."""

from __future__ import annotations

import math
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .fb_dense import FbLayerParams, MacCounter, fb_forward, forward_macs, inference_mask, init_params


def table1_instantiate(n: int, c: int, d: int, k: int) -> dict:
    """Parameter counts and computation orders for the four pooling/classifier methods.

    Tensor Sketch computation uses ``log2 d`` (FFT length).
    """
    for name, v in (("n", n), ("c", c), ("d", d), ("k", k)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return {
        "inputs": {"n": n, "c": c, "d": d, "k": k},
        "methods": {
            "bilinear": {"params": c * n * n, "params_formula": "c*n^2",
                         "compute": c * n * n, "compute_formula": "O(c*n^2)"},
            "rm": {"params": 2 * n * d + c * d, "params_formula": "2*n*d + c*d",
                   "compute": c * n * d, "compute_formula": "O(c*n*d)"},
            "ts": {"params": 2 * n + c * d, "params_formula": "2*n + c*d",
                   "compute": round(c * (n + d * math.log2(d))), "compute_formula": "O(c*(n + d*log d))"},
            "factorized": {"params": c * k * n, "params_formula": "c*k*n",
                           "compute": c * k * n, "compute_formula": "O(c*k*n)"},
        },
    }


def human(v: int) -> str:
    """Round to the bracket style of the comparison table: 262M, 10M, 5G."""
    for div, suffix in ((1e9, "G"), (1e6, "M"), (1e3, "K")):
        if v >= div:
            return f"{round(v / div)}{suffix}"
    return str(v)


def naive_expansion_forward(x: np.ndarray, params: FbLayerParams, gains: np.ndarray) -> np.ndarray:
    """Vectorised O(k n^2) path: build each unit's n x n interaction matrix, then x^T M x."""
    y = x @ params.W.T + params.b
    for j in range(params.c):
        F = params.F[j]
        M = F.T @ (gains[:, None] * F)
        y[:, j] += np.einsum("sn,sn->s", x @ M, x)
    return y


def mac_grid(ns, ks, c: int = 3, batch: int = 2) -> list[dict]:
    """Instrumented MAC counts of :func:`fb_forward` against the closed form."""
    rows = []
    rng = np.random.default_rng(0)
    for n in ns:
        for k in ks:
            params = init_params(c, n, k, rng)
            counter = MacCounter()
            fb_forward(rng.standard_normal((batch, n)), params, inference_mask(k), counter)
            rows.append({"n": n, "k": k, "c": c, "batch": batch, "counted": counter.count,
                         "closed_form": forward_macs(batch, c, n, k)})
    return rows


def affine_fit_residual(xs, ys) -> float:
    """Least-squares affine fit; returns residual norm over the norm of ``ys``."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    A = np.stack([np.ones_like(xs), xs], axis=1)
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    return float(np.linalg.norm(A @ coef - ys) / np.linalg.norm(ys))


def loglog_slope(xs, ts) -> float:
    return float(np.polyfit(np.log(xs), np.log(ts), 1)[0])


def _time(fn, reps: int):
    fn()  # warm-up
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), samples


def _point(method: str, n: int, k: int, c: int, batch: int, reps: int, rng) -> dict:
    params = init_params(c, n, k, rng)
    x = rng.standard_normal((batch, n))
    mask = inference_mask(k, 1.0)
    if method == "factorized":
        fn = lambda: fb_forward(x, params, mask)  # noqa: E731
    else:
        gains = mask.gains()
        fn = lambda: naive_expansion_forward(x, params, gains)  # noqa: E731
    median, samples = _time(fn, reps)
    resolution = time.get_clock_info("perf_counter").resolution
    return {"method": method, "n": n, "k": k, "c": c, "batch": batch,
            "median_s": median, "per_sample_s": median / batch, "samples_s": samples,
            "reliable": resolution <= 0.01 * median}


def runtime_sweep(ns, ks, c: int = 8, batch: int = 256, reps: int = 5, fixed_k: int = 8,
                  fixed_n: int = 1024, methods=("factorized", "naive"), threads: int = 1,
                  seed: int = 0) -> dict:
    """Median wallclock per grid point and log-log slopes (vs n at ``fixed_k``, vs k at ``fixed_n``)."""
    rng = np.random.default_rng(seed)
    points = []
    with threadpool_limits(threads):
        for method in methods:
            for n in ns:
                points.append(_point(method, n, fixed_k, c, batch, reps, rng))
            if "factorized" == method:
                for k in ks:
                    points.append(_point(method, fixed_n, k, c, batch, reps, rng))
    slopes = {}
    for method in methods:
        by_n = [p for p in points if p["method"] == method and p["k"] == fixed_k and p["n"] in ns]
        by_n = list({p["n"]: p for p in by_n}.values())
        slopes[f"{method}_vs_n"] = loglog_slope([p["n"] for p in by_n], [p["median_s"] for p in by_n])
        by_k = [p for p in points if p["method"] == method and p["n"] == fixed_n and p["k"] in ks]
        by_k = list({p["k"]: p for p in by_k}.values())
        if len(by_k) >= 2:
            slopes[f"{method}_vs_k"] = loglog_slope([p["k"] for p in by_k], [p["median_s"] for p in by_k])
    return {"grid": {"ns": list(ns), "ks": list(ks), "c": c, "batch": batch, "reps": reps,
                     "fixed_k": fixed_k, "fixed_n": fixed_n, "threads": threads},
            "points": points, "slopes": slopes}


def format_table(headers, rows) -> str:
    """Aligned plain-text columns."""
    cells = [[str(h) for h in headers]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def table1_text(report: dict) -> str:
    rows = [(name, m["params_formula"], m["params"], human(m["params"]), m["compute_formula"], human(m["compute"]))
            for name, m in report["methods"].items()]
    return format_table(["method", "params", "exact", "approx", "compute", "approx"], rows)
