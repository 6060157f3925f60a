"""Finite-difference verification of the analytic scan gradients.

Central differences (step 1e-6, 64-bit) against scan_vjp on random lanes,
and against the hand-chained gradient of the pool -> scan -> repeat
composite, where the repeat gradient is a row-sum and the mean-pool
gradient is a broadcast of the upstream value divided by w.
"""

from __future__ import annotations

import numpy as np

from .selective import ScanLane, scan_sequential, scan_vjp

FD_STEP = 1e-6
THRESHOLD = 1e-5


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / scale).max())


def central_difference(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    base = x.copy()
    for i in range(x.size):
        base.ravel()[i] = x.ravel()[i] + step
        up = fn(base)
        base.ravel()[i] = x.ravel()[i] - step
        down = fn(base)
        base.ravel()[i] = x.ravel()[i]
        flat[i] = (up - down) / (2.0 * step)
    return grad


def _random_lane(rng, length, n):
    return ScanLane(
        abar=rng.uniform(0.05, 0.95, (length, n)),
        bx=rng.standard_normal((length, n)),
        c=rng.standard_normal((length, n)),
        x_raw=rng.standard_normal(length),
        d_skip=float(rng.standard_normal()),
    )


def check_lane(rng, length, n) -> float:
    """Max relative error of scan_vjp against FD over every input of one lane."""
    lane = _random_lane(rng, length, n)
    dy = rng.standard_normal(length)
    grads = scan_vjp(lane, dy)

    def loss_with(abar=None, bx=None, c=None, x_raw=None, d_skip=None):
        probe = ScanLane(
            lane.abar if abar is None else abar,
            lane.bx if bx is None else bx,
            lane.c if c is None else c,
            lane.x_raw if x_raw is None else x_raw,
            lane.d_skip if d_skip is None else float(d_skip),
        )
        return float(scan_sequential(probe) @ dy)

    worst = 0.0
    worst = max(worst, _rel_err(grads["abar"],
                                central_difference(lambda v: loss_with(abar=v), lane.abar)))
    worst = max(worst, _rel_err(grads["bx"],
                                central_difference(lambda v: loss_with(bx=v), lane.bx)))
    worst = max(worst, _rel_err(grads["c"],
                                central_difference(lambda v: loss_with(c=v), lane.c)))
    worst = max(worst, _rel_err(grads["x_raw"],
                                central_difference(lambda v: loss_with(x_raw=v), lane.x_raw)))
    fd_skip = central_difference(lambda v: loss_with(d_skip=v), np.array(lane.d_skip))
    worst = max(worst, _rel_err(np.array(grads["d_skip"]), fd_skip))
    return worst


def composite_forward(x_grid: np.ndarray, abar: np.ndarray, bbar: np.ndarray,
                      c: np.ndarray, d_skip: float) -> np.ndarray:
    """pool (mean over w) -> scan (with skip on pooled tokens) -> repeat."""
    h, w = x_grid.shape
    pooled = x_grid.sum(axis=1) / w
    lane = ScanLane(abar, bbar * pooled[:, None], c, pooled, d_skip)
    y = scan_sequential(lane)
    return np.repeat(y[:, None], w, axis=1)


def check_composite(rng, h, w, n) -> float:
    """FD check of the chained pool/scan/repeat gradient w.r.t. the input grid."""
    x_grid = rng.standard_normal((h, w))
    abar = rng.uniform(0.05, 0.95, (h, n))
    bbar = rng.standard_normal((h, n))
    c = rng.standard_normal((h, n))
    d_skip = float(rng.standard_normal())
    upstream = rng.standard_normal((h, w))

    # Analytic chain: repeat gradient = row-sum of upstream; lane vjp maps
    # that to pooled-token gradients; mean-pool gradient = broadcast / w.
    dy = upstream.sum(axis=1)
    pooled = x_grid.sum(axis=1) / w
    lane = ScanLane(abar, bbar * pooled[:, None], c, pooled, d_skip)
    grads = scan_vjp(lane, dy)
    d_pooled = (grads["bx"] * bbar).sum(axis=1) + grads["x_raw"]
    d_x = np.repeat((d_pooled / w)[:, None], w, axis=1)

    def loss(v):
        return float((composite_forward(v, abar, bbar, c, d_skip) * upstream).sum())

    return _rel_err(d_x, central_difference(loss, x_grid))


def check_zero_upstream(rng, length=16, n=4) -> float:
    """dy = 0 must yield exactly zero gradients (linearity)."""
    lane = _random_lane(rng, length, n)
    grads = scan_vjp(lane, np.zeros(length))
    worst = 0.0
    for key in ("abar", "bx", "c", "x_raw"):
        worst = max(worst, float(np.abs(grads[key]).max()))
    worst = max(worst, abs(grads["d_skip"]))
    return worst


def check_mean_pool_gradient(rng, w=7) -> float:
    """Mean pool of one row: upstream g arrives at each column as g / w."""
    x = rng.standard_normal(w)
    g_up = float(rng.standard_normal())
    analytic = np.full(w, g_up / w)
    numeric = central_difference(lambda v: float(v.sum() / w * g_up), x)
    return _rel_err(analytic, numeric)


def check_repeat_gradient(rng, h=3, w=5) -> float:
    """Repeat across a row: gradient of each pooled entry is the row-sum."""
    y = rng.standard_normal(h)
    upstream = rng.standard_normal((h, w))
    analytic = upstream.sum(axis=1)
    numeric = central_difference(
        lambda v: float((np.repeat(v[:, None], w, axis=1) * upstream).sum()), y)
    return _rel_err(analytic, numeric)


def run_gradcheck(seed: int = 0, threshold: float = THRESHOLD) -> dict:
    """Default-size gradient verification; deterministic per seed."""
    rng = np.random.default_rng(seed)
    cases = []

    for length, n in ((1, 1), (3, 2), (16, 8), (32, 4), (64, 16)):
        err = check_lane(rng, length, n)
        cases.append({"name": f"lane_T{length}_N{n}", "max_rel_err": err,
                      "pass": bool(err < threshold)})

    for h, w, n in ((4, 3, 2), (8, 5, 4)):
        err = check_composite(rng, h, w, n)
        cases.append({"name": f"pool_scan_repeat_{h}x{w}_N{n}", "max_rel_err": err,
                      "pass": bool(err < threshold)})

    err = check_zero_upstream(rng)
    cases.append({"name": "zero_upstream_exact", "max_rel_err": err,
                  "pass": bool(err == 0.0)})

    err = check_mean_pool_gradient(rng)
    cases.append({"name": "mean_pool_broadcast_over_w", "max_rel_err": err,
                  "pass": bool(err < threshold)})

    err = check_repeat_gradient(rng)
    cases.append({"name": "repeat_row_sum", "max_rel_err": err,
                  "pass": bool(err < threshold)})

    return {
        "seed": int(seed),
        "threshold": threshold,
        "cases": cases,
        "all_pass": all(case["pass"] for case in cases),
    }
