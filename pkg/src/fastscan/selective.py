"""Selective state-space scan: projection, ZOH discretization, scans, gradients.

The recurrence is diagonal: per channel d and state n,

    h_t = abar_t * h_{t-1} + bbar_t * x_t
    y_t = <c_t, h_t> + d_skip * x_t

with abar/bbar produced by zero-order-hold discretization of a continuous
system with strictly negative decay. B, C and the step size are projected
from the input tokens, so the recurrence is time-varying and must be run as
a scan rather than a convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .grid import TokenGrid

# Below this |dt * a| the exact ZOH input coefficient collapses to its
# removable-singularity limit dt * b.
ZOH_LIMIT_THRESHOLD = 1e-8

ZOH_EXACT = "zoh_exact"
ZOH_SIMPLIFIED = "zoh_simplified"


def softplus(x):
    """log(1 + exp(x)), computed stably. softplus(0) = ln 2."""
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class SelectiveSSMParams:
    """Learned quantities for one scan direction.

    The decay matrix is stored as a_log with A = -exp(a_log), which keeps
    every entry strictly negative regardless of parameter values. w_b / w_c
    project tokens to the N-dimensional input/output couplings, w_dt to the
    scalar step-size logit that is broadcast over channels and shifted by
    dt_bias before the softplus.
    """

    a_log: np.ndarray    # (D, N)
    d_skip: np.ndarray   # (D,)
    dt_bias: np.ndarray  # (D,)
    w_b: np.ndarray      # (D, N)
    w_c: np.ndarray      # (D, N)
    w_dt: np.ndarray     # (D,)
    b_b: np.ndarray | None = None  # optional bias on the B projection

    def __post_init__(self):
        a_log = np.asarray(self.a_log, dtype=np.float64)
        if a_log.ndim != 2:
            raise ShapeError("a_log must be (D, N)")
        d, n = a_log.shape
        for name, arr, shape in (
            ("d_skip", self.d_skip, (d,)),
            ("dt_bias", self.dt_bias, (d,)),
            ("w_b", self.w_b, (d, n)),
            ("w_c", self.w_c, (d, n)),
            ("w_dt", self.w_dt, (d,)),
        ):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        if self.b_b is not None:
            b_b = np.asarray(self.b_b, dtype=np.float64)
            if b_b.shape != (n,):
                raise ShapeError(f"b_b must have shape ({n},), got {b_b.shape}")
            object.__setattr__(self, "b_b", b_b)
        object.__setattr__(self, "a_log", a_log)

    @property
    def dim(self) -> int:
        return self.a_log.shape[0]

    @property
    def n_states(self) -> int:
        return self.a_log.shape[1]

    @property
    def a(self) -> np.ndarray:
        """Decay matrix, entrywise strictly negative."""
        return -np.exp(self.a_log)


@dataclass(frozen=True)
class ScanLane:
    """One (batch, channel) sequence of discretized scan inputs.

    abar, bx and c are (T, N); x_raw holds the pre-scan activations feeding
    the skip term d_skip * x_raw.
    """

    abar: np.ndarray
    bx: np.ndarray
    c: np.ndarray
    x_raw: np.ndarray
    d_skip: float = 0.0

    def __post_init__(self):
        abar = np.asarray(self.abar, dtype=np.float64)
        if abar.ndim != 2 or abar.shape[0] < 1:
            raise ShapeError("abar must be (T, N) with T >= 1")
        for name in ("bx", "c"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != abar.shape:
                raise ShapeError(f"{name} must match abar shape {abar.shape}")
            object.__setattr__(self, name, arr)
        x_raw = np.asarray(self.x_raw, dtype=np.float64)
        if x_raw.shape != (abar.shape[0],):
            raise ShapeError(f"x_raw must be (T,) = ({abar.shape[0]},)")
        object.__setattr__(self, "abar", abar)
        object.__setattr__(self, "x_raw", x_raw)
        object.__setattr__(self, "d_skip", float(self.d_skip))

    @property
    def length(self) -> int:
        return self.abar.shape[0]


def project_tokens(x: np.ndarray, params: SelectiveSSMParams):
    """Project tokens (..., D) to (B, C, dt) of shapes (..., N), (..., N), (..., D).

    B = x @ w_b (+ bias), C = x @ w_c, dt = softplus(dt_bias + broadcast(x @ w_dt)).
    dt is entrywise positive by construction.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.dim:
        raise ShapeError(f"tokens have dim {x.shape[-1]}, params expect {params.dim}")
    b = x @ params.w_b
    if params.b_b is not None:
        b = b + params.b_b
    c = x @ params.w_c
    dt = softplus(params.dt_bias + (x @ params.w_dt)[..., None])
    return b, c, dt


def project_selective(x_pooled: TokenGrid, params: SelectiveSSMParams):
    """Selective projection of an already-pooled grid (w = 1).

    Returns (B, C, dt) with shapes (batch, h, N), (batch, h, N), (batch, h, D).
    """
    if x_pooled.w != 1:
        raise ShapeError(f"expected a pooled grid with w = 1, got w = {x_pooled.w}")
    tokens = x_pooled.values[:, :, 0, :]
    return project_tokens(tokens, params)


def discretize(dt: np.ndarray, params: SelectiveSSMParams, b: np.ndarray,
               mode: str = ZOH_EXACT):
    """Zero-order-hold discretization.

    dt: (..., D) positive step sizes; b: (..., N) input couplings. Returns
    (abar, bbar), both (..., D, N), with abar = exp(dt * a) in (0, 1).

    zoh_exact follows abar = exp(dt*a), bbar = (dt*a)^-1 (exp(dt*a) - 1) dt*b
    per scalar entry (diagonal decay), switching to the limit dt*b when
    |dt*a| < 1e-8. zoh_simplified uses bbar = dt*b directly.
    """
    dt = np.asarray(dt, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(dt <= 0.0):
        raise DomainError("dt must be entrywise positive")
    if dt.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"dt leading shape {dt.shape[:-1]} != b leading shape {b.shape[:-1]}")
    a = params.a  # (D, N)
    z = dt[..., :, None] * a
    abar = np.exp(z)
    dtb = dt[..., :, None] * b[..., None, :]
    if mode == ZOH_SIMPLIFIED:
        return abar, dtb
    if mode != ZOH_EXACT:
        raise ValueError(f"unknown discretization mode {mode!r}")
    small = np.abs(z) < ZOH_LIMIT_THRESHOLD
    safe = np.where(small, 1.0, z)
    factor = np.where(small, 1.0, np.expm1(z) / safe)
    return abar, factor * dtb


def scan_depth(length: int) -> int:
    """Sequential combine rounds of the Blelloch scan: 2*ceil(log2 T), 0 for T = 1."""
    if length < 1:
        raise DomainError("scan length must be >= 1")
    if length == 1:
        return 0
    return 2 * (length - 1).bit_length()


def scan_sequential_stack(abar: np.ndarray, bx: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Reference recurrence over stacked lanes.

    abar, bx, c: (T, ..., N); returns y (T, ...) with h_0 = 0. The loop runs
    the T steps strictly in order, so the result is the semantic ground truth
    the parallel scan is checked against.
    """
    length = abar.shape[0]
    h = np.zeros(abar.shape[1:])
    y = np.empty(abar.shape[:-1])
    tmp = np.empty_like(h)
    for t in range(length):
        np.multiply(h, abar[t], out=h)
        np.add(h, bx[t], out=h)
        np.multiply(c[t], h, out=tmp)
        y[t] = tmp.sum(axis=-1)
    return y


def scan_parallel_stack(abar: np.ndarray, bx: np.ndarray, c: np.ndarray):
    """Blelloch scan over stacked lanes; returns (y, depth).

    Scans the associative monoid (a1, b1) + (a2, b2) = (a2*a1, a2*b1 + b2)
    over elements (abar_t, bx_t); positions are padded to the next power of
    two with identity elements (a = 1, b = 0) and the padded outputs
    discarded. The combine tree is fixed, so results are deterministic
    regardless of how lanes are scheduled. In exact arithmetic y equals
    scan_sequential_stack.
    """
    length = abar.shape[0]
    trail = abar.shape[1:]
    if length == 1:
        return (c[0] * bx[0]).sum(axis=-1)[None, ...], 0
    padded = 1 << (length - 1).bit_length()
    k = int(np.prod(trail))
    a = np.ones((padded, k))
    b = np.zeros((padded, k))
    a[:length] = abar.reshape(length, k)
    b[:length] = bx.reshape(length, k)

    depth = 0
    stride = 1
    while stride < padded:  # up-sweep: reduce segments bottom-up
        va = a.reshape(padded // (2 * stride), 2 * stride, k)
        vb = b.reshape(padded // (2 * stride), 2 * stride, k)
        left_a = va[:, stride - 1]
        left_b = vb[:, stride - 1]
        right_a = va[:, 2 * stride - 1].copy()
        vb[:, 2 * stride - 1] = right_a * left_b + vb[:, 2 * stride - 1]
        va[:, 2 * stride - 1] = right_a * left_a
        stride *= 2
        depth += 1

    a[padded - 1] = 1.0
    b[padded - 1] = 0.0
    stride = padded // 2
    while stride >= 1:  # down-sweep: push exclusive prefixes back down
        va = a.reshape(padded // (2 * stride), 2 * stride, k)
        vb = b.reshape(padded // (2 * stride), 2 * stride, k)
        t_a = va[:, stride - 1].copy()
        t_b = vb[:, stride - 1].copy()
        va[:, stride - 1] = va[:, 2 * stride - 1]
        vb[:, stride - 1] = vb[:, 2 * stride - 1]
        vb[:, 2 * stride - 1] = t_a * vb[:, 2 * stride - 1] + t_b
        va[:, 2 * stride - 1] = t_a * va[:, 2 * stride - 1]
        stride //= 2
        depth += 1

    # Exclusive prefix (a, b) composed over steps < t; with h_0 = 0 the
    # inclusive state is h_t = abar_t * b_excl + bx_t.
    excl_b = b[:length].reshape((length,) + trail)
    h = abar * excl_b + bx
    y = (c * h).sum(axis=-1)
    return y, depth


def combine(first, second):
    """The scan monoid: compose (a1, b1) then (a2, b2) -> (a2*a1, a2*b1 + b2)."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def _with_skip(y: np.ndarray, lane: ScanLane) -> np.ndarray:
    if lane.d_skip == 0.0:
        return y
    return y + lane.d_skip * lane.x_raw


def scan_sequential(lane: ScanLane) -> np.ndarray:
    """y_t = <c_t, h_t> + d_skip * x_raw_t with the recurrence run step by step."""
    y = scan_sequential_stack(lane.abar, lane.bx, lane.c)
    return _with_skip(y, lane)


def scan_parallel(lane: ScanLane):
    """Blelloch scan of one lane; returns (y, depth). See scan_parallel_stack."""
    y, depth = scan_parallel_stack(lane.abar, lane.bx, lane.c)
    return _with_skip(y, lane), depth


def scan_vjp(lane: ScanLane, dy: np.ndarray):
    """Analytic reverse pass of scan_sequential.

    With lam_{T+1} = 0 and lam_t = c_t * dy_t + abar_{t+1} * lam_{t+1}:

        d_bx_t   = lam_t
        d_abar_t = lam_t * h_{t-1}
        d_c_t    = dy_t * h_t
        d_x_raw  = d_skip * dy
        d_d_skip = sum_t dy_t * x_raw_t

    The forward state trajectory is recomputed. Returns a dict with keys
    abar, bx, c, x_raw, d_skip.
    """
    dy = np.asarray(dy, dtype=np.float64)
    length, n = lane.abar.shape
    if dy.shape != (length,):
        raise ShapeError(f"dy must be (T,) = ({length},)")

    h = np.zeros((length + 1, n))
    for t in range(length):
        h[t + 1] = lane.abar[t] * h[t] + lane.bx[t]

    d_abar = np.empty((length, n))
    d_bx = np.empty((length, n))
    d_c = np.empty((length, n))
    lam = np.zeros(n)
    for t in range(length - 1, -1, -1):
        if t + 1 < length:
            lam = lane.c[t] * dy[t] + lane.abar[t + 1] * lam
        else:
            lam = lane.c[t] * dy[t]
        d_bx[t] = lam
        d_abar[t] = lam * h[t]
        d_c[t] = dy[t] * h[t + 1]

    return {
        "abar": d_abar,
        "bx": d_bx,
        "c": d_c,
        "x_raw": lane.d_skip * dy,
        "d_skip": float(np.dot(dy, lane.x_raw)),
    }


def reverse_sequence(seq: np.ndarray, axis: int = 0) -> np.ndarray:
    """Exact order reversal along one axis; involution. Returns a copy."""
    return np.ascontiguousarray(np.flip(np.asarray(seq), axis=axis))
