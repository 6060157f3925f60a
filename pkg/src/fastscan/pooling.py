"""Width-axis compression before the scan and decompression after it.

pool_width collapses each row's w tokens to one token; repeat_width
broadcasts each pooled token back across its row. Together they bracket the
scan, so the per-block token count is unchanged while the recurrence runs
over h instead of h*w steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .grid import TokenGrid

MEAN = "mean"
MAX = "max"
ATTENTION = "attention"


@dataclass(frozen=True)
class PoolMode:
    """Pooling flavor; attention mode carries a D -> 1 score projection."""

    tag: str = MEAN
    score_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.tag not in (MEAN, MAX, ATTENTION):
            raise ValueError(f"unknown pooling mode {self.tag!r}")
        has_scores = self.score_weights is not None
        if has_scores != (self.tag == ATTENTION):
            raise ValueError("score weights must be present iff mode is attention")
        if has_scores:
            w = np.asarray(self.score_weights, dtype=np.float64)
            if w.ndim != 1:
                raise ShapeError("score weights must be a length-D vector")
            object.__setattr__(self, "score_weights", w)

    @classmethod
    def mean(cls) -> "PoolMode":
        return cls(MEAN)

    @classmethod
    def max(cls) -> "PoolMode":
        return cls(MAX)

    @classmethod
    def attention(cls, score_weights: np.ndarray) -> "PoolMode":
        return cls(ATTENTION, score_weights)


def _mean_over_width(values: np.ndarray) -> np.ndarray:
    # Pivoted mean: v0 + sum(vj - v0)/w, deltas accumulated left to right.
    # Unlike the naive running sum, this reproduces the common value exactly
    # when all columns agree, which makes pool(repeat(p)) == p bit-exact.
    w = values.shape[2]
    pivot = values[:, :, 0, :]
    if w == 1:
        return pivot.copy()
    acc = values[:, :, 1, :] - pivot
    for j in range(2, w):
        acc = acc + (values[:, :, j, :] - pivot)
    return pivot + acc / w


def _max_over_width(values: np.ndarray) -> np.ndarray:
    out = values[:, :, 0, :].copy()
    for j in range(1, values.shape[2]):
        np.maximum(out, values[:, :, j, :], out=out)
    return out


def _attention_over_width(values: np.ndarray, score_weights: np.ndarray) -> np.ndarray:
    if score_weights.shape[0] != values.shape[3]:
        raise ShapeError(
            f"score weights have dim {score_weights.shape[0]}, grid has {values.shape[3]}"
        )
    scores = values @ score_weights            # (b, h, w)
    scores = scores - scores.max(axis=2, keepdims=True)
    alpha = np.exp(scores)
    alpha = alpha / alpha.sum(axis=2, keepdims=True)
    out = alpha[:, :, 0, None] * values[:, :, 0, :]
    for j in range(1, values.shape[2]):
        out = out + alpha[:, :, j, None] * values[:, :, j, :]
    return out


def pool_width(g: TokenGrid, mode: PoolMode = PoolMode.mean()) -> TokenGrid:
    """Collapse the width axis to a single token per row.

    mean averages the row, max takes the entrywise maximum, attention takes
    a softmax-weighted sum with per-token scores <token, score_weights>.
    Reduction order within a row is fixed (left to right), so results are
    deterministic across runs and thread counts.
    """
    if mode.tag == MEAN:
        pooled = _mean_over_width(g.values)
    elif mode.tag == MAX:
        pooled = _max_over_width(g.values)
    else:
        pooled = _attention_over_width(g.values, mode.score_weights)
    return TokenGrid(pooled[:, :, None, :], g.orientation)


def repeat_width(g: TokenGrid, w_target: int) -> TokenGrid:
    """Broadcast each pooled token back across w_target columns."""
    if w_target < 1:
        raise DomainError(f"w_target must be >= 1, got {w_target}")
    if g.w != 1:
        raise ShapeError(f"repeat_width needs a pooled grid (w = 1), got w = {g.w}")
    repeated = np.broadcast_to(
        g.values, (g.batch, g.h, w_target, g.dim)
    ).copy()
    return TokenGrid(repeated, g.orientation)
