"""Activation shaping of penultimate features: SCALE, ASH-S, pruning and ReAct.

Percentiles use the nearest-rank convention: with the D activations of a sample
sorted ascending, P_p(a) is the value at 1-based rank ceil(p*D). Entries
less than or equal to P_p(a) are pruned (ties at the threshold included);
p = 0 prunes nothing. The scale factor is r = Q / Q_p where Q sums every
activation and Q_p sums the entries strictly above P_p(a).

Every vector operation has a row-wise batch counterpart; the vector form is
the batch form applied to a single row, so both give identical numbers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np

from .errors import DegenerateSampleError, ShapingError
from .ingest import LinearHead

logger = logging.getLogger(__name__)

Method = Literal["identity", "scale", "ash_s", "prune", "react"]
METHODS: Tuple[str, ...] = ("identity", "scale", "ash_s", "prune", "react")

# exp(r) overflows float64 beyond this
MAX_LOG_SCALE = math.log(np.finfo(np.float64).max)

# absorbs representation error in p*D (0.7*10 == 7.000000000000001)
_RANK_EPS = 1e-9


@dataclass(frozen=True)
class ShapingConfig:
    method: Method = "identity"
    percentile: float = 0.85
    clip_threshold: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ShapingError(f"Unknown shaping method '{self.method}'. Supported: {', '.join(METHODS)}.")
        if not (0.0 <= self.percentile < 1.0):
            raise ShapingError(f"percentile must lie in [0, 1), got {self.percentile}.")
        if self.method == "react":
            c = self.clip_threshold
            if c is None or not math.isfinite(c) or c <= 0:
                raise ShapingError(f"react needs a finite positive clip threshold, got {c}.")

    @property
    def needs_factor(self) -> bool:
        return self.method in ("scale", "ash_s")


@dataclass(frozen=True)
class ScaleResult:
    """Threshold P_p(a), sums Q and Q_p, and factor r = Q / Q_p for one sample."""
    threshold: float
    sum_all: float
    sum_kept: float
    factor: float


@dataclass(frozen=True)
class BatchScaleResult:
    thresholds: np.ndarray
    sum_all: np.ndarray
    sum_kept: np.ndarray
    factors: np.ndarray  # NaN on degenerate rows
    degenerate: np.ndarray


@dataclass(frozen=True)
class BatchShapeResult:
    shaped: np.ndarray  # NaN rows where `degenerate`
    factors: np.ndarray
    degenerate: np.ndarray

    @property
    def n_degenerate(self) -> int:
        return int(self.degenerate.sum())


def nearest_rank(p: float, n: int) -> int:
    """1-based rank ceil(p*n); 0 means no threshold."""
    if not (0.0 <= p < 1.0):
        raise ShapingError(f"percentile must lie in [0, 1), got {p}.")
    return max(0, int(math.ceil(p * n - _RANK_EPS)))


def _as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[1] == 0:
        raise ShapingError("activation vector is empty.")
    if not np.isfinite(m).all():
        raise ShapingError("activations must be finite.")
    return m


def _as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapingError("activation vector is empty.")
    return v


def batch_thresholds(matrix, p: float) -> np.ndarray:
    m = _as_matrix(matrix)
    k = nearest_rank(p, m.shape[1])
    if k == 0:
        return np.full(m.shape[0], -np.inf)
    return np.partition(m, k - 1, axis=1)[:, k - 1]


def batch_scale_factors(matrix, p: float) -> BatchScaleResult:
    m = _as_matrix(matrix)
    thr = batch_thresholds(m, p)
    kept = m > thr[:, None]
    q = m.sum(axis=1)
    qp = np.where(kept, m, 0.0).sum(axis=1)
    ok = qp > 0
    r = np.full(m.shape[0], np.nan)
    r[ok] = q[ok] / qp[ok]
    ok &= r <= MAX_LOG_SCALE
    r[~ok] = np.nan
    return BatchScaleResult(thr, q, qp, r, ~ok)


def percentile_threshold(a, p: float) -> float:
    """Nearest-rank p-th percentile of `a`; -inf for p = 0 (prune nothing)."""
    return float(batch_thresholds(_as_vector(a), p)[0])


def activation_sums(a, p: float, index: Optional[int] = None) -> ScaleResult:
    res = batch_scale_factors(_as_vector(a), p)
    if res.degenerate[0]:
        if res.sum_kept[0] > 0:
            raise DegenerateSampleError(f"exp(r) overflows (Q/Q_p = {res.sum_all[0] / res.sum_kept[0]:.6g}).", index)
        raise DegenerateSampleError(f"no activation mass above the {p:g} percentile (Q_p = 0).", index)
    return ScaleResult(
        threshold=float(res.thresholds[0]),
        sum_all=float(res.sum_all[0]),
        sum_kept=float(res.sum_kept[0]),
        factor=float(res.factors[0]),
    )


def shape_batch(matrix, config: ShapingConfig) -> BatchShapeResult:
    """Apply `config` to every row. Degenerate rows are flagged, not raised."""
    m = _as_matrix(matrix)
    sf = batch_scale_factors(m, config.percentile)
    method = config.method
    if method == "identity":
        shaped = m.copy()
    elif method == "react":
        shaped = np.minimum(m, config.clip_threshold)
    else:
        kept = m > sf.thresholds[:, None]
        if method == "prune":
            shaped = np.where(kept, m, 0.0)
        else:
            scale = np.exp(np.where(sf.degenerate, 0.0, sf.factors))[:, None]
            shaped = m * scale if method == "scale" else np.where(kept, m * scale, 0.0)
    degenerate = sf.degenerate if config.needs_factor else np.zeros(m.shape[0], dtype=bool)
    if degenerate.any():
        shaped[degenerate] = np.nan
        logger.debug("%d degenerate rows under %s at p=%g", int(degenerate.sum()), method, config.percentile)
    return BatchShapeResult(shaped, sf.factors, degenerate)


def _shape_one(a, config: ShapingConfig) -> np.ndarray:
    v = _as_vector(a)
    if config.needs_factor:
        activation_sums(v, config.percentile)
    return shape_batch(v, config).shaped[0]


def shape_scale(a, p: float) -> np.ndarray:
    """SCALE: every activation times exp(r); ordering of entries is preserved."""
    return _shape_one(a, ShapingConfig("scale", p))


def shape_ash_s(a, p: float) -> np.ndarray:
    """ASH-S: zero entries <= P_p(a), multiply the rest by exp(r)."""
    return _shape_one(a, ShapingConfig("ash_s", p))


def shape_prune(a, p: float) -> np.ndarray:
    """Zero entries <= P_p(a), keep the rest unchanged."""
    return _shape_one(a, ShapingConfig("prune", p))


def shape_react(a, c: float) -> np.ndarray:
    """ReAct: clip each activation at c."""
    return _shape_one(a, ShapingConfig("react", clip_threshold=c))


def shape(a, config: ShapingConfig) -> np.ndarray:
    return _shape_one(a, config)


def react_threshold(pooled, percentile: float = 0.90) -> float:
    """Clip threshold as the nearest-rank percentile of pooled activations."""
    flat = np.asarray(pooled, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ShapingError("cannot derive a ReAct threshold from an empty pool.")
    c = percentile_threshold(flat, percentile)
    if not (c > 0):
        raise ShapingError(f"ReAct threshold at percentile {percentile:g} is {c:g}; need a positive value.")
    return c


def apply_head(a_shaped, head: LinearHead) -> np.ndarray:
    """Logits z = W a + b for one vector (K,) or a batch of rows (N, K)."""
    a = np.asarray(a_shaped, dtype=np.float64)
    if a.shape[-1] != head.dim:
        raise ShapingError(f"dimension mismatch: activations have D={a.shape[-1]}, head expects D={head.dim}.")
    return a @ head.weights.T + head.bias
