"""Rectified-Gaussian analysis of the pruning ratio Q_p/Q.

With pre-ReLU activations i.i.d. N(mu, sigma^2), write gamma = mu/sigma,
A = Phi(-gamma), B = phi(-gamma) and C(p) for the standard-normal hazard at
the p-quantile. Then

    E[a]  = mu (1 - A) + sigma B                       (rectified mean)
    E[h]  = mu + sigma phi(m) / (1 - Phi(m))           (mean above s, m = (s - mu)/sigma)
    beta  = (1 - p) Q / Q_p = E[a] / E[h]
    beta ~= gamma (1 - A) / (gamma + C)                (dropping sigma B)

Larger beta means a smaller Q_p/Q. The Monte Carlo helpers draw with the exact
percentile conventions of `shaping` and serve as oracles for the closed forms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, PrecisionError
from .rng import run_sharded
from .shaping import batch_scale_factors

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# 2p - 1 cannot resolve 1 - p below this
P_MAX = 1.0 - 1e-12


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ConfigError(f"Gaussian parameters must be finite, got ({self.mu}, {self.sigma}).")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}.")

    @property
    def gamma(self) -> float:
        return self.mu / self.sigma


@dataclass(frozen=True)
class TheoryQuantities:
    gamma: float
    A: float
    B: float
    C: float
    beta: float
    beta_approx: float


@dataclass(frozen=True)
class DeltaRegion:
    """Valid C(p) region of the expanded beta inequality a1 C^2 + a2 C + a3 >= 0."""
    delta: float
    a1: float
    a2: float
    a3: float
    all_valid: bool
    c_lower_bound: float  # 0.0 means the open bound 0+

    def quadratic(self, c):
        return self.a1 * np.square(c) + self.a2 * np.asarray(c) + self.a3

    def contains(self, c: float) -> bool:
        return c > 0 and (self.all_valid or c >= self.c_lower_bound)


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    n_used: int
    n_degenerate: int = 0


# ---------------------------------------------------------------------------
# standard normal


def std_normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return INV_SQRT_2PI * np.exp(-0.5 * x * x)


def std_normal_cdf(x):
    return special.ndtr(np.asarray(x, dtype=np.float64))


def std_normal_sf(x):
    """1 - Phi(x) without cancellation."""
    return special.ndtr(-np.asarray(x, dtype=np.float64))


def erf_inv(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.abs(y) >= 1.0):
        raise PrecisionError("erf_inv is only finite on (-1, 1).")
    return special.erfinv(y)


def _quantile(p: float) -> float:
    if not (0.0 < p < 1.0):
        raise ConfigError(f"p must lie in (0, 1), got {p}.")
    if p >= P_MAX:
        raise PrecisionError(f"p = {p!r} is too close to 1 for a stable quantile.")
    return float(SQRT2 * erf_inv(2.0 * p - 1.0))


def hazard(m: float) -> float:
    """phi(m) / (1 - Phi(m))."""
    sf = float(std_normal_sf(m))
    if sf < np.finfo(np.float64).tiny:
        raise PrecisionError(f"1 - Phi({m:g}) underflows.")
    return float(std_normal_pdf(m)) / sf


# ---------------------------------------------------------------------------
# closed forms


def rectified_moment(params: GaussianParams) -> float:
    """E[max(0, X)] for X ~ N(mu, sigma^2)."""
    g = params.gamma
    return params.mu * float(std_normal_cdf(g)) + float(std_normal_pdf(-g)) * params.sigma


def truncated_moment(params: GaussianParams, s: float) -> float:
    """E[X | X > s] for X ~ N(mu, sigma^2)."""
    if not math.isfinite(s):
        raise ConfigError(f"truncation point must be finite, got {s}.")
    return params.mu + params.sigma * hazard((s - params.mu) / params.sigma)


def c_of_p(p: float) -> float:
    """C(p): standard-normal hazard at the p-quantile. Independent of (mu, sigma)."""
    return hazard(_quantile(p))


def truncation_point(params: GaussianParams, p: float) -> float:
    return params.mu + params.sigma * _quantile(p)


def beta_exact(params: GaussianParams, p: float) -> float:
    return rectified_moment(params) / truncated_moment(params, truncation_point(params, p))


def beta_approx(gamma: float, p: float) -> float:
    if not gamma > 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}.")
    a = float(std_normal_cdf(-gamma))
    return gamma * (1.0 - a) / (gamma + c_of_p(p))


def theory_quantities(params: GaussianParams, p: float) -> TheoryQuantities:
    g = params.gamma
    return TheoryQuantities(
        gamma=g,
        A=float(std_normal_cdf(-g)),
        B=float(std_normal_pdf(-g)),
        C=c_of_p(p),
        beta=beta_exact(params, p),
        beta_approx=beta_approx(g, p) if g > 0 else float("nan"),
    )


def delta_discriminant(gamma_id: float, gamma_ood: float) -> DeltaRegion:
    """Discriminant of the first-order beta_ID >= beta_OOD condition and its valid C range."""
    if not (gamma_id > 0 and gamma_ood > 0):
        raise ConfigError("both gammas must be > 0.")
    if not gamma_id > gamma_ood:
        raise ConfigError(f"requires gamma_id > gamma_ood, got {gamma_id} <= {gamma_ood}.")
    gi, go = 1.0 / gamma_id, 1.0 / gamma_ood
    ratio = float(std_normal_cdf(gamma_id) / std_normal_cdf(gamma_ood))  # (1 - A_ID) / (1 - A_OOD)
    a1 = gi * go
    a2 = -(gi - go)
    a3 = ratio - 1.0
    delta = (gi + go) ** 2 - 4.0 * a1 * ratio
    if delta <= 0:
        return DeltaRegion(delta, a1, a2, a3, True, 0.0)
    root = (-a2 + math.sqrt(delta)) / (2.0 * a1)
    return DeltaRegion(delta, a1, a2, a3, False, max(root, 0.0))


# ---------------------------------------------------------------------------
# Monte Carlo oracles


def _estimate(values: np.ndarray, n_degenerate: int = 0) -> MonteCarloEstimate:
    n = int(values.size)
    if n == 0:
        return MonteCarloEstimate(float("nan"), float("nan"), 0, n_degenerate)
    # a single draw carries no spread estimate
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MonteCarloEstimate(float(values.mean()), se, n, n_degenerate)


def mc_rectified_moment(params: GaussianParams, n_draws: int, seed: int, threads: int = 1) -> MonteCarloEstimate:
    parts = run_sharded(
        n_draws, seed, lambda rng, rows: np.maximum(rng.normal(params.mu, params.sigma, rows), 0.0),
        threads, shard_rows=65536,
    )
    return _estimate(np.concatenate(parts))


def mc_truncated_moment(
    params: GaussianParams, s: float, n_draws: int, seed: int, threads: int = 1
) -> MonteCarloEstimate:
    """Mean of the draws above s out of n_draws Gaussian draws."""
    def _draw(rng, rows):
        x = rng.normal(params.mu, params.sigma, rows)
        return x[x > s]

    return _estimate(np.concatenate(run_sharded(n_draws, seed, _draw, threads, shard_rows=65536)))


def mc_beta(params: GaussianParams, p: float, n_draws: int, seed: int, threads: int = 1) -> MonteCarloEstimate:
    """E[a]/E[h] from independent draws; standard error by the delta method."""
    ra = mc_rectified_moment(params, n_draws, seed, threads)
    th = mc_truncated_moment(params, truncation_point(params, p), n_draws, seed + 1, threads)
    ratio = ra.mean / th.mean
    se = abs(ratio) * math.sqrt((ra.stderr / ra.mean) ** 2 + (th.stderr / th.mean) ** 2)
    return MonteCarloEstimate(ratio, se, min(ra.n_used, th.n_used))


def monte_carlo_qp_ratio(
    params: GaussianParams, p: float, D: int, n_samples: int, seed: int, threads: int = 1
) -> MonteCarloEstimate:
    """Mean and standard error of per-sample Q_p/Q over rectified Gaussian vectors of length D."""
    if D < 2 or n_samples < 1:
        raise ConfigError("monte_carlo_qp_ratio needs D >= 2 and n_samples >= 1.")

    def _draw(rng, rows):
        a = np.maximum(rng.normal(params.mu, params.sigma, (rows, D)), 0.0)
        sf = batch_scale_factors(a, p)
        ok = ~sf.degenerate
        return sf.sum_kept[ok] / sf.sum_all[ok], int(sf.degenerate.sum())

    parts = run_sharded(n_samples, seed, _draw, threads)
    ratios = np.concatenate([r for r, _ in parts])
    return _estimate(ratios, sum(d for _, d in parts))


def theory_table(
    p_grid: Sequence[float],
    id_params: GaussianParams,
    ood_params: GaussianParams,
    *,
    D: int = 2048,
    n_samples: int = 1000,
    seed: int = 0,
    threads: int = 1,
    monte_carlo: bool = True,
) -> List[Dict[str, Optional[float]]]:
    """Rows of C(p), exact/approximate beta and Monte Carlo Q_p/Q for both distributions."""
    rows = []
    for p in p_grid:
        row: Dict[str, Optional[float]] = {
            "p": float(p),
            "C": c_of_p(p),
            "beta_id": beta_exact(id_params, p),
            "beta_ood": beta_exact(ood_params, p),
            "beta_approx_id": beta_approx(id_params.gamma, p) if id_params.gamma > 0 else None,
            "beta_approx_ood": beta_approx(ood_params.gamma, p) if ood_params.gamma > 0 else None,
            "mc_qp_ratio_id": None,
            "mc_qp_ratio_ood": None,
        }
        if monte_carlo:
            row["mc_qp_ratio_id"] = monte_carlo_qp_ratio(id_params, p, D, n_samples, seed, threads).mean
            row["mc_qp_ratio_ood"] = monte_carlo_qp_ratio(ood_params, p, D, n_samples, seed + 1, threads).mean
        rows.append(row)
    return rows
