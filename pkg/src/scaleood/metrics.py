"""Separation metrics, activation diagnostics and the evaluation report."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import MetricError
from .ingest import FeatureSet, LinearHead, PreActSet
from .scoring import ScoringConfig, pipeline_scores
from .shaping import ShapingConfig, apply_head, batch_scale_factors, shape_batch, activation_sums

logger = logging.getLogger(__name__)

_RANK_EPS = 1e-9


# ---------------------------------------------------------------------------
# separation


def _scores(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise MetricError(f"{name} is empty.")
    return arr


def auroc(id_scores, ood_scores) -> float:
    """P(id > ood) + 0.5 P(id == ood) over all pairs, via midrank sums."""
    s_id = _scores(id_scores, "id_scores")
    s_ood = _scores(ood_scores, "ood_scores")
    n_id, n_ood = s_id.size, s_ood.size
    ranks = stats.rankdata(np.concatenate([s_id, s_ood]), method="average")
    u = ranks[:n_id].sum() - n_id * (n_id + 1) / 2.0
    return float(u / (n_id * n_ood))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """Fraction of OOD scores accepted at the threshold that keeps tpr_target of ID.

    The threshold is the k-th largest ID score, k = ceil(tpr_target * n_id)
    (nearest rank); a sample is accepted as ID when its score is at least
    that value.
    """
    s_id = _scores(id_scores, "id_scores")
    s_ood = _scores(ood_scores, "ood_scores")
    if not (0.0 < tpr_target <= 1.0):
        raise MetricError(f"tpr_target must lie in (0, 1], got {tpr_target}.")
    k = max(1, int(math.ceil(tpr_target * s_id.size - _RANK_EPS)))
    tau = np.sort(s_id)[::-1][k - 1]
    return float(np.mean(s_ood >= tau))


def id_accuracy(features: FeatureSet, head: LinearHead, shaping: ShapingConfig) -> float:
    if features.labels is None:
        raise MetricError(f"{features.tag or 'feature set'} has no labels; ID accuracy needs labels.")
    features.check_labels(head.n_classes)
    shaped = shape_batch(features.data, shaping)
    ok = ~shaped.degenerate
    if not ok.any():
        raise MetricError("every sample is degenerate under this shaping.")
    if shaped.n_degenerate:
        logger.warning("id_accuracy: %d degenerate samples excluded", shaped.n_degenerate)
    pred = np.argmax(apply_head(shaped.shaped[ok], head), axis=1)
    return float(np.mean(pred == features.labels[ok]))


# ---------------------------------------------------------------------------
# activation diagnostics


@dataclass(frozen=True)
class ActivationStats:
    """Per-sample mean, unbiased std and mean/std of pre-ReLU activations."""
    tag: str
    means: np.ndarray
    stds: np.ndarray
    ratios: np.ndarray  # NaN where std == 0
    flagged: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.means.size)

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())

    @property
    def mean_mu(self) -> float:
        return float(self.means.mean())

    @property
    def mean_var(self) -> float:
        return float(np.mean(self.stds ** 2))

    @property
    def mean_ratio(self) -> float:
        valid = self.ratios[~self.flagged]
        return float(valid.mean()) if valid.size else float("nan")

    @property
    def ratio_se(self) -> float:
        valid = self.ratios[~self.flagged]
        if valid.size < 2:
            return float("nan")
        return float(valid.std(ddof=1) / math.sqrt(valid.size))


def activation_stats(preacts: PreActSet) -> ActivationStats:
    data = preacts.data
    if data.shape[1] < 2:
        raise MetricError("activation_stats needs D >= 2.")
    means = data.mean(axis=1)
    stds = data.std(axis=1, ddof=1)
    flagged = ~(stds > 0)
    ratios = np.full(means.shape, np.nan)
    ratios[~flagged] = means[~flagged] / stds[~flagged]
    if flagged.any():
        logger.info("%s: %d samples with zero spread (ratio undefined)", preacts.tag, int(flagged.sum()))
    return ActivationStats(preacts.tag, means, stds, ratios, flagged)


def chi_square_gaussian_p(sample, n_bins: int = 10) -> float:
    """Pearson goodness of fit against N(mu_hat, sigma_hat^2).

    Parameters are fitted by maximum likelihood, bins are equiprobable under
    the fitted normal, and the statistic is referred to chi-square with
    n_bins - 3 degrees of freedom.
    """
    x = np.asarray(sample, dtype=np.float64).reshape(-1)
    if n_bins < 4:
        raise MetricError(f"n_bins must be at least 4 (two fitted parameters), got {n_bins}.")
    expected = x.size / n_bins
    if expected < 5:
        raise MetricError(
            f"expected count per bin is {expected:.2f} < 5 for D={x.size}; use n_bins <= {max(x.size // 5, 1)}."
        )
    mu = x.mean()
    sigma = x.std()
    if not sigma > 0:
        raise MetricError("sample has zero spread; the normal fit is undefined.")
    edges = stats.norm.ppf(np.arange(1, n_bins) / n_bins, loc=mu, scale=sigma)
    observed = np.bincount(np.searchsorted(edges, x, side="right"), minlength=n_bins)
    chi2 = float(np.sum((observed - expected) ** 2) / expected)
    return float(stats.chi2.sf(chi2, n_bins - 3))


@dataclass(frozen=True)
class ScaleHistogram:
    counts: np.ndarray
    edges: np.ndarray
    n_degenerate: int


def scale_histogram(
    features: FeatureSet, p: float, n_bins: int = 50, range: Optional[Tuple[float, float]] = None
) -> ScaleHistogram:
    """Histogram of per-sample r = Q/Q_p; degenerate samples are counted apart."""
    sf = batch_scale_factors(features.data, p)
    r = sf.factors[~sf.degenerate]
    counts, edges = np.histogram(r, bins=n_bins, range=range)
    return ScaleHistogram(counts, edges, int(sf.degenerate.sum()))


def pruning_decrease(a, p: float) -> float:
    """(Q - Q_p) / Q: share of activation mass removed by pruning."""
    sf = batch_scale_factors(np.asarray(a, dtype=np.float64).reshape(1, -1), p)
    q = float(sf.sum_all[0])
    if not q > 0:
        raise MetricError("activation sum Q is zero; relative decrease undefined.")
    return (q - float(sf.sum_kept[0])) / q


def scaling_increase(a, p: float) -> float:
    """r - 1: relative increase applied by scaling."""
    return activation_sums(a, p).factor - 1.0


# ---------------------------------------------------------------------------
# evaluation report


@dataclass(frozen=True)
class EvalRow:
    method: str
    tag: str
    split: str
    fpr_at_95: float  # percent
    auroc: float  # percent
    n_id: int
    n_ood: int
    n_degenerate: int = 0
    id_accuracy: Optional[float] = None  # percent
    percentile: Optional[float] = None


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if not (0.0 <= r.auroc <= 100.0 and 0.0 <= r.fpr_at_95 <= 100.0):
                raise MetricError(f"row {r.method}/{r.tag}: metrics out of range.")

    def group_rows(self) -> List[EvalRow]:
        """Average rows over the near/far OOD groups per method (and percentile)."""
        out: List[EvalRow] = []
        keys: List[Tuple[str, Optional[float], str]] = []
        for r in self.rows:
            key = (r.method, r.percentile, r.split)
            if r.split in ("ood-near", "ood-far") and key not in keys:
                keys.append(key)
        for method, pct, split in keys:
            group = [r for r in self.rows if (r.method, r.percentile, r.split) == (method, pct, split)]
            out.append(EvalRow(
                method=method,
                tag=f"{split.split('-')[1]}-ood avg",
                split=split,
                fpr_at_95=float(np.mean([r.fpr_at_95 for r in group])),
                auroc=float(np.mean([r.auroc for r in group])),
                n_id=group[0].n_id,
                n_ood=sum(r.n_ood for r in group),
                n_degenerate=sum(r.n_degenerate for r in group),
                id_accuracy=group[0].id_accuracy,
                percentile=pct,
            ))
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "groups": [asdict(r) for r in self.group_rows()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["method", "p", "dataset", "split", "FPR@95", "AUROC", "ID ACC", "n_id", "n_ood", "n_degenerate"])
        for r in self.rows + self.group_rows():
            w.writerow([
                r.method,
                "" if r.percentile is None else f"{r.percentile:g}",
                r.tag,
                r.split,
                f"{r.fpr_at_95:.2f}",
                f"{r.auroc:.2f}",
                "" if r.id_accuracy is None else f"{r.id_accuracy:.2f}",
                r.n_id,
                r.n_ood,
                r.n_degenerate,
            ])
        return out.getvalue()


def _finite(scores: np.ndarray, degenerate: np.ndarray) -> np.ndarray:
    return scores[~degenerate]


def evaluate(
    method: str,
    id_set: FeatureSet,
    ood_sets: Sequence[FeatureSet],
    head: LinearHead,
    shaping: ShapingConfig,
    scoring: ScoringConfig,
    *,
    threads: int = 1,
    percentile: Optional[float] = None,
) -> List[EvalRow]:
    """One row per OOD set for a single shaping+score method."""
    id_scores, _, id_deg = pipeline_scores(id_set, head, shaping, scoring)
    s_id = _finite(id_scores, id_deg)
    if s_id.size == 0:
        raise MetricError(f"{method}: every ID sample is degenerate.")
    acc = None
    if id_set.labels is not None:
        acc = 100.0 * id_accuracy(id_set, head, shaping)

    def _row(ood: FeatureSet) -> EvalRow:
        scores, _, deg = pipeline_scores(ood, head, shaping, scoring)
        s_ood = _finite(scores, deg)
        if s_ood.size == 0:
            raise MetricError(f"{method}: every sample of '{ood.tag}' is degenerate.")
        n_deg = int(id_deg.sum() + deg.sum())
        if n_deg:
            logger.info("%s on %s: %d degenerate samples excluded", method, ood.tag, n_deg)
        return EvalRow(
            method=method,
            tag=ood.tag,
            split=ood.split,
            fpr_at_95=100.0 * fpr_at_tpr(s_id, s_ood, 0.95),
            auroc=100.0 * auroc(s_id, s_ood),
            n_id=int(s_id.size),
            n_ood=int(s_ood.size),
            n_degenerate=n_deg,
            id_accuracy=acc,
            percentile=percentile,
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(_row, ood_sets))


def sweep_percentile(
    id_set: FeatureSet,
    ood_sets: Sequence[FeatureSet],
    head: LinearHead,
    method: str,
    p_grid: Sequence[float],
    scoring: Optional[ScoringConfig] = None,
    *,
    threads: int = 1,
) -> EvalReport:
    """Full pipeline evaluation at each percentile, rows in grid order."""
    scoring = scoring or ScoringConfig()
    rows: List[EvalRow] = []
    for p in p_grid:
        shaping = ShapingConfig(method, p)
        rows.extend(evaluate(
            f"{method}+{scoring.score}", id_set, ood_sets, head, shaping, scoring,
            threads=threads, percentile=float(p),
        ))
    return EvalReport(rows, {"method": method, "score": scoring.score, "p_grid": [float(p) for p in p_grid]})
