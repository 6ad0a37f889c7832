"""Logit-based OOD scores. Higher scores mean more ID-like."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError
from .ingest import FeatureSet, LinearHead
from .shaping import ShapingConfig, apply_head, shape_batch

Score = Literal["ebo", "msp", "mls", "tempscale_msp"]
SCORES: Tuple[str, ...] = ("ebo", "msp", "mls", "tempscale_msp")

ID = "ID"
OOD = "OOD"


@dataclass(frozen=True)
class ScoringConfig:
    score: Score = "ebo"
    temperature: float = 1.0

    def __post_init__(self):
        if self.score not in SCORES:
            raise ConfigError(f"Unknown score '{self.score}'. Supported: {', '.join(SCORES)}.")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError(f"temperature must be finite and > 0, got {self.temperature}.")


@dataclass(frozen=True)
class ScoredSample:
    score: float
    tag: str
    index: int


def energy_score(z, T: float = 1.0):
    """T * log sum_k exp(z_k / T); rows of a 2-D input are scored independently."""
    z = np.asarray(z, dtype=np.float64)
    return T * logsumexp(z / T, axis=-1)


def msp_score(z):
    return np.max(softmax(np.asarray(z, dtype=np.float64), axis=-1), axis=-1)


def mls_score(z):
    return np.max(np.asarray(z, dtype=np.float64), axis=-1)


def tempscale_msp(z, T: float = 1.0):
    return msp_score(np.asarray(z, dtype=np.float64) / T)


def ood_indicator(score: float, tau: float) -> str:
    """ID iff score > tau; the boundary itself is OOD."""
    return ID if score > tau else OOD


def score_logits(logits, config: ScoringConfig) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if config.score == "ebo":
        return energy_score(z, config.temperature)
    if config.score == "msp":
        return msp_score(z)
    if config.score == "mls":
        return mls_score(z)
    return tempscale_msp(z, config.temperature)


def pipeline_scores(
    features: FeatureSet, head: LinearHead, shaping: ShapingConfig, scoring: ScoringConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shape, project and score every sample.

    Returns (scores, factors, degenerate); scores are NaN on degenerate rows.
    """
    shaped = shape_batch(features.data, shaping)
    scores = np.full(features.n_samples, np.nan)
    ok = ~shaped.degenerate
    if ok.any():
        scores[ok] = score_logits(apply_head(shaped.shaped[ok], head), scoring)
    return scores, shaped.factors, shaped.degenerate
