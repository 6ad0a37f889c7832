"""Synthetic feature sets, heads and toy classification data."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError
from .ingest import FeatureSet, LinearHead, PreActSet
from .rng import philox_stream, run_sharded
from .theory import GaussianParams

logger = logging.getLogger(__name__)

# Calibrated so mu/sigma is 2.0 for ID and 1.33 for OOD.
DEFAULT_ID_PARAMS = GaussianParams(1.0, 0.5)
DEFAULT_OOD_PARAMS = GaussianParams(0.8, 0.6)


@dataclass(frozen=True)
class SynthSpec:
    distribution: GaussianParams
    rectified: bool = True
    n_samples: int = 1000
    dim: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.dim < 1:
            raise ConfigError(f"need n_samples >= 1 and dim >= 1, got {self.n_samples}, {self.dim}.")


@dataclass(frozen=True)
class BlobSpec:
    n_classes: int = 10
    id_classes: Tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    dim: int = 32
    center_scale: float = 5.0
    noise: float = 1.0
    samples_per_class: int = 500
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        ids = tuple(int(c) for c in self.id_classes)
        object.__setattr__(self, "id_classes", ids)
        if not ids or len(set(ids)) != len(ids):
            raise ConfigError("id_classes must be a non-empty set of distinct classes.")
        if min(ids) < 0 or max(ids) >= self.n_classes:
            raise ConfigError(f"id_classes must lie in [0, {self.n_classes}).")
        if len(ids) >= self.n_classes:
            raise ConfigError("id_classes must leave at least one held-out class for OOD.")
        if self.dim < 1 or self.samples_per_class < 2 or self.noise < 0:
            raise ConfigError("invalid blob geometry.")
        if not (0.0 < self.test_fraction < 1.0):
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}.")

    @property
    def ood_classes(self) -> Tuple[int, ...]:
        return tuple(c for c in range(self.n_classes) if c not in self.id_classes)


@dataclass(frozen=True)
class BlobDataset:
    train: FeatureSet
    id_test: FeatureSet
    ood_test: FeatureSet


def gen_rectified_features(
    spec: SynthSpec, *, tag: str = "synthetic", split: str = "id", threads: int = 1
) -> Tuple[FeatureSet, PreActSet]:
    """Pre-ReLU rows i.i.d. N(mu, sigma^2) and their rectified counterpart."""
    mu, sigma = spec.distribution.mu, spec.distribution.sigma
    parts = run_sharded(spec.n_samples, spec.seed, lambda rng, rows: rng.normal(mu, sigma, (rows, spec.dim)), threads)
    pre = np.concatenate(parts, axis=0)
    post = np.maximum(pre, 0.0) if spec.rectified else pre
    logger.info("generated %s: N=%d D=%d mu=%g sigma=%g", tag, spec.n_samples, spec.dim, mu, sigma)
    return (
        FeatureSet(post, tag=tag, split=split, post_relu=spec.rectified),
        PreActSet(pre, tag=tag, split=split),
    )


def gen_linear_head(K: int, D: int, seed: int = 0, scale: float = 1.0, bias_scale: float = 0.0) -> LinearHead:
    """Weights i.i.d. N(0, scale^2 / D); bias zero unless bias_scale > 0."""
    if K < 1 or D < 1:
        raise ConfigError(f"need K >= 1 and D >= 1, got {K}, {D}.")
    rng = philox_stream(seed)
    weights = rng.normal(0.0, scale / np.sqrt(D), (K, D))
    bias = rng.normal(0.0, bias_scale, K) if bias_scale > 0 else np.zeros(K)
    return LinearHead(weights, bias)


def gen_blob_dataset(spec: BlobSpec) -> BlobDataset:
    """Gaussian blobs around centers on a sphere; held-out classes form the OOD test set."""
    rng = philox_stream(spec.seed)
    centers = rng.normal(size=(spec.n_classes, spec.dim))
    centers *= spec.center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    n_test = max(1, int(round(spec.samples_per_class * spec.test_fraction)))
    n_train = spec.samples_per_class - n_test
    samples = centers[:, None, :] + spec.noise * rng.normal(size=(spec.n_classes, spec.samples_per_class, spec.dim))

    relabel = {c: i for i, c in enumerate(spec.id_classes)}
    ids = list(spec.id_classes)
    labels = np.repeat([relabel[c] for c in ids], n_train)
    train = FeatureSet(samples[ids, :n_train].reshape(-1, spec.dim), tag="blobs-train", split="id", labels=labels)
    id_test = FeatureSet(
        samples[ids, n_train:].reshape(-1, spec.dim), tag="blobs-id", split="id",
        labels=np.repeat([relabel[c] for c in ids], n_test),
    )
    ood = list(spec.ood_classes)
    ood_test = FeatureSet(samples[ood, n_train:].reshape(-1, spec.dim), tag="blobs-heldout", split="ood-near")
    return BlobDataset(train, id_test, ood_test)
