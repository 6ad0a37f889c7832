"""
Desk-scale experiments on synthetic data.
Each check is timed against a wall-clock budget; the heavy ones are marked slow.
"""

import math
import time

import numpy as np
import pytest

from scaleood import (
    BlobSpec,
    GaussianParams,
    IshTrainConfig,
    ShapingConfig,
    SynthSpec,
    apply_head,
    chi_square_gaussian_p,
    compare_modes,
    gen_linear_head,
    gen_rectified_features,
    monte_carlo_qp_ratio,
    shape_batch,
    sweep_percentile,
)
from scaleood.cli import main
from scaleood.ingest import LinearHead

# Budgets (in seconds)
ARGMAX_MAX_TIME = 5.0
QP_RATIO_MAX_TIME = 30.0
SWEEP_MAX_TIME = 120.0
SEEDS_MAX_TIME = 120.0
CHI2_MAX_TIME = 60.0
ISH_MAX_TIME = 300.0
PIPELINE_MAX_TIME = 60.0

ID_PARAMS = GaussianParams(1.0, 0.5)
OOD_PARAMS = GaussianParams(0.8, 0.6)
P_GRID = [0.65, 0.70, 0.75, 0.80, 0.85]


def _pair(seed: int, n: int = 5000, dim: int = 2048, classes: int = 100):
    id_set, _ = gen_rectified_features(SynthSpec(ID_PARAMS, True, n, dim, seed), tag="id", split="id", threads=4)
    ood_set, _ = gen_rectified_features(
        SynthSpec(OOD_PARAMS, True, n, dim, seed + 1), tag="ood", split="ood-near", threads=4
    )
    return id_set, ood_set, gen_linear_head(classes, dim, seed + 2)


def _aurocs(id_set, ood_set, head, method, grid):
    report = sweep_percentile(id_set, [ood_set], head, method, grid, threads=4)
    return [r.auroc for r in report.rows]


def test_scale_preserves_argmax():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    n, dim, classes = 10_000, 64, 10
    feats = np.maximum(rng.normal(1.0, 0.5, (n, dim)), 0.0)
    head = LinearHead(rng.normal(0, 1 / math.sqrt(dim), (classes, dim)), np.zeros(classes))
    res = shape_batch(feats, ShapingConfig("scale", 0.85))
    ok = ~res.degenerate
    raw = np.argmax(apply_head(feats, head), axis=1)
    scaled = np.argmax(apply_head(res.shaped[ok], head), axis=1)
    assert ok.sum() > 0.99 * n
    np.testing.assert_array_equal(scaled, raw[ok])
    elapsed = time.perf_counter() - start
    assert elapsed < ARGMAX_MAX_TIME, f"argmax check too slow: {elapsed:.2f}s (max: {ARGMAX_MAX_TIME}s)"


def test_qp_ratio_smaller_for_id():
    start = time.perf_counter()
    for p in (0.5, 0.65, 0.75, 0.85, 0.95):
        id_est = monte_carlo_qp_ratio(ID_PARAMS, p, 2048, 5000, seed=1, threads=4)
        ood_est = monte_carlo_qp_ratio(OOD_PARAMS, p, 2048, 5000, seed=2, threads=4)
        assert id_est.mean < ood_est.mean
        if p == 0.85:
            se = math.hypot(id_est.stderr, ood_est.stderr)
            assert ood_est.mean - id_est.mean > 5 * se
    elapsed = time.perf_counter() - start
    assert elapsed < QP_RATIO_MAX_TIME, f"Q_p/Q experiment too slow: {elapsed:.2f}s (max: {QP_RATIO_MAX_TIME}s)"


@pytest.mark.slow
def test_percentile_sweep_shape():
    start = time.perf_counter()
    id_set, ood_set, head = _pair(seed=0)
    scale = _aurocs(id_set, ood_set, head, "scale", P_GRID)
    prune = _aurocs(id_set, ood_set, head, "prune", P_GRID)
    ash = _aurocs(id_set, ood_set, head, "ash_s", [0.85])[0]
    # tolerances cover AUROC sampling noise between grid points
    assert all(b >= a - 0.05 for a, b in zip(scale, scale[1:])), scale
    assert all(b <= a + 0.5 for a, b in zip(prune, prune[1:])), prune
    assert scale[-1] - prune[-1] >= 2.0
    assert prune[-1] - 0.5 <= ash <= scale[-1] + 0.5
    elapsed = time.perf_counter() - start
    assert elapsed < SWEEP_MAX_TIME, f"sweep too slow: {elapsed:.2f}s (max: {SWEEP_MAX_TIME}s)"


@pytest.mark.slow
def test_scale_not_worse_than_ash_s_across_seeds():
    start = time.perf_counter()
    scale, ash = [], []
    for seed in range(5):
        id_set, ood_set, head = _pair(seed=10 * seed)
        scale.append(_aurocs(id_set, ood_set, head, "scale", [0.85])[0])
        ash.append(_aurocs(id_set, ood_set, head, "ash_s", [0.85])[0])
    assert all(s >= a - 0.1 for s, a in zip(scale, ash)), (scale, ash)
    assert np.mean(scale) > np.mean(ash)
    elapsed = time.perf_counter() - start
    assert elapsed < SEEDS_MAX_TIME, f"seed comparison too slow: {elapsed:.2f}s (max: {SEEDS_MAX_TIME}s)"


def test_chi_square_size_and_power():
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    null = np.array([chi_square_gaussian_p(rng.normal(size=2048)) for _ in range(2000)])
    rate = float(np.mean(null < 0.05))
    assert abs(rate - 0.05) <= 0.02, rate
    power = np.mean([chi_square_gaussian_p(rng.uniform(size=2048)) < 0.05 for _ in range(200)])
    assert power >= 0.99
    elapsed = time.perf_counter() - start
    assert elapsed < CHI2_MAX_TIME, f"chi-square calibration too slow: {elapsed:.2f}s (max: {CHI2_MAX_TIME}s)"


@pytest.mark.slow
def test_ish_fine_tune_against_plain():
    start = time.perf_counter()
    result = compare_modes(BlobSpec(), IshTrainConfig(), seeds=[0, 1, 2, 3, 4])
    plain, ish = result["mean"]["plain"], result["mean"]["ish"]
    assert abs(ish["id_accuracy"] - plain["id_accuracy"]) <= 0.01
    assert ish["auroc_scale_ebo"] >= plain["auroc_scale_ebo"]
    elapsed = time.perf_counter() - start
    assert elapsed < ISH_MAX_TIME, f"ISH experiment too slow: {elapsed:.2f}s (max: {ISH_MAX_TIME}s)"


@pytest.mark.slow
def test_synth_then_eval_on_defaults(tmp_path):
    start = time.perf_counter()
    assert main(["synth", "-o", str(tmp_path), "-q"]) == 0
    assert main(["eval", "-m", str(tmp_path / "manifest.json"), "-o", str(tmp_path / "report.csv"), "-q"]) == 0
    elapsed = time.perf_counter() - start
    assert (tmp_path / "report.csv").exists()
    assert elapsed < PIPELINE_MAX_TIME, f"synth + eval too slow: {elapsed:.2f}s (max: {PIPELINE_MAX_TIME}s)"
