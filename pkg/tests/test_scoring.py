import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from scaleood import (
    ConfigError,
    FeatureSet,
    LinearHead,
    ScoringConfig,
    ShapingConfig,
    energy_score,
    mls_score,
    msp_score,
    ood_indicator,
    pipeline_scores,
    tempscale_msp,
)
from scaleood.scoring import score_logits

logit_vectors = arrays(
    np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
)


def test_energy_score():
    assert energy_score([0, 0]) == pytest.approx(math.log(2), abs=1e-6)
    assert energy_score([1000, 0]) == pytest.approx(1000.0)
    expected = 2 * math.log(math.exp(0.5) + math.exp(1.0) + math.exp(1.5))
    assert energy_score([1, 2, 3], T=2) == pytest.approx(expected, rel=1e-12)
    assert energy_score([1, 2, 3], T=2) == pytest.approx(4.36054, abs=1e-5)
    np.testing.assert_allclose(energy_score(np.array([[0.0, 0.0], [1000.0, 0.0]])), [math.log(2), 1000.0])


def test_msp_and_mls():
    assert msp_score([0, 0, 0, 0]) == pytest.approx(0.25)
    assert msp_score([10, 0]) == pytest.approx(0.999955, abs=1e-6)
    assert mls_score([-1, 3, 2]) == 3
    assert mls_score([5]) == 5


def test_tempscale_msp():
    assert tempscale_msp([2, 0], T=2) == pytest.approx(0.731059, abs=1e-6)
    assert tempscale_msp([5, 1, 0], T=1e9) == pytest.approx(1.0 / 3.0, abs=1e-6)


def test_ood_indicator():
    assert ood_indicator(1.0, 0.5) == "ID"
    assert ood_indicator(0.5, 0.5) == "OOD"
    assert ood_indicator(-math.inf, 0.5) == "OOD"


def test_scoring_config():
    with pytest.raises(ConfigError, match="Unknown score 'odin'"):
        ScoringConfig("odin")
    with pytest.raises(ConfigError, match="temperature"):
        ScoringConfig("ebo", 0.0)


def test_score_logits_dispatch():
    z = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    np.testing.assert_allclose(score_logits(z, ScoringConfig("ebo", 2.0)), energy_score(z, 2.0))
    np.testing.assert_allclose(score_logits(z, ScoringConfig("msp")), msp_score(z))
    np.testing.assert_allclose(score_logits(z, ScoringConfig("mls")), [3.0, 0.0])
    np.testing.assert_allclose(score_logits(z, ScoringConfig("tempscale_msp", 3.0)), tempscale_msp(z, 3.0))


def test_pipeline_scores_flags_degenerate_rows():
    fs = FeatureSet(np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 2.0, 5.0]]))
    head = LinearHead(np.eye(4), np.zeros(4))
    scores, factors, degenerate = pipeline_scores(fs, head, ShapingConfig("scale", 0.5), ScoringConfig())
    assert degenerate.tolist() == [False, True, False]
    assert np.isnan(scores[1])
    assert np.isfinite(scores[[0, 2]]).all()
    assert factors[0] == pytest.approx(10.0 / 7.0)
    expected = energy_score(np.array([1.0, 2.0, 3.0, 4.0]) * math.exp(10.0 / 7.0))
    assert scores[0] == pytest.approx(expected)

    scores, _, degenerate = pipeline_scores(fs, head, ShapingConfig("identity"), ScoringConfig())
    assert not degenerate.any()
    assert scores[1] == pytest.approx(math.log(4))


@given(z=logit_vectors, T=st.floats(0.1, 10.0), lam=st.floats(1.0, 100.0))
@settings(max_examples=200, deadline=None)
def test_energy_bounds_under_positive_scaling(z, T, lam):
    zs = lam * z
    e = float(energy_score(zs, T))
    top = float(zs.max())
    tol = 1e-9 * (1.0 + abs(top))
    assert math.isfinite(e)
    assert e >= top - tol
    assert e <= top + T * math.log(zs.size) + tol
    assert e >= lam * float(z.max()) - T * math.log(zs.size) - tol


def test_energy_is_stable_at_large_logits():
    z = np.array([[1e6, -1e6, 0.0], [-1e6, -1e6, -1e6], [1e6, 1e6, 1e6]])
    e = energy_score(z)
    assert np.isfinite(e).all()
    np.testing.assert_allclose(e, [1e6, -1e6 + math.log(3), 1e6 + math.log(3)], rtol=1e-12)
