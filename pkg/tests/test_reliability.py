import math

import numpy as np
import pytest

from risknet.errors import ParameterError
from risknet.reliability import (
    ComponentReliability,
    analytic_unavailability,
    default_reliability,
    downtime_from_uniform,
    sample_downtime,
    sample_uptime,
    uptime_from_uniform,
)
from risknet.rng import stream
from risknet.topology import Link


def test_default_intensity_scales_with_length():
    rel = default_reliability(Link(0, 0, 1, 500.0), stream(0))
    assert rel.lambda_per_year == pytest.approx(1.0)


def test_default_ranges_and_determinism():
    link = Link(0, 0, 1, 120.0)
    rng = stream(5)
    for _ in range(500):
        rel = default_reliability(link, rng)
        assert 1.5 <= rel.pareto_alpha <= 2.5
        assert 0.5 <= rel.pareto_beta_h <= 4.0
        assert math.isfinite(rel.mean_downtime_h)
    assert default_reliability(link, stream(9)) == default_reliability(link, stream(9))


@pytest.mark.parametrize("args", [(0.0, 2.0, 1.0), (1.0, 1.0, 1.0), (1.0, 2.0, 0.0)])
def test_invalid_parameters(args):
    with pytest.raises(ParameterError):
        ComponentReliability(*args)


def test_uptime_inverse_transform():
    rel = ComponentReliability(1.0, 2.0, 1.0)
    assert uptime_from_uniform(rel, 1.0) == 0.0
    assert uptime_from_uniform(rel, math.exp(-1.0)) == pytest.approx(8760.0, rel=1e-15)


def test_uptime_mean():
    rel = ComponentReliability(1.0, 2.0, 1.0)
    rng = stream(1)
    mean = np.mean([sample_uptime(rel, rng) for _ in range(1_000_000)])
    assert mean == pytest.approx(8760.0, rel=0.01)


def test_downtime_support_and_mean():
    rel = ComponentReliability(1.0, 2.0, 1.0)
    assert downtime_from_uniform(rel, 1.0) == 1.0
    rng = stream(2)
    draws = np.array([sample_downtime(rel, rng) for _ in range(1_000_000)])
    assert draws.min() >= 1.0
    assert draws.mean() == pytest.approx(2.0, rel=0.02)


def test_samplers_are_pure_in_rng_state():
    rel = ComponentReliability(3.0, 1.7, 2.0)
    a, b = stream(4), stream(4)
    assert [sample_uptime(rel, a) for _ in range(5)] == [sample_uptime(rel, b) for _ in range(5)]


def test_analytic_unavailability():
    rel = ComponentReliability(1.0, 2.0, 4.38)
    assert rel.mean_downtime_h == pytest.approx(8.76)
    assert analytic_unavailability(rel) == pytest.approx(8.76 / (8760 + 8.76), rel=1e-12)
    assert analytic_unavailability(rel) == pytest.approx(9.99e-4, abs=1e-6)
    same_mean = ComponentReliability(1.0, 3.0, 8.76 * 2 / 3)
    assert analytic_unavailability(same_mean) == pytest.approx(analytic_unavailability(rel))
    assert analytic_unavailability(ComponentReliability(1e-12, 2.0, 4.38)) < 1e-14
