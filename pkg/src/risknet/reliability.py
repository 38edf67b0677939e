"""Per-link failure/repair model: exponential up-times, Pareto (type I) down-times.

All times are hours; failure intensities are configured per year.
"""

import math
from dataclasses import dataclass

from risknet.errors import ParameterError
from risknet.rng import unit_open_zero

HOURS_PER_YEAR = 8760.0

# Synthetic defaults. Measured per-km intensities and downtime fits are not
# available to us, so these are placeholders with the right orders of magnitude.
LAMBDA_PER_KM_YEAR = 0.002
ALPHA_RANGE = (1.5, 2.5)
BETA_RANGE_H = (0.5, 4.0)


@dataclass(frozen=True)
class ComponentReliability:
    lambda_per_year: float
    pareto_alpha: float
    pareto_beta_h: float

    def __post_init__(self):
        if not (self.lambda_per_year > 0 and math.isfinite(self.lambda_per_year)):
            raise ParameterError(f"failure intensity must be > 0, got {self.lambda_per_year!r}")
        if not (self.pareto_alpha > 1 and math.isfinite(self.pareto_alpha)):
            raise ParameterError(f"Pareto alpha must be > 1, got {self.pareto_alpha!r}")
        if not (self.pareto_beta_h > 0 and math.isfinite(self.pareto_beta_h)):
            raise ParameterError(f"Pareto beta must be > 0, got {self.pareto_beta_h!r}")

    @property
    def rate_per_hour(self):
        return self.lambda_per_year / HOURS_PER_YEAR

    @property
    def mean_uptime_h(self):
        return HOURS_PER_YEAR / self.lambda_per_year

    @property
    def mean_downtime_h(self):
        a = self.pareto_alpha
        return a * self.pareto_beta_h / (a - 1.0)


def default_reliability(link, rng, lambda_per_km=LAMBDA_PER_KM_YEAR,
                        alpha_range=ALPHA_RANGE, beta_range=BETA_RANGE_H):
    """Length-proportional failure intensity with randomized Pareto downtime."""
    if not link.length_km > 0:
        raise ParameterError(f"link {link.id} has non-positive length")
    alpha = rng.uniform(*alpha_range)
    beta = rng.uniform(*beta_range)
    return ComponentReliability(lambda_per_km * link.length_km, float(alpha), float(beta))


def uptime_from_uniform(rel, u):
    """Inverse-transform exponential up-time for ``u`` in (0, 1]."""
    return -math.log(u) / rel.rate_per_hour


def downtime_from_uniform(rel, u):
    """Inverse-transform Pareto type I down-time for ``u`` in (0, 1]."""
    return rel.pareto_beta_h * u ** (-1.0 / rel.pareto_alpha)


def sample_uptime(rel, rng):
    return uptime_from_uniform(rel, float(unit_open_zero(rng)))


def sample_downtime(rel, rng):
    return downtime_from_uniform(rel, float(unit_open_zero(rng)))


def analytic_unavailability(rel):
    """Long-run down fraction of an isolated alternating-renewal component."""
    down = rel.mean_downtime_h
    return down / (rel.mean_uptime_h + down)
