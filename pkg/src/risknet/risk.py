"""Risk measures on predicted Student-t penalty distributions, plus evaluation metrics."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, gammaln

from risknet.errors import ParameterError
from risknet.model import student_t_logpdf

DEFAULT_NU = 5.0
QUANTILE_TOL = 1e-10


def t_pdf(t, nu=DEFAULT_NU):
    return np.exp(student_t_logpdf(t, 0.0, 1.0, nu))


def t_cdf(t, nu=DEFAULT_NU):
    """Standard Student-t CDF via the regularized incomplete beta function."""
    t = np.asarray(t, dtype=np.float64)
    tail = 0.5 * betainc(nu / 2.0, 0.5, nu / (nu + t * t))
    return np.where(t > 0, 1.0 - tail, tail)


def t_quantile(q, nu=DEFAULT_NU):
    """Inverse standard-t CDF by safeguarded Newton iteration on ``t_cdf``."""
    if not 0.0 < q < 1.0:
        raise ParameterError(f"quantile level must be in (0, 1), got {q}")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_quantile(1.0 - q, nu)
    lo, hi = 0.0, 1.0
    while float(t_cdf(hi, nu)) < q:
        lo, hi = hi, 2.0 * hi
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = float(t_cdf(x, nu)) - q
        if f > 0:
            hi = x
        else:
            lo = x
        step = f / float(t_pdf(x, nu))
        nxt = x - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) < QUANTILE_TOL * 0.01 or hi - lo < QUANTILE_TOL * 0.01:
            x = nxt
            break
        x = nxt
    return float(x)


def _check_level(p):
    if not 0.0 < p < 1.0:
        raise ParameterError(f"tail probability must be in (0, 1), got {p}")


def var_normalized(mu, sigma, p, nu=DEFAULT_NU):
    """VaR with tail mass ``p``: the (1 - p) quantile of each location-scale t."""
    _check_level(p)
    return np.asarray(mu) + np.asarray(sigma) * t_quantile(1.0 - p, nu)


def cvar_normalized(mu, sigma, p, nu=DEFAULT_NU):
    """Closed-form expected shortfall beyond the (1 - p) quantile."""
    _check_level(p)
    if nu <= 1:
        raise ParameterError("expected shortfall needs nu > 1")
    tq = t_quantile(1.0 - p, nu)
    factor = float(t_pdf(tq, nu)) * (nu + tq * tq) / (p * (nu - 1.0))
    return np.asarray(mu) + np.asarray(sigma) * factor


def _denorm(values, stats):
    if stats is None:
        return np.asarray(values, dtype=np.float64)
    return np.asarray(values) * stats.label_std + stats.label_mean


def var(pred, p=0.05, stats=None):
    return _denorm(var_normalized(pred.mu, pred.sigma, p, pred.nu), stats)


def cvar(pred, p=0.05, stats=None):
    return _denorm(cvar_normalized(pred.mu, pred.sigma, p, pred.nu), stats)


def network_cvar_bound(cvars):
    """Subadditivity bound on the network-wide CVaR: the per-SLA sum."""
    return float(np.sum(cvars)) if len(cvars) else 0.0


@dataclass
class RiskReport:
    p: float
    var: np.ndarray
    cvar: np.ndarray
    network_bound: float
    normalized: bool = False

    def to_dict(self):
        return {
            "p": self.p,
            "normalized": self.normalized,
            "var": self.var.tolist(),
            "cvar": self.cvar.tolist(),
            "network_cvar_bound": self.network_bound,
        }


def risk_report(pred, p=0.05, stats=None, normalized=False):
    use = None if normalized else stats
    v = var(pred, p, use)
    c = cvar(pred, p, use)
    return RiskReport(p, v, c, network_cvar_bound(c), normalized or stats is None)


def empirical_cvar(samples, p=0.05):
    """Mean of the samples at or beyond the empirical (1 - p) quantile."""
    samples = np.sort(np.asarray(samples, dtype=np.float64))
    k = int(math.ceil((1.0 - p) * len(samples)))
    return float(samples[min(k, len(samples) - 1):].mean())


# --------------------------------------------------------------------------- evaluation


def baseline_nll(labels, nu=DEFAULT_NU):
    """Mean NLL of the feature-blind standard t over all normalized label entries."""
    y = np.ravel(np.asarray(labels, dtype=np.float64))
    if y.size == 0:
        raise ParameterError("no labels")
    return float(-np.mean(student_t_logpdf(y, 0.0, 1.0, nu)))


def information_gain_bits(model_nll, baseline):
    return (baseline - model_nll) / math.log(2.0)


@dataclass
class PPPlotData:
    q: np.ndarray
    q_hat: np.ndarray
    n: int

    def max_deviation(self):
        return float(np.max(np.abs(self.q_hat - self.q)))

    def to_csv(self):
        lines = ["q,q_hat,n"]
        lines += [f"{a!r},{b!r},{self.n}" for a, b in zip(self.q.tolist(), self.q_hat.tolist())]
        return "\n".join(lines) + "\n"


def default_q_grid():
    return np.round(np.arange(1, 100) / 100.0, 2)


def ppplot(mu, sigma, labels, q_grid=None, nu=DEFAULT_NU):
    """Coverage of the predicted q-quantiles, pooled over all (example, SLA) entries.

    ``mu``, ``sigma`` and ``labels`` broadcast to a common shape.
    """
    q_grid = default_q_grid() if q_grid is None else np.asarray(q_grid, dtype=np.float64)
    if np.any(np.diff(q_grid) <= 0) or q_grid.min() <= 0 or q_grid.max() >= 1:
        raise ParameterError("q grid must be strictly increasing inside (0, 1)")
    mu, sigma, y = np.broadcast_arrays(
        np.asarray(mu, np.float64), np.asarray(sigma, np.float64), np.asarray(labels, np.float64)
    )
    tq = [t_quantile(q, nu) for q in q_grid]
    q_hat = np.array([np.count_nonzero(y < mu + sigma * t) for t in tq]) / y.size
    return PPPlotData(q_grid, q_hat, int(y.size))
