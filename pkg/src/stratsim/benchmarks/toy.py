"""Two-variable illustration problem.

``tau ~ U(0, 10)``, ``sigma ~ N(5, 1)``, response ``g = 200 sin(tau) + 3 sigma**3``
and stratification variable ``chi = sigma**3``. Failure is ``g > threshold``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate, special

from ..model import InputSplit, LimitStateDef, ModelHandle, register_model
from ..prob import DistributionSpec

SIGMA_MEAN = 5.0
SIGMA_SD = 1.0
TAU_UPPER = 10.0
DEFAULT_THRESHOLD = 1500.0


def toy_chi(sigma):
    return float(np.asarray(sigma, dtype=float).reshape(-1)[0] ** 3)


def toy_response(sigma, tau):
    s = float(np.asarray(sigma).reshape(-1)[0])
    t = float(np.asarray(tau).reshape(-1)[0])
    return np.array([200.0 * math.sin(t) + 3.0 * s**3])


def _chi_batch(sigma):
    return np.asarray(sigma, dtype=float)[:, 0] ** 3


def _response_batch(sigma, tau):
    return (200.0 * np.sin(tau[:, 0]) + 3.0 * sigma[:, 0] ** 3)[:, None]


def make_toy_model(thresholds=(DEFAULT_THRESHOLD,)) -> ModelHandle:
    thresholds = tuple(float(t) for t in np.atleast_1d(thresholds))
    inputs = InputSplit(
        sigma_spec=(DistributionSpec.normal(SIGMA_MEAN, SIGMA_SD, name="sigma"),),
        tau_spec=(DistributionSpec.uniform(0.0, TAU_UPPER, name="tau"),),
    )
    limit_states = tuple(LimitStateDef(f"g>{t:g}", 0, t) for t in thresholds)
    return ModelHandle(
        name="toy2d",
        inputs=inputs,
        chi_fn=toy_chi,
        response_fn=toy_response,
        limit_states=limit_states,
        chi_batch=_chi_batch,
        response_batch=_response_batch,
        params={"thresholds": list(thresholds)},
    )


def toy_oracle(threshold: float = DEFAULT_THRESHOLD) -> float:
    """P(200 sin(tau) + 3 sigma^3 > threshold) by adaptive quadrature over tau."""
    if threshold == math.inf:
        return 0.0
    if threshold == -math.inf:
        return 1.0

    def conditional(t):
        s_crit = np.cbrt((threshold - 200.0 * math.sin(t)) / 3.0)
        return special.ndtr(-(s_crit - SIGMA_MEAN) / SIGMA_SD)

    # split at the extrema of sin so each piece is monotone
    breaks = [0.0] + [k * math.pi / 2 for k in range(1, 7)] + [TAU_UPPER]
    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        v, _ = integrate.quad(conditional, a, b, epsabs=1e-15, epsrel=1e-13, limit=200)
        total += v
    return total / TAU_UPPER


def chi_exceedance(v):
    """Analytic P(chi > v) for chi = sigma^3."""
    return special.ndtr(-(np.cbrt(np.asarray(v, dtype=float)) - SIGMA_MEAN) / SIGMA_SD)


def chi_quantile(q):
    """Analytic q-quantile of chi."""
    return (SIGMA_MEAN + SIGMA_SD * special.ndtri(np.asarray(q, dtype=float))) ** 3


def threshold_for_probability(target: float) -> float:
    """Response threshold whose failure probability equals ``target``."""
    from scipy.optimize import brentq

    lo, hi = 0.0, 3.0 * (SIGMA_MEAN + 12.0 * SIGMA_SD) ** 3
    return brentq(lambda t: math.log(toy_oracle(t)) - math.log(target), lo, hi, xtol=1e-10)


register_model("toy2d", make_toy_model)
