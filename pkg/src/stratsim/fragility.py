"""Lognormal fragility curves fitted to stratum-wise failure fractions.

The fit is a binomial maximum-likelihood probit regression on ``ln x``:
``P(fail | x) = Phi((ln x - ln median) / dispersion)``, solved with Fisher
scoring. Error-bound curves reuse the central dispersion and refit only the
median to the shifted probabilities, so the three curves never cross.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = ["FragilityFit", "FragilityFitError", "fragility_fit", "fragility_curve"]

P_CLAMP = 1e-6
BOUND_Z = 1.65


class FragilityFitError(ValueError):
    pass


@dataclass(frozen=True)
class FragilityFit:
    median: float
    dispersion: float
    lower_median: float   # median of the lower-probability bound curve
    upper_median: float   # median of the higher-probability bound curve
    converged: bool = True

    def cdf(self, x):
        return fragility_curve(x, self.median, self.dispersion)

    def lower(self, x):
        return fragility_curve(x, self.lower_median, self.dispersion)

    def upper(self, x):
        return fragility_curve(x, self.upper_median, self.dispersion)


def fragility_curve(x, median, dispersion):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return special.ndtr((np.log(x) - math.log(median)) / dispersion)


def _score_terms(eta, p, n):
    """Gradient weights and Fisher information weights of the probit likelihood."""
    F = np.clip(special.ndtr(eta), P_CLAMP, 1.0 - P_CLAMP)
    f = np.exp(-0.5 * eta * eta) / math.sqrt(2.0 * math.pi)
    denom = F * (1.0 - F)
    g = n * f * (p - F) / denom
    w = n * f * f / denom
    return g, w


def _loglik(eta, p, n):
    F = np.clip(special.ndtr(eta), P_CLAMP, 1.0 - P_CLAMP)
    return float(np.sum(n * (p * np.log(F) + (1.0 - p) * np.log1p(-F))))


def _fit_probit(lx, p, n, b_fixed=None, start=None, max_iter=200, tol=1e-13):
    """Fisher scoring for ``eta = a + b * lx``; returns (a, b, converged)."""
    if start is None:
        z = special.ndtri(np.clip(p, 0.02, 0.98))
        if b_fixed is None:
            A = np.column_stack([np.ones_like(lx), lx])
            a, b = np.linalg.lstsq(A * np.sqrt(n)[:, None], z * np.sqrt(n), rcond=None)[0]
            if not b > 0:
                b = 1.0 / max(np.std(lx), 0.1)
        else:
            b = b_fixed
            a = float(np.average(z - b * lx, weights=n))
    else:
        a, b = start
    ll = _loglik(a + b * lx, p, n)
    for _ in range(max_iter):
        g, w = _score_terms(a + b * lx, p, n)
        if b_fixed is None:
            grad = np.array([g.sum(), (g * lx).sum()])
            info = np.array([[w.sum(), (w * lx).sum()], [(w * lx).sum(), (w * lx * lx).sum()]])
            step = np.linalg.solve(info, grad)
        else:
            step = np.array([g.sum() / w.sum(), 0.0])
        # step halving keeps the likelihood ascending
        t = 1.0
        while True:
            a_new, b_new = a + t * step[0], b + t * step[1]
            ll_new = _loglik(a_new + b_new * lx, p, n)
            if ll_new >= ll - 1e-15 * abs(ll) or t < 1e-8:
                break
            t *= 0.5
        a, b, ll = a_new, b_new, ll_new
        if np.max(np.abs(t * step)) < tol * (1.0 + abs(a) + abs(b)):
            return a, b, True
    return a, b, False


def fragility_fit(x, p, n, theta=None, bound_z: float = BOUND_Z) -> FragilityFit:
    """Fit a lognormal fragility to points ``(x_i, p_i)`` with weights ``n_i``.

    ``theta`` holds the standard errors of ``p``; the bound curves are fitted
    to ``p +/- bound_z * theta`` clipped to [0, 1]. Without ``theta`` the
    bounds equal the central curve.
    """
    x = np.asarray(x, dtype=float)
    p_raw = np.asarray(p, dtype=float)
    n = np.asarray(n, dtype=float)
    if x.shape != p_raw.shape or x.shape != n.shape:
        raise ValueError("x, p and n must have equal length")
    if np.any(x <= 0):
        raise ValueError("intensity values must be positive")
    interior = (p_raw > 0) & (p_raw < 1)
    if interior.sum() < 2 and not ((p_raw > 0).any() and (p_raw < 1).any()):
        raise FragilityFitError("all probabilities are 0 or all are 1; the fit is not identifiable")
    if np.unique(x).size < 2:
        raise FragilityFitError("need at least two distinct intensity levels")
    lx = np.log(x)
    pc = np.clip(p_raw, P_CLAMP, 1.0 - P_CLAMP)
    a, b, ok = _fit_probit(lx, pc, n)
    if not b > 0:
        raise FragilityFitError("fitted curve is not increasing in intensity")
    median = math.exp(-a / b)
    disp = 1.0 / b
    if theta is None:
        return FragilityFit(median, disp, median, median, ok)
    theta = np.asarray(theta, dtype=float)
    meds = []
    for sign in (-1.0, 1.0):
        pb = np.clip(np.clip(p_raw + sign * bound_z * theta, 0.0, 1.0), P_CLAMP, 1.0 - P_CLAMP)
        ab, _, _ = _fit_probit(lx, pb, n, b_fixed=b)
        meds.append(math.exp(-ab / b))
    return FragilityFit(median, disp, lower_median=meds[0], upper_median=meds[1], converged=ok)
