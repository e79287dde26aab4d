"""Phase-II selection and the stratified estimators.

The overall variance of every estimator here is affine in ``1/n_i``::

    var_h(n) = const_h + sum_i coef_ih / n_i

(:func:`variance_coefficients`), which is what the allocation solver relies
on. In Monte Carlo mode the two terms come from the double-sampling variance
with sub-sampling fractions ``nu_i = n_i / n_hat_i``; in subset-simulation
mode they come from the chain-corrected conditional variances and the strata
probability covariance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .model import ModelHandle, evaluate_batch, indicators_from_responses
from .phase1 import MODE_MC, MODE_SUS, STREAM_SELECT, STREAM_TAU, PhaseIResult, StratumSet, lag_products
from .prob import RngStream

__all__ = [
    "InfeasibleSelectionError",
    "PhaseIISelection",
    "LimitStateEvaluations",
    "LimitStateEstimate",
    "Curve",
    "select_phase2",
    "evaluate_selection",
    "conditional_failure_prob",
    "variance_coefficients",
    "overall_estimate",
    "estimate_all",
    "to_aer_beta",
    "hazard_curve",
    "response_aer_curve",
    "mc_equivalent_ratio",
]

NO_FAILURES = "no failures observed"


class InfeasibleSelectionError(ValueError):
    pass


# --------------------------------------------------------------------------
# selection and evaluation
# --------------------------------------------------------------------------

@dataclass
class PhaseIISelection:
    """Chosen Phase-I rows per stratum with their fresh ``tau`` draws.

    Selections are prefixes of a fixed per-stratum permutation, so a smaller
    selection with the same seed is always contained in a larger one.
    """

    rows: list
    tau: list
    seed: int
    n_hat_i: np.ndarray

    @property
    def n_i(self) -> np.ndarray:
        return np.array([r.size for r in self.rows])

    @property
    def nu(self) -> np.ndarray:
        return self.n_i / self.n_hat_i

    @property
    def m(self) -> int:
        return len(self.rows)


def select_phase2(phase1: PhaseIResult, allocation, seed: int, model: ModelHandle) -> PhaseIISelection:
    """Uniform without-replacement subset of ``n_i`` banked samples per stratum."""
    alloc = np.asarray(allocation, dtype=int)
    n_hat_i = phase1.n_hat_i
    if alloc.shape != n_hat_i.shape:
        raise ValueError(f"allocation needs {n_hat_i.size} entries")
    if np.any(alloc < 1):
        raise InfeasibleSelectionError("every stratum needs n_i >= 1")
    if np.any(alloc > n_hat_i):
        i = int(np.flatnonzero(alloc > n_hat_i)[0])
        raise InfeasibleSelectionError(f"stratum {i + 1}: n_i={alloc[i]} exceeds n_hat_i={n_hat_i[i]}")
    rows, taus = [], []
    for i in range(1, alloc.size + 1):
        bank = phase1.bank(i)
        perm = RngStream(seed, (STREAM_SELECT, i)).generator().permutation(bank.size)[: alloc[i - 1]]
        rows.append(bank[perm])
        # tau is tied to the bank position so reselection reproduces it
        tau_all = model.inputs.sample_tau(RngStream(seed, (STREAM_TAU, i)), bank.size)
        taus.append(tau_all[perm])
    return PhaseIISelection(rows, taus, seed, n_hat_i.copy())


@dataclass
class LimitStateEvaluations:
    """Responses and indicators of every selected sample, per stratum."""

    selection: PhaseIISelection
    responses: list
    indicators: list
    limit_state_ids: list

    @property
    def n_evaluated(self) -> int:
        return int(sum(r.shape[0] for r in self.responses))


def evaluate_selection(model: ModelHandle, phase1: PhaseIResult, selection: PhaseIISelection,
                       workers: int = 1, previous: LimitStateEvaluations | None = None):
    """Evaluate the limit states on a selection, reusing rows in ``previous``.

    Returns ``(evaluations, n_new)``.
    """
    responses, indicators = [], []
    n_new = 0
    for i, (rows, tau) in enumerate(zip(selection.rows, selection.tau)):
        known = {}
        if previous is not None and i < len(previous.selection.rows):
            known = {int(r): k for k, r in enumerate(previous.selection.rows[i])}
        todo = np.array([k for k, r in enumerate(rows) if int(r) not in known], dtype=int)
        n_new += todo.size
        n_resp = None
        if todo.size:
            resp_new, _ = evaluate_batch(model, phase1.sigma_rows(rows[todo], model), tau[todo], workers)
            n_resp = resp_new.shape[1]
        elif previous is not None:
            n_resp = previous.responses[i].shape[1]
        resp = np.empty((rows.size, n_resp if n_resp is not None else 0))
        if todo.size:
            resp[todo] = resp_new
        for k, r in enumerate(rows):
            if int(r) in known:
                resp[k] = previous.responses[i][known[int(r)]]
        responses.append(resp)
        indicators.append(indicators_from_responses(resp, model.limit_states))
    return LimitStateEvaluations(selection, responses, indicators, model.limit_state_ids), n_new


# --------------------------------------------------------------------------
# conditional and overall estimates
# --------------------------------------------------------------------------

def conditional_failure_prob(indicators, chain_key=None, state_index=None, *, iid=False):
    """(P_i, psi_i, var_i) for one stratum and limit state.

    ``psi_i = 1 + (2 / n_i) sum_l c_l R(l) / R(0)`` with ``R(l)`` the average
    centred indicator product over within-chain pairs at state-index lag ``l``
    and ``c_l`` the number of such pairs. Negative totals are clamped to 0.
    """
    I = np.asarray(indicators, dtype=float)
    n = I.size
    if n == 0:
        raise ValueError("no indicators")
    P = float(I.mean())
    r0 = P * (1.0 - P)
    if r0 <= 0.0:
        return P, 1.0, 0.0
    psi = 1.0
    if not iid and chain_key is not None:
        sums, _ = lag_products(I - P, chain_key, state_index)
        psi = max(0.0, 1.0 + 2.0 * float(np.sum(sums)) / (n * r0))
    return P, psi, r0 * psi / n


def variance_coefficients(strata: StratumSet, cond_probs, psi, n_hat_i):
    """``(const, coef)`` such that ``var = const + sum_i coef_i / n_i``.

    ``cond_probs`` and ``psi`` may be ``(m,)`` or ``(m, H)``.
    """
    P = np.asarray(cond_probs, dtype=float)
    psi = np.asarray(psi, dtype=float)
    squeeze = P.ndim == 1
    if squeeze:
        P, psi = P[:, None], psi[:, None]
    PS = strata.probs[:, None]
    unit = P * (1.0 - P)
    if strata.mode == MODE_MC:
        n_hat_i = np.asarray(n_hat_i, dtype=float)[:, None]
        n_hat = float(n_hat_i.sum())
        pf = np.sum(P * PS, axis=0)
        coef = PS * unit * n_hat_i / n_hat
        const = pf * (1.0 - pf) / n_hat - np.sum(PS * unit, axis=0) / n_hat
    else:
        coef = unit * psi * (np.diag(strata.prob_cov)[:, None] + PS**2)
        const = np.einsum("ih,ij,jh->h", P, strata.prob_cov, P)
    if squeeze:
        return float(const[0]), coef[:, 0]
    return const, coef


@dataclass
class LimitStateEstimate:
    id: str
    cond_probs: np.ndarray
    psi: np.ndarray
    cond_var: np.ndarray
    pf: float
    variance: float
    n_i: np.ndarray
    cov: float | None = None  # kappa; None when no failures were observed

    @property
    def std(self) -> float:
        return math.sqrt(max(self.variance, 0.0))

    @property
    def no_failures(self) -> bool:
        return self.pf == 0.0

    @property
    def cov_label(self) -> str:
        return NO_FAILURES if self.cov is None else f"{self.cov:.4g}"


def overall_estimate(strata: StratumSet, cond_probs, psi, n_i, n_hat_i, id: str = "") -> LimitStateEstimate:
    """Combine per-stratum estimates into ``P_f`` and its coefficient of variation."""
    P = np.asarray(cond_probs, dtype=float)
    psi = np.asarray(psi, dtype=float)
    n_i = np.asarray(n_i, dtype=float)
    pf = math.fsum(P * strata.probs)
    const, coef = variance_coefficients(strata, P, psi, n_hat_i)
    var = max(const + float(np.sum(coef / n_i)), 0.0)
    if strata.mode == MODE_MC:
        cond_var = P * (1.0 - P) / n_i
    else:
        cond_var = P * (1.0 - P) * psi / n_i
    kappa = math.sqrt(var) / pf if pf > 0 else None
    return LimitStateEstimate(id, P, psi, cond_var, pf, var, n_i.astype(int), kappa)


def _stratum_stats(phase1, rows, ind, i):
    iid = phase1.strata.mode == MODE_MC or i == 1
    return conditional_failure_prob(ind, phase1.chain_key(rows), phase1.state_index[rows], iid=iid)


def estimate_all(phase1: PhaseIResult, evals: LimitStateEvaluations) -> list[LimitStateEstimate]:
    """Final estimates for every limit state from Phase-II evaluations."""
    strata = phase1.strata
    out = []
    n_i = evals.selection.n_i
    for h, lsid in enumerate(evals.limit_state_ids):
        P, psi = np.empty(strata.m), np.empty(strata.m)
        for i in range(1, strata.m + 1):
            rows = evals.selection.rows[i - 1]
            P[i - 1], psi[i - 1], _ = _stratum_stats(phase1, rows, evals.indicators[i - 1][:, h], i)
        out.append(overall_estimate(strata, P, psi, n_i, phase1.n_hat_i, id=lsid))
    return out


# --------------------------------------------------------------------------
# rates and reliability indices
# --------------------------------------------------------------------------

def to_aer_beta(pf: float, rate: float, horizon: float = 50.0):
    """Annual exceedance rate ``rate * pf`` and ``Phi^-1((1 - AER)^horizon)``.

    ``beta`` is ``+inf`` when ``pf == 0``.
    """
    if not 0.0 <= pf <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    if not rate > 0:
        raise ValueError("event rate must be positive")
    aer = rate * pf
    if aer >= 1.0:
        raise ValueError(f"annual exceedance rate {aer} >= 1")
    if aer == 0.0:
        return 0.0, math.inf
    q = -math.expm1(horizon * math.log1p(-aer))  # 1 - (1 - AER)^horizon
    return aer, float(-special.ndtri(q))


def mc_equivalent_ratio(pf: float, kappa: float, n: int) -> float:
    """Plain-MC sample count for the same c.o.v., divided by ``n``."""
    if pf <= 0 or kappa is None or kappa <= 0:
        return math.nan
    return (1.0 - pf) / (pf * kappa * kappa * n)


@dataclass
class Curve:
    x: np.ndarray
    rate: np.ndarray
    stderr: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_rows(self):
        return np.column_stack([self.x, self.rate, self.stderr])


def _curve(strata, groups, grid, rate, n_i, n_hat_i, bounds=None):
    """Exceedance-rate curve from per-stratum value samples.

    ``groups`` yields ``(values, chain_key, state_index, iid)`` per stratum.
    """
    grid = np.asarray(grid, dtype=float)
    rates = np.empty(grid.size)
    errs = np.empty(grid.size)
    probs = [float(p) for p in strata.probs]
    for g, v in enumerate(grid):
        P = np.empty(strata.m)
        psi = np.empty(strata.m)
        for i, (vals, key, state, iid) in enumerate(groups):
            exceed = vals > v
            if bounds is not None:
                # membership decides at the boundaries: chain repeats can tie
                # the adaptive threshold, and those ties are split by rank
                lo, hi = bounds[i]
                if v <= lo:
                    exceed = np.ones_like(exceed)
                elif v >= hi:
                    exceed = np.zeros_like(exceed)
            P[i], psi[i], _ = conditional_failure_prob(exceed, key, state, iid=iid)
        rates[g] = rate * math.fsum(P[i] * probs[i] for i in range(strata.m))
        const, coef = variance_coefficients(strata, P, psi, n_hat_i)
        errs[g] = rate * math.sqrt(max(const + float(np.sum(coef / n_i)), 0.0))
    return Curve(grid, rates, errs)


def hazard_curve(phase1: PhaseIResult, rate: float, grid) -> Curve:
    """Mean annual rate of ``chi > v`` assembled stratum by stratum.

    Each stratum contributes its empirical conditional exceedance, taken as 1
    at or below its lower bound and 0 at or above its upper bound.
    """
    groups = []
    for i in range(1, phase1.strata.m + 1):
        rows = phase1.bank(i)
        iid = phase1.strata.mode == MODE_MC or i == 1
        groups.append((phase1.chi[rows], phase1.chain_key(rows), phase1.state_index[rows], iid))
    n_hat_i = phase1.n_hat_i
    bounds = [phase1.strata.bounds(i) for i in range(1, phase1.strata.m + 1)]
    return _curve(phase1.strata, groups, grid, rate, n_hat_i.astype(float), n_hat_i, bounds)


def response_aer_curve(phase1: PhaseIResult, evals: LimitStateEvaluations, response_index: int,
                       rate: float, grid) -> Curve:
    """Mean annual rate of ``response > t`` from the Phase-II samples.

    Non-finite responses count as exceeding every threshold.
    """
    groups = []
    for i in range(1, phase1.strata.m + 1):
        rows = evals.selection.rows[i - 1]
        vals = evals.responses[i - 1][:, response_index]
        vals = np.where(np.isfinite(vals), vals, np.inf)
        iid = phase1.strata.mode == MODE_MC or i == 1
        groups.append((vals, phase1.chain_key(rows), phase1.state_index[rows], iid))
    return _curve(phase1.strata, groups, grid, rate, evals.selection.n_i.astype(float),
                  phase1.n_hat_i)
