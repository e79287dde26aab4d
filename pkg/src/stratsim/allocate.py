"""Preliminary study and minimum-sample allocation under c.o.v. targets.

With the preliminary conditional probabilities and correlation factors frozen,
each limit state's predicted variance is ``const_h + sum_i coef_ih / n_i``
(see :func:`stratsim.estimators.variance_coefficients`). The solver minimises
``sum_i n_i`` subject to ``kappa_h(n) <= omega_h`` and ``n_p <= n_i <= n_hat_i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import (LimitStateEvaluations, _stratum_stats, evaluate_selection, select_phase2,
                         variance_coefficients)
from .model import ModelHandle
from .phase1 import PhaseIResult, StratumSet

__all__ = [
    "UnitVarianceTable",
    "AllocationPlan",
    "InfeasibleTargetError",
    "preliminary_study",
    "table_from_arrays",
    "predicted_cov",
    "feasibility_floor",
    "optimal_allocation",
    "equal_allocation",
]

DEFAULT_RELAX = 1.1


class InfeasibleTargetError(ValueError):
    def __init__(self, floors):
        self.floors = floors
        msg = ", ".join(f"{k}: floor {v:.4g}" for k, v in floors.items())
        super().__init__(f"targets below the achievable c.o.v. ({msg}); refresh Phase-I with a larger N")


@dataclass
class UnitVarianceTable:
    """Preliminary per-stratum estimates, shape ``(m, H)``."""

    cond_probs: np.ndarray
    psi: np.ndarray
    n_p: int
    strata: StratumSet
    n_hat_i: np.ndarray
    limit_state_ids: list
    evaluations: LimitStateEvaluations | None = field(default=None, repr=False)

    @property
    def unit_variance(self) -> np.ndarray:
        return self.cond_probs * (1.0 - self.cond_probs)

    @property
    def cardinal_flags(self) -> np.ndarray:
        """True where the preliminary unit variance is zero."""
        return self.unit_variance == 0.0

    @property
    def pf(self) -> np.ndarray:
        return self.strata.probs @ self.cond_probs

    def coefficients(self):
        return variance_coefficients(self.strata, self.cond_probs, self.psi, self.n_hat_i)


def table_from_arrays(strata: StratumSet, cond_probs, psi=None, n_p: int = 1, n_hat_i=None,
                      limit_state_ids=None) -> UnitVarianceTable:
    P = np.atleast_2d(np.asarray(cond_probs, dtype=float).T).T
    if P.ndim == 1:
        P = P[:, None]
    psi = np.ones_like(P) if psi is None else np.asarray(psi, dtype=float).reshape(P.shape)
    n_hat_i = np.full(strata.m, np.iinfo(np.int64).max // 4) if n_hat_i is None else np.asarray(n_hat_i)
    ids = limit_state_ids or [f"ls{h + 1}" for h in range(P.shape[1])]
    return UnitVarianceTable(P, psi, int(n_p), strata, n_hat_i, list(ids))


def preliminary_study(phase1: PhaseIResult, model: ModelHandle, n_p: int, seed: int,
                      workers: int = 1) -> UnitVarianceTable:
    """Evaluate every limit state on ``n_p`` samples per stratum (kept for Phase-II)."""
    n_hat_i = phase1.n_hat_i
    if n_p < 2:
        raise ValueError("n_p must be at least 2")
    if n_p > n_hat_i.min():
        raise ValueError(f"n_p={n_p} exceeds the smallest stratum bank ({int(n_hat_i.min())})")
    sel = select_phase2(phase1, np.full(phase1.strata.m, n_p), seed, model)
    evals, _ = evaluate_selection(model, phase1, sel, workers)
    m, H = phase1.strata.m, len(model.limit_states)
    P = np.empty((m, H))
    psi = np.empty((m, H))
    for i in range(1, m + 1):
        rows = sel.rows[i - 1]
        for h in range(H):
            P[i - 1, h], psi[i - 1, h], _ = _stratum_stats(phase1, rows, evals.indicators[i - 1][:, h], i)
    return UnitVarianceTable(P, psi, n_p, phase1.strata, n_hat_i, model.limit_state_ids, evals)


def predicted_cov(table: UnitVarianceTable, n) -> np.ndarray:
    """Predicted ``kappa_h`` for allocation ``n``; NaN where ``P_f = 0``."""
    const, coef = table.coefficients()
    var = np.maximum(const + (coef / np.asarray(n, dtype=float)[:, None]).sum(axis=0), 0.0)
    pf = table.pf
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pf > 0, np.sqrt(var) / pf, np.nan)


def feasibility_floor(table: UnitVarianceTable) -> np.ndarray:
    """``kappa_h`` with every bank fully used, the best any allocation can do."""
    return predicted_cov(table, table.n_hat_i)


@dataclass
class AllocationPlan:
    n: np.ndarray
    kappa: np.ndarray
    targets: np.ndarray
    effective_targets: np.ndarray
    feasible: np.ndarray
    floor: np.ndarray
    n_p: int
    n_hat_i: np.ndarray
    limit_state_ids: list
    cardinal: np.ndarray

    @property
    def total(self) -> int:
        return int(self.n.sum())

    @property
    def additional(self) -> int:
        return int(self.n.sum() - self.n_p * self.n.size)


def _violation(kappa, targets):
    excess = np.where(np.isnan(kappa), 0.0, np.maximum(0.0, kappa - targets))
    return float(np.sum(excess * excess))


def optimal_allocation(table: UnitVarianceTable, targets, caps=None, n_p: int | None = None,
                       block: int = 1, relax: float = DEFAULT_RELAX, strict: bool = False) -> AllocationPlan:
    """Greedy marginal-decrement allocation followed by a pruning pass.

    Limit states whose floor exceeds the target are marked infeasible and
    pursued to ``relax * floor`` instead (or rejected with ``strict``).
    Limit states without observed failures impose no constraint.
    """
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (table.cond_probs.shape[1],)).copy()
    if np.any(~(targets > 0)):
        raise ValueError("targets must be positive")
    caps = np.asarray(table.n_hat_i if caps is None else caps, dtype=np.int64)
    n_p = table.n_p if n_p is None else int(n_p)
    if np.any(caps < n_p):
        raise ValueError("a stratum cap is below the floor n_p")
    const, coef = table.coefficients()
    pf = table.pf
    active = pf > 0

    def kappa_of(n):
        var = np.maximum(const + (coef / n[:, None]).sum(axis=0), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(active, np.sqrt(var) / pf, np.nan)

    floor = kappa_of(caps.astype(float))
    feasible = ~(active & (floor > targets))
    if strict and not feasible.all():
        raise InfeasibleTargetError({table.limit_state_ids[h]: float(floor[h])
                                     for h in np.flatnonzero(~feasible)})
    eff = np.where(feasible, targets, np.maximum(targets, relax * floor))

    n = np.full(caps.size, n_p, dtype=np.int64)
    cur = _violation(kappa_of(n.astype(float)), eff)
    while cur > 0.0:
        best_i, best_v = -1, cur
        for i in range(n.size):
            if n[i] >= caps[i]:
                continue
            trial = n.copy()
            trial[i] = min(caps[i], n[i] + block)
            v = _violation(kappa_of(trial.astype(float)), eff)
            if v < best_v:  # strict: ties keep the lowest index
                best_i, best_v = i, v
        if best_i < 0:
            break
        n[best_i] = min(caps[best_i], n[best_i] + block)
        cur = best_v

    if cur == 0.0:
        # drop samples that are no longer needed; certificate: no single
        # decrement stays within every target
        changed = True
        while changed:
            changed = False
            for i in range(n.size):
                while n[i] > n_p:
                    trial = n.copy()
                    trial[i] -= 1
                    if _violation(kappa_of(trial.astype(float)), eff) == 0.0:
                        n = trial
                        changed = True
                    else:
                        break
    return AllocationPlan(n, kappa_of(n.astype(float)), targets, eff, feasible, floor, n_p,
                          caps.copy(), list(table.limit_state_ids), table.cardinal_flags.any(axis=1))


def equal_allocation(n_hat_i, per_stratum: int) -> np.ndarray:
    """Constant ``n_i`` capped by each bank."""
    return np.minimum(np.asarray(n_hat_i), int(per_stratum))
