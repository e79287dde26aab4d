import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exact_min_allocation
from stratsim.allocate import (InfeasibleTargetError, equal_allocation, feasibility_floor, optimal_allocation,
                               predicted_cov, preliminary_study, table_from_arrays)
from stratsim.phase1 import MODE_SUS, StratumSet, run_phase1_sus


def _strata(probs, cov=None):
    probs = np.asarray(probs, dtype=float)
    thr = np.arange(probs.size + 1, dtype=float)
    thr[0], thr[-1] = -math.inf, math.inf
    cov = np.zeros((probs.size, probs.size)) if cov is None else cov
    return StratumSet(thr, probs, cov, MODE_SUS)


def test_neyman_ratio():
    # stratum unit std sqrt(P(1-P)) of 0.1 and 0.4
    P1 = (1 - math.sqrt(0.96)) / 2
    P2 = 0.2
    table = table_from_arrays(_strata([0.9, 0.1]), [P1, P2], n_p=2, n_hat_i=[10**7, 10**7])
    pf = 0.9 * P1 + 0.1 * P2
    plan = optimal_allocation(table, 0.05, n_p=2)
    assert plan.feasible.all() and plan.kappa[0] <= 0.05
    assert plan.n[0] / plan.n[1] == pytest.approx(9 / 4, rel=1e-3)
    # Neyman closed form for the total
    need = (0.9 * 0.1 + 0.1 * 0.4) ** 2 / (0.05 * pf) ** 2
    assert plan.total == pytest.approx(need, rel=1e-3)


def test_infinite_target_keeps_prelim():
    table = table_from_arrays(_strata([0.5, 0.5]), [0.1, 0.3], n_p=25, n_hat_i=[1000, 1000])
    plan = optimal_allocation(table, math.inf)
    assert plan.n.tolist() == [25, 25] and plan.additional == 0


def test_target_met_at_prelim():
    table = table_from_arrays(_strata([0.5, 0.5]), [0.1, 0.3], n_p=25, n_hat_i=[1000, 1000])
    kappa = predicted_cov(table, [25, 25])[0]
    plan = optimal_allocation(table, kappa * 1.0001)
    assert plan.additional == 0


def test_infeasible_target():
    cov = np.array([[1e-4, -1e-4], [-1e-4, 1e-4]])
    table = table_from_arrays(_strata([0.5, 0.5], cov), [0.1, 0.3], n_p=5, n_hat_i=[100, 100])
    floor = feasibility_floor(table)[0]
    plan = optimal_allocation(table, floor / 2)
    assert not plan.feasible[0]
    assert plan.effective_targets[0] == pytest.approx(1.1 * floor)
    assert plan.kappa[0] <= 1.1 * floor
    with pytest.raises(InfeasibleTargetError) as err:
        optimal_allocation(table, floor / 2, strict=True)
    assert err.value.floors["ls1"] == pytest.approx(floor)


def test_validation():
    table = table_from_arrays(_strata([0.5, 0.5]), [0.1, 0.3], n_p=5, n_hat_i=[100, 100])
    with pytest.raises(ValueError):
        optimal_allocation(table, 0.0)
    with pytest.raises(ValueError):
        optimal_allocation(table, 0.1, caps=[3, 100])


def _random_table(seed, m, H):
    g = np.random.default_rng(seed)
    probs = g.dirichlet(np.ones(m))
    P = g.uniform(0.01, 0.6, size=(m, H))
    psi = g.uniform(1.0, 4.0, size=(m, H))
    A = g.normal(size=(m, m)) * 1e-3
    s = _strata(probs, A @ A.T * 1e-2)
    return table_from_arrays(s, P, psi, n_p=3, n_hat_i=np.full(m, 60))


@pytest.mark.parametrize("seed", range(12))
def test_greedy_close_to_exhaustive(seed):
    table = _random_table(seed, 3, 2)
    floor = feasibility_floor(table)
    targets = floor * np.random.default_rng(seed).uniform(1.3, 2.5, size=2)
    plan = optimal_allocation(table, targets)
    const, coef = table.coefficients()
    total, n_best = exact_min_allocation(const, coef, table.pf, targets, 3, table.n_hat_i)
    assert total is not None
    assert np.all(plan.kappa <= targets * (1 + 1e-12))
    assert plan.total <= total * 1.05 + 1, (plan.n, n_best)


@given(seed=st.integers(0, 10**6), lo=st.floats(1.2, 3.0), step=st.floats(1.01, 2.0))
@settings(max_examples=60, deadline=None)
def test_looser_target_needs_no_more(seed, lo, step):
    table = _random_table(seed, 4, 1)
    floor = feasibility_floor(table)[0]
    a = optimal_allocation(table, floor * lo)
    b = optimal_allocation(table, floor * lo * step)
    assert b.total <= a.total


@given(seed=st.integers(0, 10**6), t=st.floats(1.2, 4.0))
@settings(max_examples=60, deadline=None)
def test_decrement_certificate(seed, t):
    table = _random_table(seed, 4, 2)
    targets = feasibility_floor(table) * t
    plan = optimal_allocation(table, targets)
    assert np.all(plan.kappa <= targets * (1 + 1e-12))
    for i in range(4):
        if plan.n[i] > 3:
            trial = plan.n.copy()
            trial[i] -= 1
            assert np.any(predicted_cov(table, trial) > targets)


def test_block_increments_stay_feasible():
    table = _random_table(3, 4, 2)
    targets = feasibility_floor(table) * 1.5
    plan = optimal_allocation(table, targets, block=7)
    assert np.all(plan.kappa <= targets * (1 + 1e-12))


def test_cardinal_flags_and_zero_failure_states():
    table = table_from_arrays(_strata([0.5, 0.5]), [[0.0, 0.0], [0.2, 0.0]], n_p=5, n_hat_i=[100, 100])
    plan = optimal_allocation(table, [0.2, 0.2])
    assert plan.cardinal.tolist() == [True, True]
    assert math.isnan(plan.kappa[1]) and plan.feasible[1]


def test_equal_allocation():
    assert equal_allocation([50, 500, 120], 100).tolist() == [50, 100, 100]


def test_preliminary_study_shape(toy):
    r = run_phase1_sus(toy, 500, 4, 0.1, seed=2)
    t = preliminary_study(r, toy, 20, seed=2)
    assert t.cond_probs.shape == (4, 1) and t.psi.shape == (4, 1)
    assert sum(x.shape[0] for x in t.evaluations.indicators) == 4 * 20
    with pytest.raises(ValueError):
        preliminary_study(r, toy, 1, seed=2)
    with pytest.raises(ValueError):
        preliminary_study(r, toy, 10**6, seed=2)


def test_refresh_quadrupling_halves_floor(toy):
    base = run_phase1_sus(toy, 2500, 5, 0.3, seed=11)
    big = run_phase1_sus(toy, 10_000, 5, 0.3, seed=11, thresholds=base.strata.thresholds[1:-1])
    t1 = preliminary_study(base, toy, 25, seed=1)
    cond = t1.cond_probs
    f1 = feasibility_floor(table_from_arrays(base.strata, cond, t1.psi, 25, base.n_hat_i))[0]
    f2 = feasibility_floor(table_from_arrays(big.strata, cond, t1.psi, 25, big.n_hat_i))[0]
    assert f1 / f2 == pytest.approx(2.0, rel=0.25)


def test_floor_below_five_percent_at_ten_thousand(toy):
    r = run_phase1_sus(toy, 10_000, 5, 0.3, seed=0)
    t = preliminary_study(r, toy, 25, seed=0)
    assert feasibility_floor(t)[0] < 0.05
