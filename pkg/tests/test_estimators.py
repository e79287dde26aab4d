import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from oracles import ar_lag_sum, binary_ar_chains
from stratsim.benchmarks.toy import chi_exceedance, toy_oracle
from stratsim.estimators import (NO_FAILURES, InfeasibleSelectionError, conditional_failure_prob, estimate_all,
                                 evaluate_selection, hazard_curve, mc_equivalent_ratio, overall_estimate,
                                 response_aer_curve, select_phase2, to_aer_beta, variance_coefficients)
from stratsim.phase1 import MODE_MC, MODE_SUS, StratumSet, run_phase1_mc, run_phase1_sus
from stratsim.pipeline import run_campaign


@pytest.fixture(scope="module")
def sus_run(toy):
    return run_phase1_sus(toy, 2000, 5, 0.1, seed=7)


# --------------------------------------------------------------------------
# selection
# --------------------------------------------------------------------------

def test_full_selection_is_identity(toy, sus_run):
    sel = select_phase2(sus_run, sus_run.n_hat_i, 1, toy)
    for i in range(1, 6):
        assert sorted(sel.rows[i - 1].tolist()) == sus_run.bank(i).tolist()
    assert np.all(sel.nu == 1.0)


def test_selection_errors(toy, sus_run):
    n = np.full(5, 10)
    n[2] = 0
    with pytest.raises(InfeasibleSelectionError):
        select_phase2(sus_run, n, 1, toy)
    n[2] = sus_run.n_hat_i[2] + 1
    with pytest.raises(InfeasibleSelectionError):
        select_phase2(sus_run, n, 1, toy)
    with pytest.raises(ValueError):
        select_phase2(sus_run, [5, 5], 1, toy)


def test_selection_reproducible_and_nested(toy, sus_run):
    a = select_phase2(sus_run, [20, 30, 40, 50, 60], 3, toy)
    b = select_phase2(sus_run, [20, 30, 40, 50, 60], 3, toy)
    c = select_phase2(sus_run, [25, 30, 100, 50, 61], 3, toy)
    for i in range(5):
        assert np.array_equal(a.rows[i], b.rows[i]) and np.array_equal(a.tau[i], b.tau[i])
        assert np.array_equal(c.rows[i][: a.rows[i].size], a.rows[i])
        assert np.array_equal(c.tau[i][: a.tau[i].size], a.tau[i])
        assert np.unique(a.rows[i]).size == a.rows[i].size
        assert np.all(sus_run.stratum[a.rows[i]] == i + 1)
    assert a.nu.tolist() == (np.array([20, 30, 40, 50, 60]) / sus_run.n_hat_i).tolist()


def test_evaluation_reuse(toy, sus_run):
    small = select_phase2(sus_run, [5] * 5, 2, toy)
    big = select_phase2(sus_run, [8] * 5, 2, toy)
    ev_small, n1 = evaluate_selection(toy, sus_run, small)
    ev_big, n2 = evaluate_selection(toy, sus_run, big, previous=ev_small)
    fresh, _ = evaluate_selection(toy, sus_run, big)
    assert n1 == 25 and n2 == 15
    for i in range(5):
        assert np.array_equal(ev_big.responses[i], fresh.responses[i])


# --------------------------------------------------------------------------
# conditional estimates
# --------------------------------------------------------------------------

def test_all_zero_indicators():
    assert conditional_failure_prob(np.zeros(50), np.arange(50) // 10, np.arange(50) % 10) == (0.0, 1.0, 0.0)
    P, psi, var = conditional_failure_prob(np.ones(20))
    assert (P, psi, var) == (1.0, 1.0, 0.0)


def test_iid_indicators_binomial_variance():
    I = np.array([1, 0, 0, 1, 0, 0, 0, 0, 1, 0])
    P, psi, var = conditional_failure_prob(I, np.arange(10), np.zeros(10))
    assert P == 0.3 and psi == 1.0 and var == pytest.approx(0.3 * 0.7 / 10, rel=1e-15)
    assert conditional_failure_prob(I, np.zeros(10), np.arange(10), iid=True)[1] == 1.0


def test_psi_matches_ar1_closed_form():
    g = np.random.default_rng(17)
    L, rho, P = 10, 0.5, 0.2
    psi = []
    for _ in range(200):
        I = binary_ar_chains(50, L, P, rho, g)
        cid, st_ = np.meshgrid(np.arange(50), np.arange(L), indexing="ij")
        psi.append(conditional_failure_prob(I.ravel(), cid.ravel(), st_.ravel())[1])
    assert np.mean(psi) == pytest.approx(1.0 + ar_lag_sum(L, rho), rel=0.10)


def test_psi_clamped_at_zero():
    # perfectly alternating chains: strongly negative lag-1 products
    I = np.tile([1.0, 0.0], 50)
    _, psi, var = conditional_failure_prob(I, np.zeros(100), np.arange(100))
    assert psi >= 0.0 and var >= 0.0


# --------------------------------------------------------------------------
# overall estimates
# --------------------------------------------------------------------------

def _mc_strata(probs, n_hat):
    probs = np.asarray(probs, dtype=float)
    thr = np.arange(probs.size + 1, dtype=float)
    thr[-1] = math.inf
    return StratumSet(thr, probs, np.zeros((probs.size, probs.size)), MODE_MC, N=n_hat)


def _classic_strata(probs):
    probs = np.asarray(probs, dtype=float)
    thr = np.arange(probs.size + 1, dtype=float)
    thr[-1] = math.inf
    return StratumSet(thr, probs, np.zeros((probs.size, probs.size)), MODE_SUS)


def test_single_stratum_is_plain_mc():
    s = _mc_strata([1.0], 5000)
    est = overall_estimate(s, [0.02], [1.0], [5000], [5000])
    assert est.pf == 0.02
    assert est.cov == pytest.approx(math.sqrt(0.98 / (5000 * 0.02)), rel=1e-12)


@given(P=st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6),
       nu=st.lists(st.floats(0.05, 1.0), min_size=6, max_size=6),
       n_hat=st.integers(1000, 10**6), seed=st.integers(0, 2**31))
@settings(max_examples=200, deadline=None)
def test_mc_variance_is_double_sampling_formula(P, nu, n_hat, seed):
    m = len(P)
    w = np.random.default_rng(seed).dirichlet(np.ones(m))
    s = _mc_strata(w, n_hat)
    P = np.array(P)
    n_hat_i = w * n_hat
    n_i = np.array(nu[:m]) * n_hat_i
    pf = float(np.dot(w, P))
    literal = pf * (1 - pf) / n_hat + np.sum(w * P * (1 - P) / n_hat * (1 / np.array(nu[:m]) - 1))
    const, coef = variance_coefficients(s, P, np.ones(m), n_hat_i)
    assert const + np.sum(coef / n_i) == pytest.approx(literal, rel=1e-9, abs=1e-300)


def test_classic_stratified_cov_by_brute_force():
    probs = np.array([0.7, 0.25, 0.05])
    P = np.array([0.01, 0.1, 0.6])
    n = np.array([200, 100, 50])
    s = _classic_strata(probs)
    est = overall_estimate(s, P, np.ones(3), n, n)
    g = np.random.default_rng(3)
    reps = g.binomial(n[None, :], P[None, :], size=(40_000, 3)) / n
    emp = reps @ probs
    emp_cov = emp.std(ddof=1) / emp.mean()
    assert est.cov == pytest.approx(emp_cov, rel=0.02)


@given(P=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), seed=st.integers(0, 2**31))
@settings(max_examples=200, deadline=None)
def test_linearity(P, seed):
    w = np.random.default_rng(seed).dirichlet(np.ones(len(P)))
    s = _classic_strata(w)
    est = overall_estimate(s, P, np.ones(len(P)), np.full(len(P), 10), np.full(len(P), 10))
    assert est.pf == math.fsum(np.asarray(P) * w)
    assert est.pf == pytest.approx(float(np.dot(P, w)), rel=1e-15, abs=1e-300)
    assert 0.0 <= est.pf <= 1.0 + 1e-15


@given(P=st.lists(st.floats(0.01, 0.99), min_size=2, max_size=5), k=st.integers(0, 4),
       extra=st.integers(1, 500), mc=st.booleans())
@settings(max_examples=200, deadline=None)
def test_cov_non_increasing_in_n(P, k, extra, mc):
    m = len(P)
    assume(k < m)
    w = np.full(m, 1.0 / m)
    n_hat_i = np.full(m, 10_000)
    if mc:
        s = _mc_strata(w, int(n_hat_i.sum()))
    else:
        s = _classic_strata(w)
        s.prob_cov = np.diag(np.full(m, 1e-6))
    n = np.full(m, 50)
    a = overall_estimate(s, P, np.full(m, 1.5), n, n_hat_i)
    n2 = n.copy()
    n2[k] += extra
    b = overall_estimate(s, P, np.full(m, 1.5), n2, n_hat_i)
    assert b.cov <= a.cov * (1 + 1e-12)


def test_no_failures_sentinel():
    s = _classic_strata([0.5, 0.5])
    est = overall_estimate(s, [0.0, 0.0], [1.0, 1.0], [10, 10], [10, 10], id="x")
    assert est.no_failures and est.cov is None and est.cov_label == NO_FAILURES


# --------------------------------------------------------------------------
# rates and indices
# --------------------------------------------------------------------------

def test_aer_beta():
    aer, beta = to_aer_beta(1e-3, 0.67)
    assert aer == pytest.approx(6.7e-4, rel=1e-15)
    assert to_aer_beta(0.0, 0.67) == (0.0, math.inf)
    mpmath.mp.dps = 50
    q = 1 - (1 - mpmath.mpf("1e-4")) ** 50
    ref = float(-mpmath.sqrt(2) * mpmath.erfinv(2 * q - 1))
    _, beta = to_aer_beta(1e-4, 1.0)
    assert beta == pytest.approx(ref, rel=1e-12)
    assert round(beta, 3) == 2.577
    _, b10 = to_aer_beta(1e-4, 1.0, horizon=10)
    assert b10 > beta


def test_aer_domain_errors():
    with pytest.raises(ValueError):
        to_aer_beta(0.5, 2.0)
    with pytest.raises(ValueError):
        to_aer_beta(1.5, 0.1)
    with pytest.raises(ValueError):
        to_aer_beta(0.1, 0.0)


def test_mc_equivalent_ratio():
    assert mc_equivalent_ratio(1e-3, 0.1, 1000) == pytest.approx(0.999 / (1e-3 * 0.01 * 1000))
    assert math.isnan(mc_equivalent_ratio(0.0, None, 10))


# --------------------------------------------------------------------------
# curves
# --------------------------------------------------------------------------

def test_hazard_boundary_identity(sus_run):
    lam = 0.67
    s = sus_run.strata
    grid = np.concatenate([[np.nextafter(sus_run.chi.min(), -np.inf)], s.thresholds[1:-1]])
    hz = hazard_curve(sus_run, lam, grid)
    assert hz.rate[0] == lam
    for i in range(1, s.m):
        assert hz.rate[i] == lam * math.fsum(s.probs[i:])


def test_hazard_curve_matches_analytic_tail(sus_run):
    lam = 0.67
    grid = np.geomspace(sus_run.chi.min(), np.quantile(sus_run.chi[sus_run.stratum == 5], 0.95), 20)
    hz = hazard_curve(sus_run, lam, grid)
    truth = lam * chi_exceedance(grid)
    assert np.all(np.diff(hz.rate) <= 0)
    assert np.all(np.abs(hz.rate - truth) <= 3 * hz.stderr + 1e-15), (hz.rate / truth, hz.stderr / truth)


def test_hazard_curve_mc_mode(toy):
    r = run_phase1_mc(toy, 200_000, m=3, p=0.1, seed=2)
    grid = np.linspace(50, 400, 20)
    hz = hazard_curve(r, 1.0, grid)
    empirical = np.array([np.mean(r.chi > v) for v in grid])
    np.testing.assert_allclose(hz.rate, empirical, rtol=1e-12)
    np.testing.assert_allclose(hz.stderr, np.sqrt(empirical * (1 - empirical) / 200_000), rtol=1e-9)


def test_response_curve(toy, toy_pf):
    res = run_campaign(toy, {"N": 2000, "m": 5, "p": 0.1, "equal_allocation": 300, "seed": 4})
    lam = 0.5
    vals = np.concatenate([r[:, 0] for r in res.evaluations.responses])
    c = response_aer_curve(res.phase1, res.evaluations, 0, lam, [vals.min() - 1, 1500.0, vals.max() + 1])
    assert c.rate[0] == lam and c.rate[2] == 0.0
    assert abs(c.rate[1] - lam * toy_pf) <= 3 * c.stderr[1]
    est = res.estimates[0]
    assert c.rate[1] == pytest.approx(lam * est.pf, rel=1e-12)


def test_response_curve_counts_collapse_as_exceeding(toy, sus_run):
    sel = select_phase2(sus_run, [10] * 5, 1, toy)
    ev, _ = evaluate_selection(toy, sus_run, sel)
    ev.responses[4][:, 0] = np.nan
    c = response_aer_curve(sus_run, ev, 0, 1.0, [1e9])
    assert c.rate[0] == pytest.approx(sus_run.strata.probs[4], rel=1e-15)


# --------------------------------------------------------------------------
# end-to-end statistics
# --------------------------------------------------------------------------

def test_estimates_unbiased_on_toy(toy, toy_pf):
    pf = [run_campaign(toy, {"N": 1000, "m": 4, "p": 0.1, "equal_allocation": 200, "seed": s}).estimates[0].pf
          for s in range(60)]
    se = np.std(pf, ddof=1) / math.sqrt(len(pf))
    assert abs(np.mean(pf) - toy_pf) < 3 * se


def test_quadrupling_budget_halves_spread(toy):
    def spread(N, n):
        pf = [run_campaign(toy, {"N": N, "m": 4, "p": 0.1, "equal_allocation": n, "seed": s}).estimates[0].pf
              for s in range(100)]
        return np.std(pf, ddof=1)

    ratio = spread(500, 50) / spread(2000, 200)
    assert 2 / 1.4 <= ratio <= 2 * 1.4, ratio


def test_estimate_all_structure(toy, sus_run):
    sel = select_phase2(sus_run, [30] * 5, 1, toy)
    ev, _ = evaluate_selection(toy, sus_run, sel)
    (est,) = estimate_all(sus_run, ev)
    assert est.cond_probs.shape == (5,) and est.psi[0] == 1.0
    assert est.pf == math.fsum(est.cond_probs * sus_run.strata.probs)
    assert np.all(est.n_i == 30)
