import math

import numpy as np
import pytest

from stratsim.model import (InputSplit, LimitStateDef, ModelEvaluationError, ModelHandle, available_models,
                            eval_chi, eval_chi_batch, eval_indicators, evaluate_batch, get_model,
                            indicators_from_responses)
from stratsim.prob import DistributionSpec, RngStream


def test_toy_chi_values(toy):
    assert eval_chi(toy, [5.0]) == 125.0
    assert eval_chi(toy, [0.0]) == 0.0


def test_toy_indicators(toy):
    r, ind = eval_indicators(toy, [5.0], [math.pi / 2])
    assert r[0] == pytest.approx(575.0) and ind[0] == 0
    r, ind = eval_indicators(toy, [8.0], [math.pi / 2])
    assert r[0] == pytest.approx(1736.0) and ind[0] == 1


def test_dimension_checks(toy):
    with pytest.raises(ValueError):
        eval_chi(toy, [1.0, 2.0])
    with pytest.raises(ValueError):
        eval_indicators(toy, [1.0], [1.0, 2.0])


def _nan_model():
    inputs = InputSplit((DistributionSpec.normal(),), ())
    return ModelHandle("nan-test", inputs, lambda s: math.sqrt(s[0]) if s[0] >= 0 else math.nan,
                       lambda s, t: np.array([s[0]]), (LimitStateDef("a", 0, 1.0),))


def test_non_finite_chi_reports_sample_id():
    model = _nan_model()
    with pytest.raises(ModelEvaluationError) as exc:
        eval_chi(model, [-1.0], sample_id=17)
    assert exc.value.sample_id == 17 and "17" in str(exc.value)
    with pytest.raises(ModelEvaluationError) as exc:
        eval_chi_batch(model, np.array([[1.0], [4.0], [-2.0]]), ids=[10, 11, 12])
    assert exc.value.sample_id == 12


def test_non_finite_response_violates_every_limit_state():
    ls = (LimitStateDef("a", 0, 1.0), LimitStateDef("b", 1, 100.0))
    ind = indicators_from_responses([[0.0, np.nan], [0.0, 0.0], [2.0, 0.0], [np.inf, 0.0]], ls)
    assert ind.tolist() == [[1, 1], [0, 0], [1, 0], [1, 1]]


def test_indicator_consistency(toy):
    s = toy.inputs.sample_sigma(RngStream(3, (0,)), 2000)
    t = toy.inputs.sample_tau(RngStream(3, (1,)), 2000)
    resp, ind = evaluate_batch(toy, s, t)
    assert np.array_equal(ind[:, 0], (resp[:, 0] > 1500.0).astype(np.int8))


def test_limit_state_validation():
    with pytest.raises(ValueError):
        LimitStateDef("x", 0, math.inf)
    inputs = InputSplit((DistributionSpec.normal(),))
    with pytest.raises(ValueError):
        ModelHandle("dup", inputs, lambda s: 0.0, lambda s, t: np.zeros(1),
                    (LimitStateDef("a", 0, 1.0), LimitStateDef("a", 0, 2.0)))


def test_monte_carlo_matches_quadrature(toy, toy_pf):
    n_total, hits = 0, 0
    for b in range(10):
        s = toy.inputs.sample_sigma(RngStream(11, (0, b)), 1_000_000)
        t = toy.inputs.sample_tau(RngStream(11, (1, b)), 1_000_000)
        _, ind = evaluate_batch(toy, s, t)
        hits += int(ind.sum())
        n_total += s.shape[0]
    se = math.sqrt(toy_pf * (1 - toy_pf) / n_total)
    assert abs(hits / n_total - toy_pf) < 3 * se


def test_purity(toy):
    s = toy.inputs.sample_sigma(RngStream(4), 500)
    t = toy.inputs.sample_tau(RngStream(5), 500)
    r1, _ = evaluate_batch(toy, s, t)
    r2, _ = evaluate_batch(toy, s, t)
    assert np.array_equal(r1, r2)
    assert np.array_equal(eval_chi_batch(toy, s), eval_chi_batch(toy, s))


def test_worker_count_does_not_change_results(toy):
    s = toy.inputs.sample_sigma(RngStream(6), 400)
    t = toy.inputs.sample_tau(RngStream(7), 400)
    r1, i1 = evaluate_batch(toy, s, t, workers=1)
    r3, i3 = evaluate_batch(toy, s, t, workers=3)
    assert np.array_equal(r1, r3) and np.array_equal(i1, i3)


def test_registry():
    assert {"toy2d", "gm-sdof"} <= set(available_models())
    assert get_model("toy2d", thresholds=[1000.0]).limit_states[0].threshold == 1000.0
    with pytest.raises(KeyError):
        get_model("nope")


def test_input_split_blocks():
    split = InputSplit((DistributionSpec.uniform(0, 1), DistributionSpec.normal(size=4)),
                       (DistributionSpec.uniform(2, 3),))
    assert split.sigma_dim == 5 and split.tau_dim == 1
    s = split.sample_sigma(RngStream(1), 10)
    assert s.shape == (10, 5) and np.all((s[:, 0] > 0) & (s[:, 0] < 1))
    np.testing.assert_allclose(split.sigma_from_normal(split.sigma_to_normal(s)), s, rtol=1e-9)
