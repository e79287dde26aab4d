"""Campaign orchestration: Phase-I, preliminary study, allocation, Phase-II, report.

:func:`run_campaign` runs everything in memory; :class:`Campaign` runs the
same stages one at a time against an on-disk store so a campaign can be
resumed or audited.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import store
from .allocate import AllocationPlan, UnitVarianceTable, equal_allocation, optimal_allocation, preliminary_study
from .estimators import (NO_FAILURES, Curve, LimitStateEstimate, LimitStateEvaluations, PhaseIISelection,
                         estimate_all, evaluate_selection, hazard_curve, mc_equivalent_ratio,
                         response_aer_curve, select_phase2, to_aer_beta)
from .fragility import FragilityFitError, fragility_fit
from .model import ModelHandle, eval_chi_batch, evaluate_batch, get_model
from .phase1 import MODE_MC, MODE_SUS, PhaseIResult, StratumSet, run_phase1_mc, run_phase1_sus
from .prob import RngStream

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULTS",
    "load_config",
    "validate_config",
    "choose_mode",
    "run_campaign",
    "CampaignResult",
    "Campaign",
    "StageOrderError",
]

DEFAULTS = {
    "model": {"name": "toy2d", "params": {}},
    "mode": "sus",               # auto | mc | sus
    "cost_ratio_threshold": 0.01,
    "m": 5,
    "p": 0.1,
    "N": 2000,                   # per-level count (SuS)
    "n_hat": None,               # total Phase-I count (MC); default N / p**(m-1)
    "thresholds": None,          # interior thresholds chi_1..chi_{m-1}
    "n_p": 25,
    "targets": 0.1,              # number or {limit_state_id: target}
    "rate": None,                # events per year; model default when omitted
    "horizon": 50,
    "seed": 0,
    "workers": 1,
    "block": 1,
    "relax": 1.1,
    "equal_allocation": None,    # samples per stratum; skips prelim/allocate
    "hazard_points": 20,
    "curve_points": 20,
    "fragility": None,           # limit state id to fit against mean chi per stratum
}

STAGES = ("phase1", "prelim", "allocate", "phase2", "report")


class StageOrderError(store.StageError):
    pass


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, **overrides) -> dict:
    """YAML config merged over :data:`DEFAULTS`; ``None`` overrides are ignored."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    return validate_config(cfg)


def validate_config(cfg: dict) -> dict:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if cfg["mode"] not in ("auto", MODE_MC, MODE_SUS):
        raise ValueError("mode must be auto, mc or sus")
    if not 0 < cfg["p"] < 1:
        raise ValueError("p must lie in (0, 1)")
    if not 0.1 <= cfg["p"] <= 0.3:
        warnings.warn(f"p={cfg['p']} is outside the usual range [0.1, 0.3]")
    for key in ("m", "N", "n_p", "horizon", "workers", "block", "hazard_points", "curve_points"):
        if cfg[key] is not None and not cfg[key] > 0:
            raise ValueError(f"{key} must be positive")
    t = cfg["targets"]
    vals = t.values() if isinstance(t, dict) else [t]
    if any(not float(v) > 0 for v in vals):
        raise ValueError("targets must be positive")
    if not 0 <= int(cfg["seed"]) < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return cfg


def target_vector(cfg, ids) -> np.ndarray:
    t = cfg["targets"]
    if isinstance(t, dict):
        default = float(t.get("default", math.inf))
        return np.array([float(t.get(i, default)) for i in ids])
    return np.full(len(ids), float(t))


def event_rate(cfg, model: ModelHandle) -> float:
    if cfg["rate"] is not None:
        return float(cfg["rate"])
    return float(model.event_rate) if model.event_rate is not None else 1.0


# --------------------------------------------------------------------------
# mode selection
# --------------------------------------------------------------------------

def _time_per_call(fn, n_calls):
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) / n_calls


def choose_mode(model: ModelHandle, cfg: dict, n_probe: int = 8):
    """Returns ``(mode, info)``; MC when ``C(H) / (P(S_m) C(G))`` is below the threshold."""
    if cfg["mode"] != "auto":
        return cfg["mode"], {"requested": cfg["mode"]}
    stream = RngStream(int(cfg["seed"]), (9, 0))
    sig = model.inputs.sample_sigma(stream, n_probe)
    tau = model.inputs.sample_tau(stream.child(1), n_probe)
    eval_chi_batch(model, sig[:1])  # warm-up (JIT, caches)
    evaluate_batch(model, sig[:1], tau[:1])
    c_h = model.cost_chi or _time_per_call(lambda: eval_chi_batch(model, sig), n_probe)
    c_g = model.cost_response or _time_per_call(lambda: evaluate_batch(model, sig, tau), n_probe)
    p_last = cfg["p"] ** (cfg["m"] - 1)
    ratio = c_h / (p_last * max(c_g, 1e-12))
    mode = MODE_MC if ratio < cfg["cost_ratio_threshold"] else MODE_SUS
    info = {"cost_chi_s": c_h, "cost_response_s": c_g, "ratio": ratio, "chosen": mode}
    log.info("mode auto-selection: C(H)=%.3g s, C(G)=%.3g s, ratio=%.3g -> %s", c_h, c_g, ratio, mode)
    return mode, info


def _run_phase1(model, cfg, mode, N=None, thresholds=None):
    seed = int(cfg["seed"])
    thr = thresholds if thresholds is not None else cfg["thresholds"]
    if mode == MODE_MC:
        n_hat = cfg["n_hat"] or int(math.ceil(cfg["N"] / cfg["p"] ** (cfg["m"] - 1)))
        if thr is not None:
            return run_phase1_mc(model, n_hat, thresholds=thr, seed=seed)
        return run_phase1_mc(model, n_hat, m=cfg["m"], p=cfg["p"], seed=seed)
    return run_phase1_sus(model, int(N or cfg["N"]), cfg["m"], cfg["p"], seed=seed, thresholds=thr)


# --------------------------------------------------------------------------
# in-memory campaign
# --------------------------------------------------------------------------

@dataclass
class CampaignResult:
    phase1: PhaseIResult
    table: UnitVarianceTable | None
    plan: AllocationPlan | None
    evaluations: LimitStateEvaluations
    estimates: list
    rate: float
    horizon: float
    seed: int
    mode_info: dict = field(default_factory=dict)

    @property
    def n_evaluations(self) -> int:
        return self.evaluations.n_evaluated

    def summary_rows(self):
        rows = []
        for est in self.estimates:
            aer, beta = to_aer_beta(est.pf, self.rate, self.horizon)
            ratio = mc_equivalent_ratio(est.pf, est.cov, self.n_evaluations)
            rows.append({"limit_state": est.id, "pf": est.pf, "cov": est.cov, "aer": aer, "beta": beta,
                         "n_mc_over_n": ratio, "no_failures": est.no_failures})
        return rows


def run_campaign(model: ModelHandle | str, cfg: dict | None = None, **overrides) -> CampaignResult:
    """All four steps in memory (no store)."""
    cfg = validate_config(_merge(DEFAULTS if cfg is None else _merge(DEFAULTS, cfg),
                                 {k: v for k, v in overrides.items() if v is not None}))
    if isinstance(model, str):
        model = get_model(model, **cfg["model"].get("params", {}))
    mode, info = choose_mode(model, cfg)
    ph1 = _run_phase1(model, cfg, mode)
    seed = int(cfg["seed"])
    workers = int(cfg["workers"])
    if cfg["equal_allocation"]:
        table = plan = None
        n = equal_allocation(ph1.n_hat_i, cfg["equal_allocation"])
        prev = None
    else:
        table = preliminary_study(ph1, model, int(cfg["n_p"]), seed, workers)
        plan = optimal_allocation(table, target_vector(cfg, model.limit_state_ids), block=int(cfg["block"]),
                                  relax=float(cfg["relax"]))
        n = plan.n
        prev = table.evaluations
    sel = select_phase2(ph1, n, seed, model)
    evals, _ = evaluate_selection(model, ph1, sel, workers, previous=prev)
    return CampaignResult(ph1, table, plan, evals, estimate_all(ph1, evals), event_rate(cfg, model),
                          float(cfg["horizon"]), seed, info)


# --------------------------------------------------------------------------
# (de)serialisation of stage payloads
# --------------------------------------------------------------------------

_P1_OPTIONAL = ("cond_probs", "delta", "gamma")


def _phase1_arrays(r: PhaseIResult):
    s = r.strata
    arrays = {"thresholds": s.thresholds, "probs": s.probs, "prob_cov": s.prob_cov}
    for k in _P1_OPTIONAL:
        if getattr(s, k) is not None:
            arrays[k] = getattr(s, k)
    arrays.update(chi=r.chi, stratum=r.stratum, chain_id=r.chain_id, state_index=r.state_index,
                  level=r.level, sample_key=r.sample_key)
    if r.sigma is not None:
        arrays["sigma"] = r.sigma
    meta = {"mode": s.mode, "p": s.p, "N": r.N, "seed": r.seed, "model": r.model_name,
            "block_size": r.block_size, "sigma_dim": r.sigma_dim, "m": s.m}
    return arrays, meta


def _phase1_from(arrays, meta) -> PhaseIResult:
    strata = StratumSet(arrays["thresholds"], arrays["probs"], arrays["prob_cov"], meta["mode"], p=meta["p"],
                        N=meta["N"], **{k: arrays.get(k) for k in _P1_OPTIONAL})
    as_int = lambda k: arrays[k].astype(np.int64)
    return PhaseIResult(strata, arrays["chi"], as_int("stratum"), as_int("chain_id"), as_int("state_index"),
                        as_int("level"), arrays.get("sigma"), as_int("sample_key"), int(meta["N"]),
                        int(meta["seed"]), meta["model"], int(meta["block_size"]), int(meta["sigma_dim"]))


def _evals_arrays(ev: LimitStateEvaluations):
    sel = ev.selection
    strat = np.concatenate([np.full(r.size, i + 1) for i, r in enumerate(sel.rows)])
    return {
        "stratum": strat,
        "row": np.concatenate(sel.rows),
        "tau": np.concatenate(sel.tau, axis=0),
        "responses": np.concatenate(ev.responses, axis=0),
        "n_hat_i": sel.n_hat_i,
    }, {"seed": sel.seed, "limit_state_ids": list(ev.limit_state_ids)}


def _evals_from(arrays, meta, model: ModelHandle) -> LimitStateEvaluations:
    from .model import indicators_from_responses
    strat = arrays["stratum"].astype(int)
    m = arrays["n_hat_i"].size
    rows, taus, resp, ind = [], [], [], []
    for i in range(1, m + 1):
        k = strat == i
        rows.append(arrays["row"][k].astype(np.int64))
        taus.append(arrays["tau"][k])
        resp.append(arrays["responses"][k])
        ind.append(indicators_from_responses(arrays["responses"][k], model.limit_states))
    sel = PhaseIISelection(rows, taus, int(meta["seed"]), arrays["n_hat_i"].astype(np.int64))
    return LimitStateEvaluations(sel, resp, ind, list(meta["limit_state_ids"]))


# --------------------------------------------------------------------------
# staged campaign
# --------------------------------------------------------------------------

class Campaign:
    """Stage-by-stage campaign bound to an output directory."""

    def __init__(self, cfg: dict, out):
        self.cfg = validate_config(cfg)
        self.out = Path(out)
        self.model = get_model(cfg["model"]["name"], **cfg["model"].get("params", {}))
        self.cfg_hash = store.config_hash({k: v for k, v in self.cfg.items() if k != "workers"})

    # helpers --------------------------------------------------------------
    def _require(self, stage):
        if not store.stage_exists(self.out, stage):
            raise StageOrderError(f"stage '{stage}' must be run first (output directory {self.out})")
        return store.stage_hash(self.out, stage)

    def _load(self, stage, upstream=None):
        up_hash = self._require(upstream) if upstream else None
        self._require(stage)
        return store.read_stage(self.out, stage, upstream, up_hash)

    def load_phase1(self) -> PhaseIResult:
        arrays, meta, _ = self._load("phase1")
        return _phase1_from(arrays, meta)

    # stages ---------------------------------------------------------------
    def phase1(self, refresh_N: int | None = None) -> PhaseIResult:
        """Phase-I; with ``refresh_N`` rerun SuS at the stored thresholds."""
        if refresh_N is not None:
            old = self.load_phase1()
            thr = old.strata.thresholds[1:-1]
            res = run_phase1_sus(self.model, int(refresh_N), old.strata.m, self.cfg["p"],
                                 seed=int(self.cfg["seed"]), thresholds=thr)
            info = {"refresh_N": int(refresh_N), "previous_N": old.N}
        else:
            mode, info = choose_mode(self.model, self.cfg)
            res = _run_phase1(self.model, self.cfg, mode)
            info = {"mode": mode}  # timings are logged, not stored, to keep reruns byte-identical
        arrays, meta = _phase1_arrays(res)
        meta["mode_info"] = info
        store.write_stage(self.out, "phase1", arrays, meta, self.cfg_hash)
        self._write_strata_table(res)
        return res

    def prelim(self) -> UnitVarianceTable:
        ph1 = self.load_phase1()
        table = preliminary_study(ph1, self.model, int(self.cfg["n_p"]), int(self.cfg["seed"]),
                                  int(self.cfg["workers"]))
        arrays, meta = _evals_arrays(table.evaluations)
        arrays.update(cond_probs=table.cond_probs, psi=table.psi)
        meta["n_p"] = table.n_p
        store.write_stage(self.out, "prelim", arrays, meta, self.cfg_hash, store.stage_hash(self.out, "phase1"))
        return table

    def load_prelim(self, ph1=None) -> UnitVarianceTable:
        ph1 = ph1 or self.load_phase1()
        arrays, meta, _ = self._load("prelim", "phase1")
        ev = _evals_from(arrays, meta, self.model)
        return UnitVarianceTable(arrays["cond_probs"], arrays["psi"], int(meta["n_p"]), ph1.strata,
                                 ph1.n_hat_i, list(meta["limit_state_ids"]), ev)

    def allocate(self) -> AllocationPlan:
        table = self.load_prelim()
        plan = optimal_allocation(table, target_vector(self.cfg, self.model.limit_state_ids),
                                  block=int(self.cfg["block"]), relax=float(self.cfg["relax"]))
        arrays = {"n": plan.n, "kappa": plan.kappa, "targets": plan.targets,
                  "effective_targets": plan.effective_targets, "feasible": plan.feasible, "floor": plan.floor}
        store.write_stage(self.out, "allocate", arrays, {"n_p": plan.n_p, "ids": plan.limit_state_ids},
                          self.cfg_hash, store.stage_hash(self.out, "prelim"))
        self._write_plan_table(table.strata, plan)
        for h in np.flatnonzero(~plan.feasible):
            log.warning("%s: target %.3g is below the achievable c.o.v. %.3g; refresh Phase-I with a larger N "
                        "(e.g. --refresh-N)", plan.limit_state_ids[h], plan.targets[h], plan.floor[h])
        return plan

    def phase2(self) -> LimitStateEvaluations:
        ph1 = self.load_phase1()
        seed = int(self.cfg["seed"])
        if self.cfg["equal_allocation"]:
            n = equal_allocation(ph1.n_hat_i, self.cfg["equal_allocation"])
            prev, upstream = None, "phase1"
        else:
            arrays, _, _ = self._load("allocate", "prelim")
            n = arrays["n"].astype(np.int64)
            prev, upstream = self.load_prelim(ph1).evaluations, "allocate"
        sel = select_phase2(ph1, n, seed, self.model)
        evals, n_new = evaluate_selection(self.model, ph1, sel, int(self.cfg["workers"]), previous=prev)
        arrays, meta = _evals_arrays(evals)
        meta["upstream"] = upstream
        meta["new_evaluations"] = n_new
        store.write_stage(self.out, "phase2", arrays, meta, self.cfg_hash, store.stage_hash(self.out, upstream))
        return evals

    def report(self) -> dict:
        ph1 = self.load_phase1()
        hdr = json.loads((self.out / "phase2.json").read_text()) if store.stage_exists(self.out, "phase2") else None
        if hdr is None:
            raise StageOrderError("stage 'phase2' must be run first")
        arrays, meta, _ = self._load("phase2", hdr["meta"]["upstream"])
        evals = _evals_from(arrays, meta, self.model)
        ests = estimate_all(ph1, evals)
        rate = event_rate(self.cfg, self.model)
        result = CampaignResult(ph1, None, None, evals, ests, rate, float(self.cfg["horizon"]),
                                int(self.cfg["seed"]))
        return write_report(self.out, result, self.cfg, self.model)

    # tables ---------------------------------------------------------------
    def _write_strata_table(self, res: PhaseIResult):
        s = res.strata
        with open(self.out / "strata.csv", "w") as fh:
            fh.write("stratum,chi_lower,chi_upper,prob,prob_std,n_hat\n")
            for i in range(1, s.m + 1):
                lo, hi = s.bounds(i)
                sd = math.sqrt(max(s.prob_cov[i - 1, i - 1], 0.0))
                fh.write(f"{i},{_num(lo)},{_num(hi)},{_num(s.probs[i - 1])},{_num(sd)},"
                         f"{res.n_hat_i[i - 1]}\n")

    def _write_plan_table(self, strata: StratumSet, plan: AllocationPlan):
        with open(self.out / "allocation.csv", "w") as fh:
            fh.write("stratum,chi_lower,chi_upper,prob,n_alloc,cardinal_flag\n")
            for i in range(1, strata.m + 1):
                lo, hi = strata.bounds(i)
                fh.write(f"{i},{_num(lo)},{_num(hi)},{_num(strata.probs[i - 1])},{plan.n[i - 1]},"
                         f"{int(plan.cardinal[i - 1])}\n")
            fh.write("\n# limit_state,target,effective_target,predicted_cov,floor,feasible\n")
            for h, lsid in enumerate(plan.limit_state_ids):
                fh.write(f"# {lsid},{_num(plan.targets[h])},{_num(plan.effective_targets[h])},{_num(plan.kappa[h])},"
                         f"{_num(plan.floor[h])},{int(plan.feasible[h])}\n")


def _num(x) -> str:
    return repr(float(x))


def _write_curve(path, curve: Curve, xname):
    np.savetxt(path, curve.to_rows(), delimiter=",", header=f"{xname},rate,std_error", comments="", fmt="%.10g")


def _grid(values, n, lower=None):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    lo = float(v.min()) if lower is None or not math.isfinite(lower) else float(lower)
    hi = float(v.max())
    if lo > 0 and hi > lo:
        return np.geomspace(lo, hi, n)
    return np.linspace(lo, hi, n)


def write_report(out, result: CampaignResult, cfg: dict, model: ModelHandle) -> dict:
    """Summary text, limit-state table, curves and optional fragility fit."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = result.summary_rows()
    ph1 = result.phase1
    n = result.n_evaluations
    lines = [f"seed: {result.seed}", f"mode: {ph1.strata.mode}", f"strata: {ph1.strata.m}",
             f"phase-I samples: {ph1.n_hat}", f"limit-state evaluations: {n}", ""]
    lines.append(f"{'limit state':<18}{'P_f':>12}{'c.o.v.':>22}{'AER':>12}{'beta_' + str(int(result.horizon)):>10}"
                 f"{'n_MC/n':>10}")
    with open(out / "limit_states.csv", "w") as fh:
        fh.write("limit_state,pf,cov,aer,beta,n_mc_over_n\n")
        for r in rows:
            cov = NO_FAILURES if r["cov"] is None else f"{_num(r['cov'])}"
            fh.write(f"{r['limit_state']},{_num(r['pf'])},{cov},{_num(r['aer'])},{_num(r['beta'])},"
                     f"{_num(r['n_mc_over_n'])}\n")
            cov_s = NO_FAILURES if r["cov"] is None else f"{100 * r['cov']:.1f}%"
            lines.append(f"{r['limit_state']:<18}{r['pf']:>12.4g}{cov_s:>22}{r['aer']:>12.4g}{r['beta']:>10.3f}"
                         f"{r['n_mc_over_n']:>10.3g}")
    hz = hazard_curve(ph1, result.rate, _grid(ph1.chi, int(cfg["hazard_points"]), ph1.strata.thresholds[0]))
    _write_curve(out / "hazard_curve.csv", hz, "chi")
    for k in sorted({ls.response_index for ls in model.limit_states}):
        vals = np.concatenate([r[:, k] for r in result.evaluations.responses])
        if np.isfinite(vals).any():
            curve = response_aer_curve(ph1, result.evaluations, k, result.rate,
                                       _grid(vals, int(cfg["curve_points"])))
            _write_curve(out / f"response_{k}_aer_curve.csv", curve, "threshold")
    report = {"seed": result.seed, "rows": rows, "n_evaluations": n}
    if cfg.get("fragility"):
        lines.append("")
        lines.append(_fragility_section(out, result, cfg["fragility"], report))
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=1, default=lambda x: None if x is None else float(x))
    return report


def _fragility_section(out, result, lsid, report):
    ids = [e.id for e in result.estimates]
    if lsid not in ids:
        return f"fragility: unknown limit state {lsid!r}"
    est = result.estimates[ids.index(lsid)]
    ph1 = result.phase1
    x = np.array([ph1.chi[ph1.bank(i)].mean() for i in range(1, ph1.strata.m + 1)])
    keep = x > 0
    try:
        fit = fragility_fit(x[keep], est.cond_probs[keep], est.n_i[keep].astype(float),
                            np.sqrt(est.cond_var[keep]))
    except FragilityFitError as exc:
        return f"fragility ({lsid}): {exc}"
    report["fragility"] = {"limit_state": lsid, "median": fit.median, "dispersion": fit.dispersion,
                           "lower_median": fit.lower_median, "upper_median": fit.upper_median}
    grid = np.geomspace(x[keep].min() / 2, x[keep].max() * 2, 50)
    np.savetxt(out / "fragility.csv", np.column_stack([grid, fit.cdf(grid), fit.lower(grid), fit.upper(grid)]),
               delimiter=",", header="chi,central,lower,upper", comments="", fmt="%.10g")
    np.savetxt(out / "fragility_points.csv", np.column_stack([x, est.cond_probs, np.sqrt(est.cond_var), est.n_i]),
               delimiter=",", header="mean_chi,cond_prob,std_error,n", comments="", fmt="%.10g")
    return (f"fragility ({lsid}): median {fit.median:.4g}, dispersion {fit.dispersion:.3f}, "
            f"bound medians [{fit.upper_median:.4g}, {fit.lower_median:.4g}]")
