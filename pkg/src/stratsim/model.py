"""Stratification model and limit-state ensemble interface.

A model splits its inputs into ``sigma`` (drives the stratification variable
``chi = H(sigma)``) and ``tau`` (everything else, independent of ``sigma``).
One response evaluation ``G(sigma, tau)`` serves every limit state.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .prob import DistributionSpec, RngStream

__all__ = [
    "InputSplit",
    "LimitStateDef",
    "ModelHandle",
    "ModelEvaluationError",
    "eval_chi",
    "eval_chi_batch",
    "eval_indicators",
    "evaluate_batch",
    "indicators_from_responses",
    "register_model",
    "get_model",
    "available_models",
]


class ModelEvaluationError(RuntimeError):
    """A model returned a non-finite stratification value."""

    def __init__(self, message, sample_id=None):
        super().__init__(message if sample_id is None else f"{message} (sample {sample_id})")
        self.sample_id = sample_id


@dataclass(frozen=True)
class InputSplit:
    """Ordered marginals of ``sigma`` and ``tau``; blocks expand to ``size`` columns."""

    sigma_spec: tuple[DistributionSpec, ...]
    tau_spec: tuple[DistributionSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sigma_spec", tuple(self.sigma_spec))
        object.__setattr__(self, "tau_spec", tuple(self.tau_spec))
        if not self.sigma_spec:
            raise ValueError("sigma needs at least one component")

    @property
    def sigma_dim(self) -> int:
        return sum(s.size for s in self.sigma_spec)

    @property
    def tau_dim(self) -> int:
        return sum(s.size for s in self.tau_spec)

    @staticmethod
    def _blocks(specs):
        start = 0
        for s in specs:
            yield s, slice(start, start + s.size)
            start += s.size

    def _apply(self, specs, x, method):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        for s, cols in self._blocks(specs):
            out[:, cols] = getattr(s, method)(x[:, cols])
        return out

    def sigma_from_uniform(self, u):
        return self._apply(self.sigma_spec, u, "ppf")

    def tau_from_uniform(self, u):
        return self._apply(self.tau_spec, u, "ppf")

    def sigma_to_normal(self, x):
        return self._apply(self.sigma_spec, x, "to_normal")

    def sigma_from_normal(self, z):
        return self._apply(self.sigma_spec, z, "from_normal")

    def sample_sigma(self, stream: RngStream, n: int) -> np.ndarray:
        return self.sigma_from_uniform(stream.uniforms((n, self.sigma_dim)))

    def sample_tau(self, stream: RngStream, n: int) -> np.ndarray:
        if self.tau_dim == 0:
            return np.empty((n, 0))
        return self.tau_from_uniform(stream.uniforms((n, self.tau_dim)))


@dataclass(frozen=True)
class LimitStateDef:
    """Failure when ``response[response_index] > threshold``."""

    id: str
    response_index: int
    threshold: float

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise ValueError(f"limit state {self.id}: threshold must be finite")


@dataclass(frozen=True)
class ModelHandle:
    """Immutable bundle of the stratification and response maps.

    ``chi_batch`` and ``response_batch`` are optional vectorised versions used
    for throughput; when absent the scalar maps are looped over.
    """

    name: str
    inputs: InputSplit
    chi_fn: Callable[[np.ndarray], float]
    response_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    limit_states: tuple[LimitStateDef, ...]
    chi_batch: Callable[[np.ndarray], np.ndarray] | None = None
    response_batch: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    chi_lower: float = -math.inf
    cost_chi: float | None = None  # seconds per call, when known
    cost_response: float | None = None
    event_rate: float | None = None  # events per year, for rate conversions
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "limit_states", tuple(self.limit_states))
        ids = [ls.id for ls in self.limit_states]
        if len(set(ids)) != len(ids):
            raise ValueError("limit state ids must be unique")

    @property
    def limit_state_ids(self) -> list[str]:
        return [ls.id for ls in self.limit_states]


def _check_sigma(model, sigma):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape[-1] != model.inputs.sigma_dim:
        raise ValueError(f"sigma has {sigma.shape[-1]} components, model expects {model.inputs.sigma_dim}")
    return sigma


def eval_chi(model: ModelHandle, sigma, sample_id=None) -> float:
    sigma = _check_sigma(model, sigma)
    chi = float(model.chi_fn(sigma))
    if not math.isfinite(chi):
        raise ModelEvaluationError(f"{model.name}: non-finite stratification value", sample_id)
    return chi


def eval_chi_batch(model: ModelHandle, sigma, ids=None) -> np.ndarray:
    sigma = np.atleast_2d(_check_sigma(model, sigma))
    if model.chi_batch is not None:
        chi = np.asarray(model.chi_batch(sigma), dtype=float)
    else:
        chi = np.array([float(model.chi_fn(s)) for s in sigma])
    bad = ~np.isfinite(chi)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise ModelEvaluationError(f"{model.name}: non-finite stratification value",
                                   k if ids is None else ids[k])
    return chi


def indicators_from_responses(responses, limit_states: Sequence[LimitStateDef]) -> np.ndarray:
    """Failure indicators; a row with any non-finite response violates every limit state."""
    responses = np.atleast_2d(np.asarray(responses, dtype=float))
    ind = np.empty((responses.shape[0], len(limit_states)), dtype=np.int8)
    for h, ls in enumerate(limit_states):
        with np.errstate(invalid="ignore"):
            ind[:, h] = responses[:, ls.response_index] > ls.threshold
    collapsed = ~np.all(np.isfinite(responses), axis=1)
    ind[collapsed, :] = 1
    return ind


def eval_indicators(model: ModelHandle, sigma, tau):
    """Response vector and indicator vector for one input ``theta = (sigma, tau)``."""
    if not model.limit_states:
        raise ValueError("model has no limit states")
    sigma = _check_sigma(model, sigma)
    tau = np.asarray(tau, dtype=float)
    if tau.shape[-1] != model.inputs.tau_dim:
        raise ValueError(f"tau has {tau.shape[-1]} components, model expects {model.inputs.tau_dim}")
    response = np.asarray(model.response_fn(sigma, tau), dtype=float)
    return response, indicators_from_responses(response[None, :], model.limit_states)[0]


def _responses_serial(model, sigma, tau):
    if model.response_batch is not None:
        return np.atleast_2d(np.asarray(model.response_batch(sigma, tau), dtype=float))
    return np.array([np.asarray(model.response_fn(s, t), dtype=float) for s, t in zip(sigma, tau)])


def _worker_responses(name, params, sigma, tau):
    return _responses_serial(get_model(name, **params), sigma, tau)


def evaluate_batch(model: ModelHandle, sigma, tau, workers: int = 1):
    """Evaluate many samples; returns ``(responses, indicators)``.

    With ``workers > 1`` chunks go to worker processes that rebuild the model
    from the registry; results are reassembled in input order, so the output
    does not depend on the worker count.
    """
    sigma = np.atleast_2d(_check_sigma(model, sigma))
    tau = np.asarray(tau, dtype=float).reshape(sigma.shape[0], model.inputs.tau_dim)
    n = sigma.shape[0]
    if n == 0:
        return np.empty((0, 0)), np.empty((0, len(model.limit_states)), dtype=np.int8)
    if workers <= 1 or n < 2 * workers or model.name not in _REGISTRY:
        responses = _responses_serial(model, sigma, tau)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_worker_responses, model.name, dict(model.params),
                                   sigma[a:b], tau[a:b]) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            responses = np.concatenate([f.result() for f in futures], axis=0)
    return responses, indicators_from_responses(responses, model.limit_states)


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., ModelHandle]] = {}


def register_model(name: str, factory: Callable[..., ModelHandle]) -> None:
    _REGISTRY[name] = factory


def _load_builtins():
    from . import benchmarks  # noqa: F401  (registers toy2d and gm-sdof)


def get_model(name: str, **params) -> ModelHandle:
    if name not in _REGISTRY:
        _load_builtins()
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; available: {sorted(_REGISTRY)}") from None
    return factory(**params)


def available_models() -> list[str]:
    _load_builtins()
    return sorted(_REGISTRY)
