"""Random streams, univariate marginals and normal kernels.

Every random draw in the package goes through an :class:`RngStream`, a
(global seed, hierarchical path) pair mapped onto a counter-based Philox
generator. Two streams with the same pair always produce the same values, and
streams with different paths are independent, so the order in which stages,
strata or chains are processed never changes the numbers.

All marginals are sampled by inversion (one uniform per value), which keeps
consumption of the underlying stream deterministic and makes the standard
normal transform used by the MCMC kernel exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "DistributionSpec",
    "ParameterError",
    "RngStream",
    "normal_cdf",
    "normal_quantile",
    "normal_sf",
    "normal_isf",
    "sample",
    "quantile",
]

# offset that maps numpy's k / 2**53 grid onto the open interval (0, 1)
_HALF_ULP = 2.0**-54


class ParameterError(ValueError):
    """Invalid distribution parameters."""


# --------------------------------------------------------------------------
# normal kernels
# --------------------------------------------------------------------------

def normal_cdf(x):
    """Standard normal CDF."""
    out = special.ndtr(x)
    return float(out) if np.ndim(out) == 0 else out


def normal_sf(x):
    """Standard normal survival function, accurate in the upper tail."""
    out = special.ndtr(-np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def normal_quantile(p):
    """Inverse of :func:`normal_cdf` on the open interval (0, 1)."""
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr <= 0.0) | (p_arr >= 1.0)) or np.any(np.isnan(p_arr)):
        raise ValueError("normal_quantile is defined for 0 < p < 1 only")
    out = special.ndtri(p_arr)
    return float(out) if out.ndim == 0 else out


def normal_isf(q):
    """Inverse survival function: x such that P(Z > x) = q."""
    q_arr = np.asarray(q, dtype=float)
    if np.any((q_arr <= 0.0) | (q_arr >= 1.0)) or np.any(np.isnan(q_arr)):
        raise ValueError("normal_isf is defined for 0 < q < 1 only")
    out = -special.ndtri(q_arr)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# streams
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(global_seed, path)``.

    ``path`` is a tuple of non-negative integers, e.g. ``(phase, level, step)``.
    """

    global_seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.global_seed) < 2**64:
            raise ParameterError("global_seed must be an unsigned 64-bit integer")
        if any(int(k) < 0 for k in self.path):
            raise ParameterError("stream path entries must be non-negative")

    def child(self, *index: int) -> "RngStream":
        return RngStream(self.global_seed, self.path + tuple(int(i) for i in index))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.global_seed), spawn_key=tuple(int(i) for i in self.path))
        return np.random.Generator(np.random.Philox(seq))

    def uniforms(self, shape) -> np.ndarray:
        """Uniform draws on the open interval (0, 1)."""
        return self.generator().random(shape) + _HALF_ULP


# --------------------------------------------------------------------------
# marginals
# --------------------------------------------------------------------------

_KINDS = ("uniform", "normal", "lognormal", "truncated_exponential")


@dataclass(frozen=True)
class DistributionSpec:
    """A univariate marginal.

    Build instances with the classmethods rather than the raw constructor:
    ``uniform(a, b)``, ``normal(mu, sd)``, ``lognormal(median=, cov=)`` (or
    ``mean=, cov=`` / ``logmean=, logstd=``) and
    ``truncated_exponential(beta, lower, upper)``.
    """

    kind: str
    params: tuple[float, ...]
    size: int = 1  # >1 declares an i.i.d. block, e.g. a white-noise vector
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ParameterError(f"unknown distribution kind {self.kind!r}")
        if int(self.size) < 1:
            raise ParameterError("block size must be >= 1")
        p = self.params
        if not all(math.isfinite(v) for v in p):
            raise ParameterError(f"{self.kind}: parameters must be finite, got {p}")
        if self.kind == "uniform" and not p[0] < p[1]:
            raise ParameterError("uniform requires a < b")
        if self.kind == "normal" and not p[1] > 0:
            raise ParameterError("normal requires sd > 0")
        if self.kind == "lognormal" and not p[1] > 0:
            raise ParameterError("lognormal requires a positive log-standard deviation")
        if self.kind == "truncated_exponential" and not (p[0] > 0 and p[1] < p[2]):
            raise ParameterError("truncated exponential requires beta > 0 and lower < upper")

    # constructors ---------------------------------------------------------

    @classmethod
    def uniform(cls, a, b, name=""):
        return cls("uniform", (float(a), float(b)), name=name)

    @classmethod
    def normal(cls, mu=0.0, sd=1.0, size=1, name=""):
        return cls("normal", (float(mu), float(sd)), size=size, name=name)

    @classmethod
    def lognormal(cls, median=None, cov=None, *, mean=None, logmean=None, logstd=None, name=""):
        """Lognormal from ``(median, cov)``, ``(mean, cov)`` or ``(logmean, logstd)``."""
        if logmean is not None or logstd is not None:
            if logmean is None or logstd is None or median is not None or mean is not None:
                raise ParameterError("give logmean and logstd together, and nothing else")
            return cls("lognormal", (float(logmean), float(logstd)), name=name)
        if cov is None or not cov > 0:
            raise ParameterError("lognormal requires cov > 0")
        logstd = math.sqrt(math.log1p(cov * cov))
        if median is not None and mean is None:
            if not median > 0:
                raise ParameterError("lognormal requires median > 0")
            return cls("lognormal", (math.log(median), logstd), name=name)
        if mean is not None and median is None:
            if not mean > 0:
                raise ParameterError("lognormal requires mean > 0")
            return cls("lognormal", (math.log(mean) - 0.5 * logstd * logstd, logstd), name=name)
        raise ParameterError("give exactly one of median or mean with cov")

    @classmethod
    def truncated_exponential(cls, beta, lower, upper, name=""):
        return cls("truncated_exponential", (float(beta), float(lower), float(upper)), name=name)

    # distribution functions ----------------------------------------------

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "uniform":
            out = np.clip((x - p[0]) / (p[1] - p[0]), 0.0, 1.0)
        elif self.kind == "normal":
            out = special.ndtr((x - p[0]) / p[1])
        elif self.kind == "lognormal":
            with np.errstate(divide="ignore", invalid="ignore"):
                z = (np.log(np.where(x > 0, x, 1.0)) - p[0]) / p[1]
            out = np.where(x > 0, special.ndtr(z), 0.0)
        else:
            beta, lo, hi = p
            xc = np.clip(x, lo, hi)
            out = -np.expm1(-beta * (xc - lo)) / -math.expm1(-beta * (hi - lo))
        return float(out) if out.ndim == 0 else out

    def ppf(self, u):
        """Quantile function; ``u`` may include the endpoints 0 and 1."""
        u = np.asarray(u, dtype=float)
        p = self.params
        if self.kind == "uniform":
            out = p[0] + (p[1] - p[0]) * u
        elif self.kind == "normal":
            out = p[0] + p[1] * special.ndtri(u)
        elif self.kind == "lognormal":
            out = np.exp(p[0] + p[1] * special.ndtri(u))
        else:
            beta, lo, hi = p
            out = lo - np.log1p(u * math.expm1(-beta * (hi - lo))) / beta
            out = np.clip(out, lo, hi)
        return float(out) if out.ndim == 0 else out

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "uniform":
            out = np.where((x >= p[0]) & (x <= p[1]), 1.0 / (p[1] - p[0]), 0.0)
        elif self.kind == "normal":
            z = (x - p[0]) / p[1]
            out = np.exp(-0.5 * z * z) / (p[1] * math.sqrt(2 * math.pi))
        elif self.kind == "lognormal":
            xs = np.where(x > 0, x, 1.0)
            z = (np.log(xs) - p[0]) / p[1]
            out = np.where(x > 0, np.exp(-0.5 * z * z) / (xs * p[1] * math.sqrt(2 * math.pi)), 0.0)
        else:
            beta, lo, hi = p
            dens = beta * np.exp(-beta * (x - lo)) / -math.expm1(-beta * (hi - lo))
            out = np.where((x >= lo) & (x <= hi), dens, 0.0)
        return float(out) if out.ndim == 0 else out

    @property
    def mean(self) -> float:
        p = self.params
        if self.kind == "uniform":
            return 0.5 * (p[0] + p[1])
        if self.kind == "normal":
            return p[0]
        if self.kind == "lognormal":
            return math.exp(p[0] + 0.5 * p[1] ** 2)
        beta, lo, hi = p
        w = hi - lo
        return lo + 1.0 / beta - w * math.exp(-beta * w) / -math.expm1(-beta * w)

    @property
    def std(self) -> float:
        p = self.params
        if self.kind == "uniform":
            return (p[1] - p[0]) / math.sqrt(12.0)
        if self.kind == "normal":
            return p[1]
        if self.kind == "lognormal":
            s2 = p[1] ** 2
            return math.sqrt(math.expm1(s2)) * math.exp(p[0] + 0.5 * s2)
        beta, lo, hi = p
        w = hi - lo
        e = math.exp(-beta * w)
        var = 1.0 / beta**2 - w * w * e / (1.0 - e) ** 2
        return math.sqrt(var)

    @property
    def support(self) -> tuple[float, float]:
        p = self.params
        if self.kind == "uniform":
            return p[0], p[1]
        if self.kind == "normal":
            return -math.inf, math.inf
        if self.kind == "lognormal":
            return 0.0, math.inf
        return p[1], p[2]

    # standard-normal transform used by the MCMC kernel -------------------

    def to_normal(self, x):
        if self.kind == "normal":
            return (np.asarray(x, dtype=float) - self.params[0]) / self.params[1]
        if self.kind == "lognormal":
            return (np.log(x) - self.params[0]) / self.params[1]
        return special.ndtri(np.clip(self.cdf(x), 1e-300, 1.0 - 2.0**-53))

    def from_normal(self, z):
        if self.kind == "normal":
            return self.params[0] + self.params[1] * np.asarray(z, dtype=float)
        if self.kind == "lognormal":
            return np.exp(self.params[0] + self.params[1] * np.asarray(z, dtype=float))
        return self.ppf(special.ndtr(z))


def quantile(spec: DistributionSpec, u):
    """Value of ``spec`` at quantile level ``u``."""
    return spec.ppf(u)


def sample(spec: DistributionSpec, stream: RngStream, size=None):
    """Draw from ``spec`` by inversion using ``stream``.

    With ``size=None`` a single float is returned.
    """
    u = stream.uniforms(1 if size is None else size)
    out = spec.ppf(u)
    return float(out[0]) if size is None else out
