"""Single-degree-of-freedom oscillators driven by ground acceleration."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
from scipy import signal

from .groundmotion import DT, G_ACCEL


@lru_cache(maxsize=64)
def _linear_filters(T: float, zeta: float, dt: float):
    """Displacement and velocity filters, exact for ground motion varying
    linearly between samples (first-order hold)."""
    w = 2.0 * math.pi / T
    A = np.array([[0.0, 1.0], [-w * w, -2.0 * zeta * w]])
    B = np.array([[0.0], [-1.0]])
    Ad, Bd, Cd, Dd, _ = signal.cont2discrete((A, B, np.eye(2), np.zeros((2, 1))), dt, method="foh")
    num, den = signal.ss2tf(Ad, Bd, Cd, Dd)
    return num[0], num[1], den


def _state_history(accel, T, zeta, dt):
    bu, bv, a = _linear_filters(float(T), float(zeta), float(dt))
    accel = np.asarray(accel, dtype=float)
    return signal.lfilter(bu, a, accel, axis=-1), signal.lfilter(bv, a, accel, axis=-1)


def relative_displacement(accel, T: float, zeta: float, dt: float = DT) -> np.ndarray:
    """Relative displacement history of a linear oscillator.

    Oscillator and ground are at rest one step before the first sample, and
    the ground acceleration is taken as linear between samples.
    """
    return _state_history(accel, T, zeta, dt)[0]


def _peak_abs(u, v, dt):
    """max |u(t)| including extrema between samples (cubic Hermite in each step)."""
    peak = np.max(np.abs(u), axis=-1)
    u0, u1, v0, v1 = u[..., :-1], u[..., 1:], v[..., :-1] * dt, v[..., 1:] * dt
    turn = v0 * v1 < 0
    if not turn.any():
        return peak
    u0, u1, v0, v1 = u0[turn], u1[turn], v0[turn], v1[turn]
    # derivative of the Hermite cubic: qa s^2 + qb s + qc
    qa = 6 * u0 + 3 * v0 - 6 * u1 + 3 * v1
    qb = -6 * u0 - 4 * v0 + 6 * u1 - 2 * v1
    qc = v0
    disc = np.sqrt(np.maximum(qb * qb - 4 * qa * qc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        lin = -qc / qb
        r1 = np.where(np.abs(qa) > 1e-14 * (np.abs(qb) + np.abs(qc)), (-qb + disc) / (2 * qa), lin)
        r2 = np.where(np.abs(qa) > 1e-14 * (np.abs(qb) + np.abs(qc)), (-qb - disc) / (2 * qa), lin)
    best = np.zeros_like(u0)
    for r in (r1, r2):
        ok = np.isfinite(r) & (r > 0) & (r < 1)
        s = np.where(ok, r, 0.0)
        h = ((2 * s**3 - 3 * s**2 + 1) * u0 + (s**3 - 2 * s**2 + s) * v0
             + (-2 * s**3 + 3 * s**2) * u1 + (s**3 - s**2) * v1)
        best = np.maximum(best, np.where(ok, np.abs(h), 0.0))
    inner = np.zeros(turn.shape)
    inner[turn] = best
    return np.maximum(peak, np.max(inner, axis=-1))


def spectral_acceleration(accel, T: float, zeta: float = 0.05, dt: float = DT):
    """Pseudo-spectral acceleration ``w^2 max|u|`` in g.

    ``accel`` is in m/s^2; rows of a 2-D array are separate records.
    """
    if not T > 0 or not 0 < zeta < 1:
        raise ValueError("need T > 0 and 0 < zeta < 1")
    u, v = _state_history(accel, T, zeta, dt)
    w = 2.0 * math.pi / T
    out = w * w * _peak_abs(u, v, dt) / G_ACCEL
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SdofParams:
    """Bilinear hysteretic surrogate of a multi-story frame.

    Drift ratios are ``drift_factor * u / height``; ``yield_drift`` is the
    drift ratio at first yield for the nominal strength.
    """

    period: float = 1.43
    zeta: float = 0.015
    strength_factor: float = 1.0   # F_y / nominal F_y
    yield_drift: float = 0.01
    hardening: float = 0.03
    height: float = 16.5
    drift_factor: float = 1.5

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("period must be positive")
        if not 0 < self.zeta < 1:
            raise ValueError("damping ratio must lie in (0, 1)")
        if not self.strength_factor > 0 or not self.yield_drift > 0:
            raise ValueError("strength and yield drift must be positive")


@numba.njit(cache=True)
def _bilinear_newmark(ag, dt, w, zeta, uy, alpha, max_iter=50, tol=1e-12):
    k = w * w
    c = 2.0 * zeta * w
    fy = k * uy
    u = 0.0
    v = 0.0
    fs = 0.0
    a = -ag[0]
    peak = 0.0
    a0 = 4.0 / (dt * dt)
    a1 = 2.0 / dt
    for n in range(1, ag.shape[0]):
        un = u
        vn = v
        an = a
        fsn = fs
        x = un + dt * vn  # predictor
        fs_new = fsn
        kt = k
        for _ in range(max_iter):
            trial = fsn + k * (x - un)
            upper = alpha * k * x + (1.0 - alpha) * fy
            lower = alpha * k * x - (1.0 - alpha) * fy
            if trial > upper:
                fs_new = upper
                kt = alpha * k
            elif trial < lower:
                fs_new = lower
                kt = alpha * k
            else:
                fs_new = trial
                kt = k
            acc = a0 * (x - un) - 4.0 / dt * vn - an
            vel = a1 * (x - un) - vn
            res = acc + c * vel + fs_new + ag[n]
            dx = -res / (a0 + c * a1 + kt)
            x += dx
            if abs(dx) <= tol * (abs(x) + uy):
                break
        # recompute state at converged x
        trial = fsn + k * (x - un)
        upper = alpha * k * x + (1.0 - alpha) * fy
        lower = alpha * k * x - (1.0 - alpha) * fy
        fs = min(max(trial, lower), upper)
        u = x
        v = a1 * (u - un) - vn
        a = a0 * (u - un) - 4.0 / dt * vn - an
        if not np.isfinite(u):
            return np.nan, np.nan
        if abs(u) > peak:
            peak = abs(u)
    residual = u - fs / k
    return peak, residual


def sdof_nonlinear_response(accel, params: SdofParams, dt: float = DT):
    """(peak drift ratio, residual drift ratio); NaNs flag a diverged run."""
    w = 2.0 * math.pi / params.period
    uy = params.yield_drift * params.strength_factor * params.height / params.drift_factor
    peak, residual = _bilinear_newmark(np.ascontiguousarray(accel, dtype=np.float64), dt, w,
                                       params.zeta, uy, params.hardening)
    scale = params.drift_factor / params.height
    return peak * scale, abs(residual) * scale
