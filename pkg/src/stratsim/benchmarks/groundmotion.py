"""Point-source stochastic ground motions (two-corner source, California).

The record is generated by windowing a white-noise vector with a
Saragoni-Hart envelope, normalising its Fourier amplitude to unit mean square,
shaping it with the target amplitude spectrum

    A(f; M, r) = (2 pi f)^2 E(f; M) P(f; r) G(f)

and transforming back. Spectral shapes follow Atkinson & Silva (2000) as
tabulated by Boore (2003); site amplification is read from
``data/site_amplification_nehrp_d.csv``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

G_ACCEL = 9.80665  # m/s^2

# calibration constants
RADIATION = 0.55       # R_Phi
BETA_S = 3.5           # km/s
RHO_S = 2.8            # g/cm^3
C_Q = 3.5              # km/s
Q0, Q_EXP = 180.0, 0.45
R_CROSSOVER = 70.0     # km, geometric spreading 1/R then flat
FMAX_HZ = 15.0 / (2.0 * math.pi)  # f_max given as 15 rad/s
ENV_EPS = 0.2          # lambda_t
ENV_ETA = 0.05         # eta_t
ENV_FT = 2.0           # t_eta = ENV_FT * T_gm (Boore 2003)
PARTITION = 1.0 / math.sqrt(2.0)
FREE_SURFACE = 2.0
R_REF = 1.0            # km

DT = 0.01
DURATION = 60.0
NT = int(round(DURATION / DT)) + 1  # 6001


@dataclass(frozen=True)
class GroundMotionParams:
    M: float
    r: float
    Z: np.ndarray
    dt: float = DT

    def __post_init__(self):
        if not 6.0 <= self.M <= 8.0:
            raise ValueError("magnitude must lie in [6, 8]")
        if not self.r > 0:
            raise ValueError("distance must be positive")
        if np.asarray(self.Z).shape != (NT,):
            raise ValueError(f"white-noise vector must have length {NT}")


@lru_cache(maxsize=1)
def site_table():
    text = resources.files("stratsim.benchmarks").joinpath("data/site_amplification_nehrp_d.csv").read_text()
    rows = [r for r in csv.reader(line for line in text.splitlines() if line and not line.startswith("#"))]
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return data[:, 0], data[:, 1]


def site_amplification(f):
    freq, amp = site_table()
    f = np.asarray(f, dtype=float)
    lf = np.log(np.clip(f, freq[0], freq[-1]))
    return np.interp(lf, np.log(freq), amp)


def corner_frequencies(M):
    """Atkinson-Silva (2000) corners ``fa``, ``fb`` [Hz] and weight ``eps``."""
    M = np.asarray(M, dtype=float)
    fa = 10.0 ** (2.181 - 0.496 * M)
    fb = 10.0 ** (2.41 - 0.408 * M)
    eps = 10.0 ** (0.605 - 0.255 * M)
    return fa, fb, eps


def seismic_moment(M):
    return 10.0 ** (1.5 * np.asarray(M, dtype=float) + 16.05)  # dyne-cm


def source_spectrum(f, M):
    """Displacement source spectrum E(f; M) in cm*s."""
    fa, fb, eps = corner_frequencies(M)
    const = RADIATION * PARTITION * FREE_SURFACE / (4.0 * math.pi * RHO_S * BETA_S**3 * R_REF) * 1e-20
    shape = (1.0 - eps) / (1.0 + (f / fa) ** 2) + eps / (1.0 + (f / fb) ** 2)
    return const * seismic_moment(M) * shape


def geometric_spreading(R):
    R = np.asarray(R, dtype=float)
    return np.where(R < R_CROSSOVER, 1.0 / R, 1.0 / R_CROSSOVER)


def path_filter(f, R):
    """Spreading times anelastic attenuation with Q(f) = 180 f^0.45."""
    f = np.asarray(f, dtype=float)
    # pi f R / (Q0 f^0.45 c_Q) written as f^0.55 so f = 0 is regular
    return geometric_spreading(R) * np.exp(-math.pi * R * f ** (1.0 - Q_EXP) / (Q0 * C_Q))


def diminution(f):
    return 1.0 / np.sqrt(1.0 + (np.asarray(f, dtype=float) / FMAX_HZ) ** 8)


def amplitude_spectrum(f, M, r):
    """Target acceleration Fourier amplitude A(f; M, r) in cm/s."""
    f = np.asarray(f, dtype=float)
    return ((2.0 * math.pi * f) ** 2 * source_spectrum(f, M) * path_filter(f, r)
            * site_amplification(f) * diminution(f))


def motion_duration(M, r):
    """Source duration 1/fa plus path duration 0.05 R [s]."""
    fa, _, _ = corner_frequencies(M)
    return 1.0 / fa + 0.05 * np.asarray(r, dtype=float)


def envelope(t, M, r):
    """Saragoni-Hart window with unit peak at ``t = eps * t_eta``."""
    b = -ENV_EPS * math.log(ENV_ETA) / (1.0 + ENV_EPS * (math.log(ENV_EPS) - 1.0))
    c = b / ENV_EPS
    a = (math.e / ENV_EPS) ** b
    t_eta = ENV_FT * np.asarray(motion_duration(M, r), dtype=float)
    x = np.asarray(t, dtype=float) / np.expand_dims(t_eta, -1)
    return a * x**b * np.exp(-c * x)


def nfft_for(n: int) -> int:
    """Next power of two >= 2n (zero padding against wrap-around)."""
    return 1 << int(math.ceil(math.log2(2 * n)))


def synthesize_batch(M, r, Z, dt: float = DT) -> np.ndarray:
    """Acceleration records [m/s^2] for rows of ``Z`` (shape ``(B, nt)``)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    M = np.broadcast_to(np.asarray(M, dtype=float), (Z.shape[0],))
    r = np.broadcast_to(np.asarray(r, dtype=float), (Z.shape[0],))
    nt = Z.shape[1]
    t = np.arange(nt) * dt
    windowed = envelope(t, M, r) * Z
    nfft = nfft_for(nt)
    spec = np.fft.rfft(windowed, n=nfft, axis=1)
    ms = np.mean(np.abs(spec) ** 2, axis=1, keepdims=True)
    scale = np.divide(1.0, np.sqrt(ms), out=np.zeros_like(ms), where=ms > 0)
    f = np.fft.rfftfreq(nfft, dt)
    shaped = spec * scale * amplitude_spectrum(f[None, :], M[:, None], r[:, None])
    # continuous FAS ~ dt * DFT; cm/s^2 -> m/s^2
    return np.fft.irfft(shaped / dt, n=nfft, axis=1)[:, :nt] / 100.0


def synthesize_acceleration(params: GroundMotionParams) -> np.ndarray:
    """Single record [m/s^2] of ``len(Z)`` points."""
    return synthesize_batch(params.M, params.r, params.Z[None, :], params.dt)[0]


def write_record(path, accel, dt: float = DT, delimiter=","):
    """Dump a record as ``time,acceleration`` rows for inspection."""
    t = np.arange(len(accel)) * dt
    np.savetxt(path, np.column_stack([t, accel]), delimiter=delimiter,
               header=f"time_s{delimiter}accel_m_s2", comments="")
