"""Ground-motion / SDOF benchmark: chi = Sa(T1, 5%), responses = drift ratios.

``sigma = [M, r, Z(6001)]`` and ``tau = [F_y, zeta]``.
"""
from __future__ import annotations

import math

import numpy as np

from ..model import InputSplit, LimitStateDef, ModelHandle, register_model
from ..prob import DistributionSpec
from .groundmotion import DT, NT, synthesize_batch
from .oscillators import SdofParams, sdof_nonlinear_response, spectral_acceleration

T1 = 1.43
SA_DAMPING = 0.05
FY_NOMINAL = 417.0  # MPa
GR_BETA = 0.9 * math.log(10.0)
M_MIN, M_MAX = 6.0, 8.0
LAMBDA_M6 = 0.6  # events / year with M >= 6

# (id, response index, threshold)
GM_LIMIT_STATES = (
    ("collapse", 0, 0.15),
    ("peak>3%", 0, 0.03),
    ("residual>1.41%", 1, 0.0141),
    ("residual>0.91%", 1, 0.0091),
)


def gm_inputs() -> InputSplit:
    return InputSplit(
        sigma_spec=(
            DistributionSpec.truncated_exponential(GR_BETA, M_MIN, M_MAX, name="M"),
            DistributionSpec.lognormal(median=15.0, cov=0.4, name="r"),
            DistributionSpec.normal(0.0, 1.0, size=NT, name="Z"),
        ),
        tau_spec=(
            DistributionSpec.lognormal(mean=FY_NOMINAL, cov=0.06, name="F_y"),
            DistributionSpec.lognormal(mean=0.015, cov=0.4, name="zeta"),
        ),
    )


def make_gm_model(yield_drift=0.015, drift_factor=6.5, hardening=0.03, height=16.5,
                  batch_size=256) -> ModelHandle:
    base = SdofParams(period=T1, yield_drift=yield_drift, drift_factor=drift_factor,
                      hardening=hardening, height=height)

    def records(sigma):
        sigma = np.atleast_2d(sigma)
        return synthesize_batch(sigma[:, 0], sigma[:, 1], sigma[:, 2:], DT)

    def chi_batch(sigma):
        sigma = np.atleast_2d(sigma)
        out = np.empty(sigma.shape[0])
        for a in range(0, sigma.shape[0], batch_size):
            out[a:a + batch_size] = spectral_acceleration(records(sigma[a:a + batch_size]), T1, SA_DAMPING)
        return out

    def response_batch(sigma, tau):
        sigma = np.atleast_2d(sigma)
        tau = np.atleast_2d(tau)
        out = np.empty((sigma.shape[0], 2))
        for a in range(0, sigma.shape[0], batch_size):
            acc = records(sigma[a:a + batch_size])
            for k, rec in enumerate(acc):
                fy, zeta = tau[a + k]
                p = SdofParams(period=base.period, zeta=min(zeta, 0.99), strength_factor=fy / FY_NOMINAL,
                               yield_drift=base.yield_drift, hardening=base.hardening,
                               height=base.height, drift_factor=base.drift_factor)
                out[a + k] = sdof_nonlinear_response(rec, p, DT)
        return out

    return ModelHandle(
        name="gm-sdof",
        inputs=gm_inputs(),
        chi_fn=lambda s: float(chi_batch(np.asarray(s)[None, :])[0]),
        response_fn=lambda s, t: response_batch(np.asarray(s)[None, :], np.asarray(t)[None, :])[0],
        limit_states=tuple(LimitStateDef(i, k, v) for i, k, v in GM_LIMIT_STATES),
        chi_batch=chi_batch,
        response_batch=response_batch,
        chi_lower=0.0,
        event_rate=LAMBDA_M6,
        params={"yield_drift": yield_drift, "drift_factor": drift_factor, "hardening": hardening,
                "height": height, "batch_size": batch_size},
    )


register_model("gm-sdof", make_gm_model)
