"""Independent reference computations shared by several test modules."""
import itertools
import math

import numpy as np


def binary_ar_chains(n_chains, L, P, rho, g):
    """Stationary 0/1 chains with lag-l correlation rho**l.

    Each state copies its predecessor with probability rho, otherwise it is a
    fresh Bernoulli(P) draw.
    """
    out = np.empty((n_chains, L))
    out[:, 0] = g.random(n_chains) < P
    for k in range(1, L):
        keep = g.random(n_chains) < rho
        fresh = g.random(n_chains) < P
        out[:, k] = np.where(keep, out[:, k - 1], fresh)
    return out


def ar_lag_sum(L, rho):
    """2 sum_{l=1}^{L-1} (1 - l/L) rho^l."""
    return 2.0 * sum((1.0 - l / L) * rho**l for l in range(1, L))


def exact_min_allocation(const, coef, pf, targets, n_p, caps):
    """Smallest total sum(n) meeting every target, by exhaustive enumeration.

    ``const`` (H,), ``coef`` (m, H). Returns (total, n) or (None, None).
    """
    m = coef.shape[0]
    limit = (np.asarray(targets) * pf) ** 2 - const
    best = (None, None)
    ranges = [np.arange(n_p, c + 1) for c in caps[:-1]]
    last = np.arange(n_p, caps[-1] + 1)
    for head in itertools.product(*ranges) if m > 1 else [()]:
        head = np.array(head, dtype=float)
        used = (coef[:-1] / head[:, None]).sum(axis=0) if m > 1 else np.zeros(coef.shape[1])
        ok = (used[None, :] + coef[-1][None, :] / last[:, None]) <= limit[None, :] * (1 + 1e-12)
        good = np.flatnonzero(ok.all(axis=1))
        if good.size:
            total = int(head.sum()) + int(last[good[0]])
            if best[0] is None or total < best[0]:
                best = (total, np.append(head, last[good[0]]).astype(int))
    return best


def toy_joint_prob(chi_lo, chi_hi, threshold):
    """P(g > threshold and chi_lo < chi <= chi_hi) on the toy problem, by quadrature over tau."""
    from scipy import integrate, special

    s_lo = np.cbrt(chi_lo) if np.isfinite(chi_lo) else -np.inf
    s_hi = np.cbrt(chi_hi) if np.isfinite(chi_hi) else np.inf

    def conditional(t):
        s_crit = np.cbrt((threshold - 200.0 * math.sin(t)) / 3.0)
        lo = max(s_lo, s_crit)
        return max(0.0, special.ndtr(s_hi - 5.0) - special.ndtr(lo - 5.0))

    breaks = [0.0] + [k * math.pi / 2 for k in range(1, 7)] + [10.0]
    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        total += integrate.quad(conditional, a, b, epsabs=1e-16, epsrel=1e-12, limit=400)[0]
    return total / 10.0
