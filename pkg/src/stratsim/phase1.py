"""Phase-I sampling: strata construction and strata-wise sigma banks.

Two drivers are provided. :func:`run_phase1_mc` draws i.i.d. samples and
classifies them; :func:`run_phase1_sus` walks through nested levels
``F_i = {chi > chi_i}`` with modified Metropolis-Hastings chains, which is the
cheap route when the last stratum is rare.

Strata are half-open intervals ``(chi_{i-1}, chi_i]`` numbered 1..m.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .model import ModelHandle, eval_chi_batch
from .prob import RngStream

__all__ = [
    "MODE_MC",
    "MODE_SUS",
    "StratumSet",
    "ChainSample",
    "PhaseIResult",
    "UnderPopulatedStratumError",
    "LevelExtinctionError",
    "run_phase1_mc",
    "run_phase1_sus",
    "mmh_step",
    "mmh_advance",
    "estimate_level_stats",
    "strata_prob_cov",
    "multinomial_cov",
    "lag_products",
]

MODE_MC = "mc"
MODE_SUS = "sus"

# stream path roots
STREAM_PHASE1 = 1
STREAM_SELECT = 2
STREAM_TAU = 3

DEFAULT_PROPOSAL_WIDTH = 2.0  # window width in standard-normal units
_SIGMA_STORE_LIMIT = 20_000_000  # doubles kept in memory before switching to regeneration


class UnderPopulatedStratumError(RuntimeError):
    def __init__(self, stratum):
        super().__init__(f"stratum {stratum} received no Phase-I samples")
        self.stratum = stratum


class LevelExtinctionError(RuntimeError):
    def __init__(self, level):
        super().__init__(f"no samples exceed the threshold of level {level}; "
                         "the fixed thresholds are too far apart for this N")
        self.level = level


@dataclass
class StratumSet:
    """Thresholds ``chi_0 < ... < chi_m`` with estimated strata probabilities.

    ``cond_probs``, ``delta`` and ``gamma`` have ``m - 1`` entries and are only
    set for subset-simulation runs.
    """

    thresholds: np.ndarray
    probs: np.ndarray
    prob_cov: np.ndarray
    mode: str
    p: float | None = None
    N: int = 0
    cond_probs: np.ndarray | None = None
    delta: np.ndarray | None = None
    gamma: np.ndarray | None = None

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self.probs = np.asarray(self.probs, dtype=float)
        self.prob_cov = np.asarray(self.prob_cov, dtype=float)
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("strata thresholds must be strictly increasing")
        if self.thresholds.size != self.probs.size + 1:
            raise ValueError("need m + 1 thresholds for m strata")

    @property
    def m(self) -> int:
        return self.probs.size

    @property
    def prob_var(self) -> np.ndarray:
        return np.diag(self.prob_cov).copy()

    def classify(self, chi) -> np.ndarray:
        """1-based stratum index of each ``chi`` (right-closed intervals)."""
        idx = np.searchsorted(self.thresholds[1:-1], np.asarray(chi, dtype=float), side="left") + 1
        return idx

    def bounds(self, i: int) -> tuple[float, float]:
        return float(self.thresholds[i - 1]), float(self.thresholds[i])


@dataclass(frozen=True)
class ChainSample:
    """One Phase-I draw with its Markov-chain lineage."""

    sigma: np.ndarray
    chi: float
    stratum: int
    chain_id: int
    state_index: int
    level: int
    sample_id: int = -1


@dataclass
class PhaseIResult:
    """Strata plus the banked samples (struct-of-arrays, one row per sample).

    ``sigma`` may be ``None`` for large Monte Carlo runs, in which case rows are
    regenerated from their stream keys by :meth:`sigma_rows`.
    """

    strata: StratumSet
    chi: np.ndarray
    stratum: np.ndarray
    chain_id: np.ndarray
    state_index: np.ndarray
    level: np.ndarray
    sigma: np.ndarray | None
    sample_key: np.ndarray
    N: int
    seed: int
    model_name: str = ""
    block_size: int = 0
    sigma_dim: int = 0
    _banks: dict = field(default_factory=dict, repr=False)

    @property
    def n_hat(self) -> int:
        return int(self.chi.size)

    @property
    def n_hat_i(self) -> np.ndarray:
        return np.bincount(self.stratum, minlength=self.strata.m + 1)[1:]

    def bank(self, i: int) -> np.ndarray:
        """Row indices of stratum ``i`` in creation order."""
        if i not in self._banks:
            self._banks[i] = np.flatnonzero(self.stratum == i)
        return self._banks[i]

    def samples(self, i: int, model: ModelHandle | None = None) -> list[ChainSample]:
        rows = self.bank(i)
        sig = self.sigma_rows(rows, model)
        return [ChainSample(sig[k], float(self.chi[r]), i, int(self.chain_id[r]), int(self.state_index[r]),
                            int(self.level[r]), int(r)) for k, r in enumerate(rows)]

    def sigma_rows(self, rows, model: ModelHandle | None = None) -> np.ndarray:
        rows = np.asarray(rows, dtype=int)
        if self.sigma is not None:
            return self.sigma[rows]
        if model is None:
            raise ValueError("sigma was not stored; pass the model to regenerate it")
        return _regenerate_mc_sigma(model, self.seed, self.block_size, self.sample_key[rows])

    def chain_key(self, rows) -> np.ndarray:
        """Chain identity that is unique across levels."""
        rows = np.asarray(rows, dtype=int)
        return self.level[rows].astype(np.int64) * (1 << 40) + self.chain_id[rows]


# --------------------------------------------------------------------------
# covariance of the strata probabilities
# --------------------------------------------------------------------------

def multinomial_cov(probs, n) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    return (np.diag(probs) - np.outer(probs, probs)) / n


def strata_prob_cov(delta, gamma, cond_probs, N) -> np.ndarray:
    """Covariance matrix of the subset-simulation strata probabilities.

    ``delta``, ``gamma`` and ``cond_probs`` are indexed by level 1..m-1.
    ``gamma`` only enters through ``delta`` and is accepted for symmetry with
    :func:`estimate_level_stats`.
    """
    P = np.asarray(cond_probs, dtype=float)
    d2 = np.asarray(delta, dtype=float) ** 2
    m = P.size + 1
    if m == 1:
        return np.zeros((1, 1))
    # 1-based helpers; PF[i] = P(F_i), PF[0] = 1
    PF = np.concatenate([[1.0], np.cumprod(P)])
    cond = np.concatenate([[np.nan], P])        # cond[i] = P(F_i | F_{i-1})
    D = np.concatenate([[0.0], np.cumsum(d2)])  # D[i] = sum_{k<=i} delta_k^2
    dd = np.concatenate([[np.nan], d2])

    def var(i):
        if i == 1:
            return PF[1] * (1.0 - PF[1]) / N
        if i == m:
            return PF[m - 1] ** 2 * D[m - 1]
        return PF[i - 1] ** 2 * (1.0 - 2.0 * cond[i]) * D[i - 1] + PF[i] ** 2 * D[i]

    # Off-diagonals: the case table gives E[P(S_i) P(S_j)] for i < j in terms of
    # xi_ij = (c_i - c_i^2 (delta_i^2 + 1)) prod_{i<k<j} c_k. Subtracting
    # P(S_i) P(S_j) analytically leaves, for every case,
    #   PF_{i-1}^2 prod_{i<k<j} c_k [c_i (1 - c_i) D_{i-1} - c_i^2 d_i (D_{i-1} + 1)] (1 - c_j)
    # with the last factor dropped for j = m. This avoids the cancellation.
    C = np.zeros((m, m))
    for i in range(1, m + 1):
        C[i - 1, i - 1] = var(i)
        for j in range(i + 1, m + 1):
            prod = np.prod(cond[i + 1:j]) if j > i + 1 else 1.0
            ci = cond[i]
            core = ci * (1.0 - ci) * D[i - 1] - ci * ci * dd[i] * (D[i - 1] + 1.0)
            tail = 1.0 if j == m else 1.0 - cond[j]
            C[i - 1, j - 1] = C[j - 1, i - 1] = PF[i - 1] ** 2 * prod * core * tail
    return C


# --------------------------------------------------------------------------
# chain correlation statistics
# --------------------------------------------------------------------------

def _chain_matrix(values, chain_key, state_index):
    """Values laid out as chains x states, NaN where a state is absent."""
    keys, inv = np.unique(np.asarray(chain_key), return_inverse=True)
    state_index = np.asarray(state_index, dtype=int)
    mat = np.full((keys.size, int(state_index.max()) + 1 if state_index.size else 1), np.nan)
    mat[inv, state_index] = values
    return mat


def lag_products(centered, chain_key, state_index):
    """Sums and counts of within-chain lagged products, lags 1..L-1.

    Returns ``(sums, counts)`` where ``sums[l-1]`` adds ``x_k * x_{k+l}`` over
    every pair in the same chain whose state indices differ by ``l``.
    """
    mat = _chain_matrix(np.asarray(centered, dtype=float), chain_key, state_index)
    L = mat.shape[1]
    sums = np.zeros(max(L - 1, 0))
    counts = np.zeros(max(L - 1, 0))
    for lag in range(1, L):
        prod = mat[:, :-lag] * mat[:, lag:]
        ok = ~np.isnan(prod)
        sums[lag - 1] = prod[ok].sum()
        counts[lag - 1] = ok.sum()
    return sums, counts


def estimate_level_stats(indicators, chain_id, state_index, *, iid=False, cond_prob=None):
    """(delta, gamma) for one conditional level.

    ``indicators`` flag level samples that also lie in the next level.
    ``cond_prob`` overrides the empirical mean (adaptive runs fix it to ``p``).
    """
    I = np.asarray(indicators, dtype=float)
    N = I.size
    P = float(I.mean()) if cond_prob is None else float(cond_prob)
    if iid:
        gamma = 0.0
    else:
        if np.unique(chain_id).size < 2:
            raise ValueError("correlation factor is undefined for a level with a single chain")
        r0 = P * (1.0 - P)
        if r0 <= 0.0:
            gamma = 0.0
        else:
            sums, counts = lag_products(I - P, chain_id, state_index)
            ok = counts > 0
            rho = np.zeros_like(sums)
            rho[ok] = sums[ok] / counts[ok] / r0
            gamma = float(2.0 * np.sum(counts * rho) / N)
    if P <= 0.0:
        return math.inf, gamma
    delta = math.sqrt((1.0 - P) * (1.0 + gamma) / (N * P))
    return delta, gamma


# --------------------------------------------------------------------------
# modified Metropolis-Hastings
# --------------------------------------------------------------------------

def mmh_advance(model: ModelHandle, z, chi, threshold, u_prop, u_acc, width=DEFAULT_PROPOSAL_WIDTH):
    """Advance a batch of chains by one state (standard-normal space).

    Each component proposes ``z + width * (u_prop - 1/2)`` and is accepted with
    probability ``min(1, phi(candidate) / phi(z))``. The assembled candidate is
    kept only if its ``chi`` exceeds ``threshold``; otherwise the chain repeats
    its current state. Returns ``(z_next, chi_next, moved)``.
    """
    z = np.atleast_2d(z)
    cand = z + np.asarray(width) * (u_prop - 0.5)
    log_ratio = -0.5 * (cand * cand - z * z)
    accept = np.log(u_acc) < log_ratio
    new = np.where(accept, cand, z)
    touched = accept.any(axis=1)
    moved = np.zeros(z.shape[0], dtype=bool)
    z_next = z.copy()
    chi_next = np.array(chi, dtype=float, copy=True)
    if touched.any():
        rows = np.flatnonzero(touched)
        sig = model.inputs.sigma_from_normal(new[rows])
        chi_c = eval_chi_batch(model, sig)
        keep = chi_c > threshold
        moved[rows[keep]] = True
        z_next[rows[keep]] = new[rows[keep]]
        chi_next[rows[keep]] = chi_c[keep]
    return z_next, chi_next, moved


def mmh_step(current: ChainSample, model: ModelHandle, level_threshold: float, stream: RngStream,
             proposal_spread=DEFAULT_PROPOSAL_WIDTH) -> ChainSample:
    """One modified Metropolis-Hastings transition of a single chain."""
    if not current.chi > level_threshold:
        raise ValueError("current state must lie above the level threshold")
    d = model.inputs.sigma_dim
    u = stream.uniforms((2, d))
    z = model.inputs.sigma_to_normal(np.asarray(current.sigma, dtype=float)[None, :])
    z_next, chi_next, moved = mmh_advance(model, z, [current.chi], level_threshold,
                                          u[0][None, :], u[1][None, :], proposal_spread)
    sigma = model.inputs.sigma_from_normal(z_next)[0] if moved[0] else np.asarray(current.sigma)
    return ChainSample(sigma, float(chi_next[0]), current.stratum, current.chain_id,
                       current.state_index + 1, current.level, current.sample_id)


# --------------------------------------------------------------------------
# Monte Carlo driver
# --------------------------------------------------------------------------

def _mc_block_size(dim: int) -> int:
    return max(1, (1 << 20) // max(dim, 1))


def _regenerate_mc_sigma(model, seed, block_size, keys):
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.size, model.inputs.sigma_dim))
    blocks = keys // block_size
    for b in np.unique(blocks):
        sel = np.flatnonzero(blocks == b)
        u = RngStream(seed, (STREAM_PHASE1, 0, int(b))).uniforms((block_size, model.inputs.sigma_dim))
        out[sel] = model.inputs.sigma_from_uniform(u[keys[sel] - b * block_size])
    return out


def _exact_fraction(x) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def run_phase1_mc(model: ModelHandle, n_hat: int, *, m: int | None = None, p: float | None = None,
                  thresholds: Sequence[float] | None = None, seed: int = 0,
                  store_sigma: bool | None = None) -> PhaseIResult:
    """Monte Carlo Phase-I.

    Give either ``(m, p)`` for adaptive thresholds at the empirical
    ``1 - p**i`` quantiles, or the interior ``thresholds`` ``chi_1..chi_{m-1}``.
    """
    n_hat = int(n_hat)
    d = model.inputs.sigma_dim
    B = _mc_block_size(d)
    keep = (n_hat * d <= _SIGMA_STORE_LIMIT) if store_sigma is None else store_sigma
    chi = np.empty(n_hat)
    sigma = np.empty((n_hat, d)) if keep else None
    for b in range(0, -(-n_hat // B)):
        a, e = b * B, min(n_hat, (b + 1) * B)
        u = RngStream(seed, (STREAM_PHASE1, 0, b)).uniforms((B, d))[: e - a]
        s = model.inputs.sigma_from_uniform(u)
        chi[a:e] = eval_chi_batch(model, s, ids=np.arange(a, e))
        if keep:
            sigma[a:e] = s

    lower = model.chi_lower
    if thresholds is not None:
        inner = np.asarray(thresholds, dtype=float)
        m = inner.size + 1
    else:
        if m is None or p is None:
            raise ValueError("give (m, p) or explicit thresholds")
        order = np.lexsort((np.arange(n_hat), chi))
        inner = []
        for i in range(1, m):
            n_above = int(round(float(_exact_fraction(p) ** i * n_hat)))
            if n_above < 1:
                raise ValueError(f"n_hat={n_hat} is too small to populate stratum {i + 1}")
            inner.append(chi[order[n_hat - n_above - 1]])
        inner = np.asarray(inner)
    thr = np.concatenate([[lower], inner, [math.inf]])
    strata = StratumSet(thr, np.zeros(m), np.zeros((m, m)), MODE_MC, p=p, N=n_hat)
    stratum = strata.classify(chi)
    counts = np.bincount(stratum, minlength=m + 1)[1:]
    for i, c in enumerate(counts, start=1):
        if c == 0:
            raise UnderPopulatedStratumError(i)
    strata.probs = np.array([float(Fraction(int(c), n_hat)) for c in counts])
    strata.prob_cov = multinomial_cov(strata.probs, n_hat)
    ids = np.arange(n_hat)
    return PhaseIResult(strata, chi, stratum, chain_id=ids, state_index=np.zeros(n_hat, dtype=int),
                        level=np.zeros(n_hat, dtype=int), sigma=sigma, sample_key=ids, N=n_hat,
                        seed=seed, model_name=model.name, block_size=B, sigma_dim=d)


# --------------------------------------------------------------------------
# subset simulation driver
# --------------------------------------------------------------------------

def _run_chains(model, seeds_z, seeds_chi, threshold, lengths, seed, level, width):
    """Grow one chain per seed; the seed is state 0. Returns flat arrays."""
    n_chain = seeds_z.shape[0]
    d = seeds_z.shape[1]
    Lmax = int(lengths.max())
    z = seeds_z.copy()
    chi = seeds_chi.copy()
    out_z = [z.copy()]
    out_chi = [chi.copy()]
    for step in range(1, Lmax):
        u = RngStream(seed, (STREAM_PHASE1, level, step)).uniforms((2, n_chain, d))
        active = lengths > step
        rows = np.flatnonzero(active)
        z_a, chi_a, _ = mmh_advance(model, z[rows], chi[rows], threshold, u[0][rows], u[1][rows], width)
        z[rows] = z_a
        chi[rows] = chi_a
        out_z.append(z.copy())
        out_chi.append(chi.copy())
    Z = np.stack(out_z, axis=1)      # chains x states x d
    C = np.stack(out_chi, axis=1)
    chain_id, state = np.nonzero(np.arange(Lmax)[None, :] < lengths[:, None])
    return Z[chain_id, state], C[chain_id, state], chain_id, state


def _chain_lengths(N, n_chains):
    lengths = np.full(n_chains, N // n_chains, dtype=int)
    lengths[: N % n_chains] += 1
    return lengths


def run_phase1_sus(model: ModelHandle, N: int, m: int, p: float = 0.1, *, seed: int = 0,
                   thresholds: Sequence[float] | None = None,
                   proposal_width=DEFAULT_PROPOSAL_WIDTH) -> PhaseIResult:
    """Subset-simulation Phase-I with ``N`` samples per conditional level.

    Adaptive mode places ``chi_i`` at the ``(1 - p)`` sample quantile of level
    ``i - 1`` so each level has ``p N`` seeds running chains of ``1/p``
    states. With fixed interior ``thresholds`` the conditional probabilities
    are estimated instead.
    """
    N = int(N)
    fixed = thresholds is not None
    if fixed:
        inner = np.asarray(thresholds, dtype=float)
        m = inner.size + 1
        if np.any(np.diff(inner) <= 0):
            raise ValueError("thresholds must be strictly increasing")
    if m < 2:
        raise ValueError("subset simulation needs m >= 2")
    n_seed = None
    if not fixed:
        n_seed_exact = _exact_fraction(p) * N
        if n_seed_exact.denominator != 1 or n_seed_exact < 2:
            raise ValueError("p * N must be an integer >= 2")
        n_seed = int(n_seed_exact)

    d = model.inputs.sigma_dim
    u0 = RngStream(seed, (STREAM_PHASE1, 0, 0)).uniforms((N, d))
    z = np.clip(_ndtri(u0), -40, 40)
    sig0 = model.inputs.sigma_from_normal(z)
    chi = eval_chi_batch(model, sig0)
    chain_id = np.arange(N)
    state = np.zeros(N, dtype=int)

    rec_sigma, rec_chi, rec_stratum, rec_chain, rec_state, rec_level = [], [], [], [], [], []
    cond, deltas, gammas, thr = [], [], [], [model.chi_lower]

    for level in range(m):
        if level == m - 1:
            above = np.zeros(N, dtype=bool)
        elif fixed:
            chi_next = inner[level]
            above = chi > chi_next
        else:
            order = np.lexsort((np.arange(N), chi))
            k = N - n_seed
            chi_next = chi[order[k - 1]]
            above = np.zeros(N, dtype=bool)
            above[order[k:]] = True

        below = ~above
        rec_sigma.append(model.inputs.sigma_from_normal(z[below]))
        rec_chi.append(chi[below])
        rec_stratum.append(np.full(below.sum(), level + 1))
        rec_chain.append(chain_id[below])
        rec_state.append(state[below])
        rec_level.append(np.full(below.sum(), level))
        if level == m - 1:
            break

        thr.append(chi_next)
        P_level = None if fixed else float(_exact_fraction(p))
        delta, gamma = estimate_level_stats(above, chain_id, state, iid=(level == 0), cond_prob=P_level)
        n_above = int(above.sum())
        if n_above == 0:
            raise LevelExtinctionError(level + 1)
        cond.append(n_above / N if fixed else P_level)
        deltas.append(delta)
        gammas.append(gamma)

        seeds = np.flatnonzero(above)
        perm = RngStream(seed, (STREAM_PHASE1, level + 1, 0)).generator().permutation(seeds.size)
        seeds = seeds[perm]
        lengths = _chain_lengths(N, seeds.size)
        z, chi, chain_id, state = _run_chains(model, z[seeds], chi[seeds], chi_next, lengths,
                                              seed, level + 1, proposal_width)

    thr.append(math.inf)
    cond_arr = np.asarray(cond)
    if fixed:
        PF = np.concatenate([[1.0], np.cumprod(cond_arr)])
        probs = np.array([PF[i - 1] - PF[i] for i in range(1, m)] + [PF[m - 1]])
    else:
        pf = _exact_fraction(p)
        probs = np.array([float(pf ** (i - 1) * (1 - pf)) for i in range(1, m)] + [float(pf ** (m - 1))])
    cov = strata_prob_cov(deltas, gammas, cond_arr, N)
    strata = StratumSet(np.asarray(thr), probs, cov, MODE_SUS, p=p, N=N, cond_probs=cond_arr,
                        delta=np.asarray(deltas), gamma=np.asarray(gammas))
    sigma = np.concatenate(rec_sigma)
    n_tot = sigma.shape[0]
    return PhaseIResult(strata, np.concatenate(rec_chi), np.concatenate(rec_stratum).astype(int),
                        chain_id=np.concatenate(rec_chain).astype(np.int64),
                        state_index=np.concatenate(rec_state).astype(int),
                        level=np.concatenate(rec_level).astype(int), sigma=sigma,
                        sample_key=np.arange(n_tot), N=N, seed=seed, model_name=model.name,
                        sigma_dim=d)


def _ndtri(u):
    from scipy.special import ndtri
    return ndtri(u)
