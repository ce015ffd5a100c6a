"""Metropolis-Hastings sampling of ``|rho'(x)|^2`` and the SR estimators.

Chains only record configurations; the local Liouvillian and the
log-derivatives are then evaluated in one batch over the distinct visited
configurations, weighted by visit counts.  Exact-summation mode replaces the
chain by all ``4**N`` configurations weighted by ``|rho'|^2``.

Per-chain random streams come from ``numpy.random.SeedSequence(seed).spawn(n_chains)``
in chain-index order, so chain ``i`` always sees the same stream for a given
master seed no matter how many chains run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import SamplingError
from .model import VectorizedLiouvillian, all_configs, config_to_index, index_to_config
from .rbm import (
    LOG_FLOOR,
    LookupTable,
    RbmParameters,
    TrialState,
    hidden_arguments,
    log_add,
    log_amplitude,
    log_cosh,
    log_derivatives,
    log_trial_amplitude,
)

log = logging.getLogger(__name__)

MAX_EXACT_SITES = 6
MAX_FLIPS = 4
STAGNATION_RATE = 0.01


@dataclass
class ChainConfig:
    n_samples: int = 1000  # chain length per chain, burn-in included
    burn_in: float = 0.05
    n_chains: int = 1
    seed: int = 0
    max_flips: int = MAX_FLIPS
    exact: bool = False
    trace_samples: int = 4096

    def __post_init__(self):
        if self.n_samples < 1 or self.n_chains < 1:
            raise ValueError("chain length and chain count must be positive")
        if not 0 <= self.burn_in < 1:
            raise ValueError("burn-in fraction must lie in [0, 1)")
        if self.max_flips < 1:
            raise ValueError("max_flips must be >= 1")

    @property
    def n_burn(self) -> int:
        return math.ceil(self.burn_in * self.n_samples - 1e-12)

    def check_budget(self, n_params: int) -> bool:
        """Log an advisory when the total sample count is small for ``n_params``."""
        total = (self.n_samples - self.n_burn) * self.n_chains
        if not self.exact and total < 10 * n_params:
            log.info("sample budget %d is below 10x the %d parameters", total, n_params)
            return False
        return True

    def chain_rngs(self) -> list[np.random.Generator]:
        seqs = np.random.SeedSequence(self.seed).spawn(self.n_chains)
        return [np.random.default_rng(s) for s in seqs]


@dataclass
class EstimatorBundle:
    """Moments over ``|rho'|^2``; ``O`` is indexed by real parameter.

    ``mean_oo[k, k'] = <O_k^* O_k'>``, ``mean_ol[k] = <O_k^* L>`` and
    ``mean_lo[k] = <L^* O_k>``.
    """

    mean_l: complex
    mean_o: np.ndarray
    mean_oo: np.ndarray
    mean_ol: np.ndarray
    mean_lo: np.ndarray
    n_samples: int
    acceptance: float = 1.0
    discarded: int = 0
    l_stderr: float = 0.0
    warnings: list[str] = field(default_factory=list)
    samples: dict | None = None
    final_states: list | None = None  # last state of each chain, for persistent chains

    @property
    def discard_rate(self) -> float:
        total = self.n_samples + self.discarded
        return self.discarded / total if total else 0.0


class TraceEstimate(NamedTuple):
    value: complex
    stderr: float


def propose_flips(n_spins: int, rng: np.random.Generator, max_flips: int = MAX_FLIPS) -> np.ndarray:
    """1..max_flips distinct sites; flip count uniform, sites uniform without replacement."""
    k = int(rng.integers(1, min(max_flips, n_spins) + 1))
    return rng.choice(n_spins, size=k, replace=False)


def acceptance_probability(log_current: complex, log_new: complex) -> float:
    """``min(1, |rho'(x_new) / rho'(x)|^2)`` from log amplitudes."""
    diff = 2 * (np.real(log_new) - np.real(log_current))
    if np.isnan(diff):
        # both amplitudes vanish; moving off a node is always allowed
        diff = -np.inf if np.isinf(np.real(log_new)) and np.real(log_new) < 0 else np.inf
    return 1.0 if diff >= 0 else math.exp(diff)


def _log_rho_prime(trial: TrialState, x, log_rbm: complex) -> complex:
    return complex(log_trial_amplitude(trial, x, log_rbm))


def metropolis_step(trial: TrialState, table: LookupTable, rng: np.random.Generator, max_flips: int = MAX_FLIPS, log_current=None):
    """One proposal/accept step; moves ``table`` in place on acceptance.

    Returns ``(x, accepted, ln rho'(x))`` for the (possibly new) current state.
    """
    if log_current is None:
        log_current = _log_rho_prime(trial, table.x, table.log_amp)
    flips = propose_flips(len(table.x), rng, max_flips)
    sites, theta, lc, log_rbm = table.proposal(flips, distinct=True)
    x_new = table.x.copy()
    x_new[sites] *= -1
    log_new = _log_rho_prime(trial, x_new, log_rbm)
    if rng.random() < acceptance_probability(log_current, log_new):
        table.accept(sites, theta, lc, log_rbm)
        return table.x, True, log_new
    return table.x, False, log_current


def _ancillary_index_test(trial: TrialState):
    """Fast predicate on the dense index: does the ancillary state touch it?"""
    n = trial.n_sites
    if trial.log_alpha is None:
        return lambda idx: False
    if trial.ancillary.is_identity:
        mask = (1 << n) - 1
        return lambda idx: (idx >> n) == (idx & mask)
    target = int(config_to_index(trial.ancillary.config))
    return lambda idx: idx == target


def run_chain(trial: TrialState, rng: np.random.Generator, n_samples: int, n_burn: int, max_flips: int = MAX_FLIPS, start=None):
    """Dense indices of the retained states of one chain, plus its acceptance rate.

    The chain starts from a uniformly random configuration, or from ``start``
    when given (the random draw is made either way, so streams stay aligned).

    The proposal randomness for the whole chain is drawn up front: flip
    counts, one random permutation of the sites per step (its first ``k``
    entries are flipped) and the acceptance uniforms.  This has the same law
    as repeated :func:`metropolis_step` calls.
    """
    n_spins = 2 * trial.n_sites
    x0 = rng.choice(np.array([-1, 1], dtype=np.int8), size=n_spins)
    if start is not None:
        x0 = np.asarray(start, dtype=np.int8)
    kmax = min(max_flips, n_spins)
    counts = rng.integers(1, kmax + 1, size=n_samples)
    perms = np.argsort(rng.random((n_samples, n_spins)), axis=1)
    uniforms = rng.random(n_samples)

    table = LookupTable(trial.rbm, x0)
    touches = _ancillary_index_test(trial)
    log_alpha = trial.log_alpha
    bit = [1 << (n_spins - 1 - s) for s in range(n_spins)]
    cur = int(config_to_index(x0))
    log_cur = complex(log_add(table.log_amp, log_alpha)) if touches(cur) else table.log_amp
    out = np.empty(n_samples - n_burn, dtype=np.int64)
    accepted = 0
    for step in range(n_samples):
        sites = perms[step, : counts[step]]
        _, theta, lc, log_rbm = table.proposal(sites, distinct=True)
        new = cur
        for s in sites:
            new ^= bit[s]
        log_new = complex(log_add(log_rbm, log_alpha)) if touches(new) else log_rbm
        if uniforms[step] < acceptance_probability(log_cur, log_new):
            table.accept(sites, theta, lc, log_rbm)
            cur, log_cur = new, log_new
            accepted += 1
        if step >= n_burn:
            out[step - n_burn] = cur
    return out, accepted / n_samples


def _eval_configs(trial: TrialState, liouvillian: VectorizedLiouvillian, configs: np.ndarray):
    """Local Liouvillian, log-derivatives and ``ln rho'`` on a batch of configurations."""
    theta = hidden_arguments(trial.rbm, configs)
    log_rbm = log_amplitude(trial.rbm, configs, theta)
    log_tr = np.asarray(log_trial_amplitude(trial, configs, log_rbm))
    loc = _local_from_logs(trial, liouvillian, configs, theta, log_tr)
    o = log_derivatives(trial, configs, theta, log_rbm, log_tr)
    return loc, o, log_tr


def _local_from_logs(trial, liouvillian, configs, theta, log_tr):
    configs = np.asarray(configs)
    loc = np.asarray(liouvillian.diagonal(configs), dtype=complex).copy()
    w = trial.rbm.weights
    vis = trial.rbm.visible_bias
    for s, t, amp in liouvillian.flips(configs):
        mask = amp != 0
        if not np.any(mask):
            continue
        xs = configs[mask][:, [s, t]].astype(float)
        th = theta[mask] - 2 * xs @ w[:, [s, t]].T
        flipped = configs[mask].copy()
        flipped[:, [s, t]] *= -1
        log_rbm_f = flipped.astype(float) @ vis + log_cosh(th).sum(axis=-1)
        log_f = np.asarray(log_trial_amplitude(trial, flipped, log_rbm_f))
        with np.errstate(over="ignore", invalid="ignore"):
            loc[mask] += amp[mask] * np.exp(log_f - log_tr[mask])
    return loc


def local_liouvillian(trial: TrialState, liouvillian: VectorizedLiouvillian, x) -> complex | np.ndarray:
    """``sum_x' <x|L|x'> rho'(x') / rho'(x)`` for one configuration or a batch."""
    x = np.asarray(x)
    single = x.ndim == 1
    configs = np.atleast_2d(x)
    theta = hidden_arguments(trial.rbm, configs)
    log_tr = np.asarray(log_trial_amplitude(trial, configs, log_amplitude(trial.rbm, configs, theta)))
    if np.any(log_tr.real < LOG_FLOOR):
        if single:
            raise SamplingError("trial amplitude below the underflow floor")
    loc = _local_from_logs(trial, liouvillian, configs, theta, log_tr)
    return complex(loc[0]) if single else loc


def _moments(weights, loc, o) -> tuple:
    """Weighted first and second moments; ``weights`` need not be normalized."""
    wl = weights * loc
    wo = weights[:, None] * o
    return (
        wl.sum(),
        wo.sum(axis=0),
        o.conj().T @ wo,
        o.conj().T @ wl,
        weights.sum(),
    )


def _bundle_from_weighted(weights, loc, o, n_samples, acceptance, discarded, l_stderr, keep):
    s_l, s_o, s_oo, s_ol, total = _moments(weights, loc, o)
    mean_oo = s_oo / total
    mean_oo = (mean_oo + mean_oo.conj().T) / 2
    mean_ol = s_ol / total
    bundle = EstimatorBundle(
        mean_l=complex(s_l / total),
        mean_o=s_o / total,
        mean_oo=mean_oo,
        mean_ol=mean_ol,
        mean_lo=mean_ol.conj(),
        n_samples=n_samples,
        acceptance=acceptance,
        discarded=discarded,
        l_stderr=l_stderr,
    )
    if keep:
        bundle.samples = {"weights": weights / total, "local": loc, "o": o}
    return bundle


def exact_estimation(trial: TrialState, liouvillian: VectorizedLiouvillian, keep_samples: bool = False) -> EstimatorBundle:
    """All five estimator families by full enumeration over ``4**N`` configurations."""
    if trial.n_sites > MAX_EXACT_SITES:
        raise SamplingError(f"exact summation is limited to {MAX_EXACT_SITES} sites")
    configs = all_configs(2 * trial.n_sites)
    theta = hidden_arguments(trial.rbm, configs)
    log_rbm = log_amplitude(trial.rbm, configs, theta)
    log_tr = np.asarray(log_trial_amplitude(trial, configs, log_rbm))
    scale = np.max(log_tr.real)
    keep = (log_tr.real - scale) >= LOG_FLOOR
    configs, theta, log_rbm, log_tr = configs[keep], theta[keep], log_rbm[keep], log_tr[keep]
    weights = np.exp(2 * (log_tr.real - scale))
    loc = _local_from_logs(trial, liouvillian, configs, theta, log_tr)
    o = log_derivatives(trial, configs, theta, log_rbm, log_tr)
    bundle = _bundle_from_weighted(weights, loc, o, len(configs), 1.0, int((~keep).sum()), 0.0, keep_samples)
    if keep_samples:
        bundle.samples["configs"] = configs
    return bundle


def run_estimation(
    trial: TrialState, liouvillian: VectorizedLiouvillian, cfg: ChainConfig, keep_samples: bool = False, starts=None
) -> EstimatorBundle:
    """Sample ``|rho'|^2`` with ``cfg.n_chains`` Metropolis chains and accumulate moments.

    ``starts`` optionally gives one initial configuration per chain (for
    example ``final_states`` of the previous bundle).

    Every retained chain state counts, repeats included.  Configurations
    whose amplitude falls below the underflow floor (relative to the largest
    retained amplitude) are dropped and counted in ``discarded``.
    """
    if cfg.exact:
        return exact_estimation(trial, liouvillian, keep_samples)
    n_keep = cfg.n_samples - cfg.n_burn
    if n_keep <= 0:
        raise SamplingError("no samples left after burn-in")
    cfg.check_budget(trial.rbm.n_real)
    chains = []
    rates = []
    if starts is not None and len(starts) != cfg.n_chains:
        raise ValueError(f"need {cfg.n_chains} chain starts, got {len(starts)}")
    for c, rng in enumerate(cfg.chain_rngs()):
        idx, rate = run_chain(trial, rng, cfg.n_samples, cfg.n_burn, cfg.max_flips, None if starts is None else starts[c])
        chains.append(idx)
        rates.append(rate)
    all_idx = np.concatenate(chains)
    uniq, inverse, counts = np.unique(all_idx, return_inverse=True, return_counts=True)
    configs = index_to_config(uniq, 2 * trial.n_sites)
    loc, o, log_tr = _eval_configs(trial, liouvillian, configs)
    scale = np.max(log_tr.real)
    good = (log_tr.real - scale) >= LOG_FLOOR
    good &= np.isfinite(loc)
    discarded = int(counts[~good].sum())
    if not np.any(good):
        raise SamplingError("every sample fell below the underflow floor")

    # chain-resolved means of L for a batch-means standard error
    per_chain = []
    for ch in chains:
        sel = np.isin(ch, uniq[good])
        vals = loc[np.searchsorted(uniq, ch[sel])]
        per_chain.append(vals.mean() if len(vals) else np.nan)
    l_stderr = _blocked_stderr(loc[inverse][good[inverse]])

    weights = counts[good].astype(float)
    bundle = _bundle_from_weighted(
        weights, loc[good], o[good], int(weights.sum()), float(np.mean(rates)), discarded, l_stderr, keep_samples
    )
    bundle.final_states = [index_to_config(int(ch[-1]), 2 * trial.n_sites) for ch in chains]
    if keep_samples:
        bundle.samples["configs"] = configs[good]
        bundle.samples["chain_means"] = np.array(per_chain)
    for i, rate in enumerate(rates):
        if rate < STAGNATION_RATE:
            bundle.warnings.append(f"chain {i} stagnated: acceptance rate {rate:.4f}")
    return bundle


def _blocked_stderr(values: np.ndarray, n_blocks: int = 20) -> float:
    """Standard error of the mean of the real part from contiguous block means."""
    values = np.asarray(values).real
    if len(values) < 2:
        return 0.0
    n_blocks = min(n_blocks, len(values))
    blocks = np.array_split(values, n_blocks)
    means = np.array([b.mean() for b in blocks])
    return float(means.std(ddof=1) / np.sqrt(n_blocks))


def estimate_trace(rbm: RbmParameters, n_t: int, rng=None, exhaustive: bool = False) -> TraceEstimate:
    """``Tr rho_RBM = 2**N E_l[rho_RBM(l, l)]`` with ``l`` uniform over ``2**N`` states.

    ``exhaustive=True`` sums every diagonal element instead (``n_t`` ignored).
    """
    if n_t < 1:
        raise ValueError("need at least one trace sample")
    n = rbm.n_sites
    if exhaustive:
        half = all_configs(n)
        diag = np.exp(log_amplitude(rbm, np.hstack([half, half])))
        return TraceEstimate(complex(diag.sum()), 0.0)
    rng = np.random.default_rng(rng)
    half = rng.choice(np.array([-1, 1], dtype=np.int8), size=(n_t, n))
    diag = np.exp(log_amplitude(rbm, np.hstack([half, half])))
    value = 2**n * diag.mean()
    err = 2**n * np.sqrt(np.mean(np.abs(diag - diag.mean()) ** 2) / (n_t - 1)) if n_t > 1 else float("inf")
    return TraceEstimate(complex(value), float(err))


def exact_expectation(trial: TrialState, dense_l: np.ndarray) -> complex:
    """``<rho'|L|rho'> / <rho'|rho'>`` from a dense Liouvillian."""
    from .rbm import trial_vector

    v = trial_vector(trial)
    return complex(np.vdot(v, dense_l @ v) / np.vdot(v, v))

