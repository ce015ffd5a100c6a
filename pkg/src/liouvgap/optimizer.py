"""Stochastic-reconfiguration real-time evolution under the vectorized Liouvillian.

One iteration: estimate moments over ``|rho'|^2``, assemble the real linear
system ``(S + lambda I) dp = eps (F + beta F')``, update the parameters, and
re-estimate the RBM trace to refresh ``alpha``.  With ``beta > 0`` the
trial additionally evolves under ``i L`` so that, among first decay modes
sharing the same real part, the one with the smallest imaginary part wins.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .errors import EstimatorInconsistencyError, LiouvGapError, SingularSystemError
from .model import VectorizedLiouvillian
from .rbm import RbmParameters, TrialState, refresh_alpha
from .sampler import ChainConfig, EstimatorBundle, estimate_trace, run_estimation

log = logging.getLogger(__name__)

RESIDUE_WARN = 1e-10
RESIDUE_ERROR = 1e-6

BETA_OFF = "off"
BETA_JOINT = "joint"
BETA_TWO_PHASE = "two-phase"


@dataclass
class SrSystem:
    s: np.ndarray
    f: np.ndarray
    f_imag: np.ndarray  # force of the evolution under i L
    reg: float = 1e-4
    eps: float = 0.01
    beta: float = 0.0


def _real_part(z, name):
    z = np.asarray(z)
    scale = max(1.0, float(np.max(np.abs(z.real), initial=0.0)))
    residue = float(np.max(np.abs(z.imag), initial=0.0)) / scale
    if residue > RESIDUE_ERROR:
        raise EstimatorInconsistencyError(f"{name} has imaginary residue {residue:.3g}")
    if residue > RESIDUE_WARN:
        log.warning("%s imaginary residue %.3g truncated", name, residue)
    return np.ascontiguousarray(z.real)


def assemble(bundle: EstimatorBundle, reg: float = 1e-4, eps: float = 0.01, beta: float = 0.0) -> SrSystem:
    """Covariance ``S`` and forces ``F`` (under ``L``) and ``F'`` (under ``i L``)."""
    mo = bundle.mean_o
    ml = bundle.mean_l
    oo = bundle.mean_oo
    s = oo + oo.T - np.outer(mo.conj(), mo) - np.outer(mo, mo.conj())
    f = bundle.mean_lo + bundle.mean_ol - np.conj(ml) * mo - mo.conj() * ml
    f_imag = -1j * bundle.mean_lo + 1j * bundle.mean_ol + 1j * np.conj(ml) * mo - 1j * mo.conj() * ml
    return SrSystem(_real_part(s, "S"), _real_part(f, "F"), _real_part(f_imag, "F'"), reg, eps, beta)


def solve_update(system: SrSystem, retries: int = 3) -> np.ndarray:
    """``dp = eps * (S + lambda I)^-1 (F + beta F')``.

    Cholesky first; if the shifted matrix is not positive definite the shift
    is doubled up to ``retries`` times, then least squares takes over.
    """
    rhs = system.f + system.beta * system.f_imag
    n = len(rhs)
    reg = system.reg
    for _ in range(retries + 1):
        try:
            factor = scipy.linalg.cho_factor(system.s + reg * np.eye(n), check_finite=True)
            sol = scipy.linalg.cho_solve(factor, rhs)
            if np.all(np.isfinite(sol)):
                return system.eps * sol
        except (np.linalg.LinAlgError, ValueError):
            pass
        reg *= 2
    try:
        sol = scipy.linalg.lstsq(system.s + system.reg * np.eye(n), rhs)[0]
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(f"SR system could not be solved: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularSystemError("SR system could not be solved: non-finite solution")
    log.warning("SR solve fell back to least squares")
    return system.eps * sol


def schedules(p: int) -> tuple[float, float]:
    """Learning rate and diagonal shift at iteration ``p``."""
    if p < 0:
        raise ValueError("iteration index must be >= 0")
    return max(0.01, 0.1 * 0.96**p), max(1e-4, 0.9**p)


@dataclass
class TraceRecord:
    step: int
    re_l: float
    im_l: float
    acceptance: float
    discard: float
    step_norm: float
    alpha_re: float
    alpha_im: float
    trace_re: float
    trace_im: float
    beta: float = 0.0
    l_stderr: float = 0.0


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)
    converged: bool = False
    phase_switch: int | None = None

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("trace steps must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def re_l(self) -> np.ndarray:
        return np.array([r.re_l for r in self.records])

    @property
    def im_l(self) -> np.ndarray:
        return np.array([r.im_l for r in self.records])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "RunTrace":
        tr = cls()
        for line in text.splitlines():
            if line.strip():
                tr.append(TraceRecord(**json.loads(line)))
        return tr


@dataclass
class RunOptions:
    max_iters: int = 200
    window: int = 20
    tol: float = 1e-3
    min_iters: int = 40
    beta: float = 0.0
    beta_mode: str = BETA_TWO_PHASE  # only consulted when beta > 0
    retries: int = 3
    persistent: bool = False  # start each iteration's chains where the previous ones ended

    def __post_init__(self):
        if self.beta_mode not in (BETA_OFF, BETA_JOINT, BETA_TWO_PHASE):
            raise ValueError(f"unknown beta mode {self.beta_mode!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    @property
    def effective_beta_mode(self) -> str:
        return BETA_OFF if self.beta == 0 else self.beta_mode


class RunError(LiouvGapError, RuntimeError):
    """Failure inside ``run``; carries the trial and partial trace."""

    def __init__(self, message, trial, trace):
        super().__init__(message)
        self.trial = trial
        self.trace = trace


def _window_change(values: np.ndarray, window: int) -> float:
    if len(values) < 2 * window:
        return np.inf
    return abs(values[-window:].mean() - values[-2 * window:-window].mean())


def update_trace_estimate(trial: TrialState, cfg: ChainConfig, rng) -> TrialState:
    n = trial.n_sites
    exhaustive = 2**n <= cfg.trace_samples
    est = estimate_trace(trial.rbm, cfg.trace_samples, rng, exhaustive=exhaustive)
    return refresh_alpha(trial, est.value, est.stderr)


def run(
    trial: TrialState,
    liouvillian: VectorizedLiouvillian,
    cfg: ChainConfig,
    options: RunOptions | None = None,
    callback=None,
) -> tuple[TrialState, RunTrace]:
    """Iterate sample -> assemble -> solve -> update -> refresh alpha.

    Stops after ``max_iters`` or once the mean of ``Re<L>`` over the last
    ``window`` iterations moves by less than ``tol`` from the window before
    (and, in the second phase of a two-phase run, ``Im<L>`` as well).
    ``callback(p, trial, bundle)`` is invoked after each estimation.
    """
    opts = options or RunOptions()
    trace = RunTrace()
    n, m = trial.rbm.n_sites, trial.rbm.n_hidden
    # a stream for trace sampling that never collides with the chain streams
    trace_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2**31,)))
    mode = opts.effective_beta_mode
    beta_on = mode == BETA_JOINT
    phase_start = 0
    step_cfg = cfg
    starts = None
    for p in range(opts.max_iters):
        eps, reg = schedules(p)
        step_cfg = ChainConfig(
            n_samples=cfg.n_samples,
            burn_in=cfg.burn_in,
            n_chains=cfg.n_chains,
            seed=int(np.random.SeedSequence([cfg.seed, p]).generate_state(1)[0]),
            max_flips=cfg.max_flips,
            exact=cfg.exact,
            trace_samples=cfg.trace_samples,
        )
        try:
            bundle = run_estimation(trial, liouvillian, step_cfg, starts=starts)
            if callback is not None:
                callback(p, trial, bundle)
            beta = opts.beta if beta_on else 0.0
            system = assemble(bundle, reg, eps, beta)
            delta = solve_update(system, opts.retries)
        except LiouvGapError as exc:
            raise RunError(str(exc), trial, trace) from exc
        if opts.persistent:
            starts = bundle.final_states
        alpha = trial.alpha
        trace.append(
            TraceRecord(
                step=p,
                re_l=float(bundle.mean_l.real),
                im_l=float(bundle.mean_l.imag),
                acceptance=float(bundle.acceptance),
                discard=float(bundle.discard_rate),
                step_norm=float(np.linalg.norm(delta)),
                alpha_re=float(alpha.real),
                alpha_im=float(alpha.imag),
                trace_re=float(trial.trace_estimate.real),
                trace_im=float(trial.trace_estimate.imag),
                beta=float(beta),
                l_stderr=float(bundle.l_stderr),
            )
        )
        params = RbmParameters.unflatten(trial.rbm.flatten() + delta, n, m)
        try:
            trial = update_trace_estimate(trial.replace(rbm=params), cfg, trace_rng)
        except LiouvGapError as exc:
            raise RunError(str(exc), trial, trace) from exc

        if p + 1 - phase_start >= opts.min_iters:
            re_change = _window_change(trace.re_l[phase_start:], opts.window)
            im_change = _window_change(trace.im_l[phase_start:], opts.window) if beta_on else 0.0
            if re_change < opts.tol and im_change < opts.tol:
                if mode == BETA_TWO_PHASE and not beta_on:
                    beta_on = True
                    phase_start = p + 1
                    trace.phase_switch = p + 1
                    log.info("real-time phase converged at step %d; enabling beta=%g", p, opts.beta)
                    continue
                trace.converged = True
                break
    return trial, trace


def gap_estimate(source, window: int = 20) -> tuple[float, float]:
    """``-Re<L>`` and its standard error.

    ``source`` is an :class:`EstimatorBundle` or a :class:`RunTrace`; for a
    trace only the final ``window`` records are used, never a running extremum.
    """
    if isinstance(source, EstimatorBundle):
        return float(-source.mean_l.real), float(source.l_stderr)
    vals = -source.re_l[-window:]
    if len(vals) == 0:
        raise ValueError("empty trace")
    err = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), err
