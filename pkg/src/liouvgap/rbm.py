"""RBM amplitude on the bi-base lattice and the trace-zero trial state.

The RBM amplitude of a configuration ``x = (sigma_R, sigma_L)`` is::

    rho_RBM(x) = exp(a . sigma_R + b . sigma_L) prod_k cosh(theta_k(x))
    theta_k(x) = c_k + W_R[k] . sigma_R + W_L[k] . sigma_L

The trial state subtracts a fixed ancillary matrix to kill the trace::

    rho'(x) = alpha rho'_0(x) + rho_RBM(x),   alpha = -Tr(rho_RBM) / Tr(rho'_0)

Amplitudes are handled as complex logarithms throughout; ``alpha`` is kept
as ``log_alpha`` so that large RBM weights cannot overflow it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import InvalidAncillaryError
from .model import all_configs, is_diagonal, validate_config

CHAIN_RULE = "chain-rule"
LITERAL = "literal"
O_VARIANTS = (CHAIN_RULE, LITERAL)

# log of the underflow floor 1e-150
LOG_FLOOR = np.log(1e-150)


def log_cosh(z):
    """Complex ``ln cosh z`` without overflow for large ``|Re z|``.

    Uses ``ln cosh z = s z - ln 2 + ln(1 + exp(-2 s z))`` with ``s = sign(Re z)``,
    which is exact (mod 2 pi i) and never exponentiates a large positive number.
    """
    z = np.asarray(z, dtype=complex)
    s = np.where(z.real >= 0, 1.0, -1.0)
    sz = s * z
    return sz - np.log(2.0) + np.log1p(np.exp(-2 * sz))


@dataclass
class RbmParameters:
    a: np.ndarray  # (N,) right visible biases
    b: np.ndarray  # (N,) left visible biases
    c: np.ndarray  # (M,) hidden biases
    w_r: np.ndarray  # (M, N)
    w_l: np.ndarray  # (M, N)

    @property
    def n_sites(self) -> int:
        return len(self.a)

    @property
    def n_hidden(self) -> int:
        return len(self.c)

    @property
    def n_complex(self) -> int:
        n, m = self.n_sites, self.n_hidden
        return 2 * n + m + 2 * m * n

    @property
    def n_real(self) -> int:
        return 2 * self.n_complex

    @property
    def visible_bias(self) -> np.ndarray:
        return np.concatenate([self.a, self.b])

    @property
    def weights(self) -> np.ndarray:
        """``(M, 2N)`` coupling matrix acting on the full bi-base configuration."""
        return np.hstack([self.w_r, self.w_l])

    def to_complex(self) -> np.ndarray:
        return np.concatenate([self.a, self.b, self.c, self.w_r.ravel(), self.w_l.ravel()])

    def flatten(self) -> np.ndarray:
        """Real vector ``[Re z, Im z]`` with ``z = (a, b, c, W_R, W_L)`` flattened."""
        z = self.to_complex()
        return np.concatenate([z.real, z.imag])

    @classmethod
    def from_complex(cls, z, n_sites: int, n_hidden: int) -> "RbmParameters":
        n, m = n_sites, n_hidden
        z = np.asarray(z, dtype=complex)
        if z.shape != (2 * n + m + 2 * m * n,):
            raise ValueError(f"expected {2 * n + m + 2 * m * n} complex parameters, got {z.shape}")
        cuts = np.cumsum([n, n, m, m * n])
        a, b, c, w_r, w_l = np.split(z, cuts)
        return cls(a.copy(), b.copy(), c.copy(), w_r.reshape(m, n).copy(), w_l.reshape(m, n).copy())

    @classmethod
    def unflatten(cls, vec, n_sites: int, n_hidden: int) -> "RbmParameters":
        vec = np.asarray(vec, dtype=float)
        k = len(vec) // 2
        return cls.from_complex(vec[:k] + 1j * vec[k:], n_sites, n_hidden)

    def copy(self) -> "RbmParameters":
        return RbmParameters(*(np.array(v, copy=True) for v in (self.a, self.b, self.c, self.w_r, self.w_l)))

    def __eq__(self, other):
        if not isinstance(other, RbmParameters):
            return NotImplemented
        return self.n_sites == other.n_sites and self.n_hidden == other.n_hidden and np.array_equal(self.to_complex(), other.to_complex())


def init_parameters(n_sites: int, n_hidden: int, scale: float = 0.01, rng=None) -> RbmParameters:
    """Real and imaginary parts i.i.d. uniform in ``[-scale, scale]``."""
    if n_sites < 1 or n_hidden < 1:
        raise ValueError("need at least one visible site and one hidden unit")
    if not scale > 0:
        raise ValueError(f"initialization scale must be positive, got {scale}")
    rng = np.random.default_rng(rng)
    k = 2 * n_sites + n_hidden + 2 * n_hidden * n_sites
    z = rng.uniform(-scale, scale, k) + 1j * rng.uniform(-scale, scale, k)
    return RbmParameters.from_complex(z, n_sites, n_hidden)


def hidden_arguments(rbm: RbmParameters, x) -> np.ndarray:
    """``theta(x)``, shape ``(..., M)``."""
    return rbm.c + np.asarray(x, dtype=float) @ rbm.weights.T


def log_amplitude(rbm: RbmParameters, x, theta=None) -> complex | np.ndarray:
    """``ln rho_RBM(x)`` for one configuration or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if theta is None:
        theta = hidden_arguments(rbm, x)
    return x @ rbm.visible_bias + log_cosh(theta).sum(axis=-1)


def _odd_sites(flips) -> np.ndarray:
    sites, counts = np.unique(np.asarray(flips, dtype=int), return_counts=True)
    return sites[counts % 2 == 1]


class LookupTable:
    """Cached ``theta(x)``, ``ln cosh theta`` and ``ln rho_RBM(x)`` for one chain."""

    def __init__(self, rbm: RbmParameters, x):
        self.rbm = rbm
        self.w = rbm.weights
        self.vis = rbm.visible_bias
        self.x = np.array(x, dtype=np.int8)
        self.theta = hidden_arguments(rbm, self.x)
        self.lc = log_cosh(self.theta)
        self.log_amp = complex(self.x @ self.vis + self.lc.sum())

    def proposal(self, flips, distinct=False):
        """``(sites, theta', lncosh theta', ln rho_RBM(x'))`` after flipping ``flips``.

        The table itself is unchanged.  Pass ``distinct=True`` when ``flips``
        has no repeated site to skip the parity reduction.
        """
        sites = np.asarray(flips, dtype=np.intp) if distinct else _odd_sites(flips)
        if len(sites) == 0:
            return sites, self.theta, self.lc, self.log_amp
        old = self.x[sites].astype(float)
        theta = self.theta - 2 * (self.w[:, sites] @ old)
        lc = log_cosh(theta)
        log_amp = self.log_amp - 2 * (self.vis[sites] @ old) + (lc.sum() - self.lc.sum())
        return sites, theta, lc, complex(log_amp)

    def log_ratio(self, flips) -> complex:
        return self.proposal(flips)[3] - self.log_amp

    def accept(self, sites, theta, lc, log_amp) -> None:
        self.x[sites] *= -1
        self.theta = theta
        self.lc = lc
        self.log_amp = log_amp

    def check(self, tol=1e-10) -> bool:
        """True if the cached ``theta`` still matches a fresh evaluation."""
        return bool(np.allclose(self.theta, hidden_arguments(self.rbm, self.x), rtol=0, atol=tol))


def amplitude_ratio(rbm: RbmParameters, table: LookupTable, x, flips) -> complex:
    """``rho_RBM(x') / rho_RBM(x)`` in ``O(M |flips|)`` using the table for ``x``.

    A site listed twice is flipped back, so it drops out.
    """
    if table.rbm is not rbm or not np.array_equal(table.x, x):
        table = LookupTable(rbm, x)
    return complex(np.exp(table.log_ratio(flips)))


# ---------------------------------------------------------------------------
# ancillary states and trial state


@dataclass(frozen=True)
class AncillaryState:
    """``IdentityMatrix`` (``config is None``) or a single bi-base product state."""

    config: np.ndarray | None = None

    @classmethod
    def identity(cls) -> "AncillaryState":
        return cls(None)

    @classmethod
    def product(cls, x) -> "AncillaryState":
        return cls(np.array(x, dtype=np.int8))

    @property
    def is_identity(self) -> bool:
        return self.config is None

    def describe(self) -> str:
        if self.is_identity:
            return "identity"
        return "product:" + "".join("u" if s > 0 else "d" for s in self.config)

    @classmethod
    def parse(cls, text: str, n_sites: int) -> "AncillaryState":
        if text == "identity":
            return cls.identity()
        if text == "all-down":
            return cls.product(-np.ones(2 * n_sites, dtype=np.int8))
        if text.startswith("product:"):
            spins = [1 if ch == "u" else -1 for ch in text[len("product:"):]]
            return cls.product(validate_config(spins, n_sites))
        raise InvalidAncillaryError(f"unknown ancillary descriptor {text!r}")

    def amplitude(self, x, n_sites: int) -> np.ndarray | float:
        x = np.asarray(x)
        if self.is_identity:
            return is_diagonal(x, n_sites).astype(float)
        return np.all(x == self.config, axis=-1).astype(float)

    def trace(self, n_sites: int) -> float:
        if self.is_identity:
            return float(2**n_sites)
        return 1.0 if bool(is_diagonal(self.config, n_sites)) else 0.0


@dataclass
class TrialState:
    rbm: RbmParameters
    ancillary: AncillaryState
    log_alpha: complex | None = None  # None means alpha == 0
    trace_estimate: complex = 0j
    trace_error: float = 0.0
    o_variant: str = CHAIN_RULE

    @property
    def n_sites(self) -> int:
        return self.rbm.n_sites

    @property
    def alpha(self) -> complex:
        return 0j if self.log_alpha is None else complex(np.exp(self.log_alpha))

    def replace(self, **changes) -> "TrialState":
        return dataclasses.replace(self, **changes)


def log_trial_amplitude(trial: TrialState, x, log_rbm=None) -> np.ndarray | complex:
    """``ln rho'(x)``; ``-inf`` real part marks an exact node."""
    x = np.asarray(x)
    if log_rbm is None:
        log_rbm = log_amplitude(trial.rbm, x)
    log_rbm = np.asarray(log_rbm, dtype=complex)
    if trial.log_alpha is None:
        return log_rbm[()] if log_rbm.ndim == 0 else log_rbm
    anc = np.asarray(trial.ancillary.amplitude(x, trial.n_sites)) > 0
    la = complex(trial.log_alpha)
    out = log_rbm.copy()
    if np.any(anc):
        out[anc] = log_add(log_rbm[anc], la)
    return out[()] if out.ndim == 0 else out


def log_add(u, v):
    """``ln(exp(u) + exp(v))`` for complex logs, evaluated around the larger modulus."""
    u = np.asarray(u, dtype=complex)
    big = np.where(u.real >= np.real(v), u, v)
    small = np.where(u.real >= np.real(v), v, u)
    with np.errstate(divide="ignore"):
        return big + np.log(1 + np.exp(small - big))


def trial_amplitude(trial: TrialState, x) -> complex:
    """``alpha rho'_0(x) + rho_RBM(x)``."""
    x = np.asarray(x)
    return trial.alpha * trial.ancillary.amplitude(x, trial.n_sites) + np.exp(log_amplitude(trial.rbm, x))


def rbm_log_derivatives(rbm: RbmParameters, x, theta=None) -> np.ndarray:
    """Holomorphic derivatives ``d ln rho_RBM / dz`` for ``z = (a, b, c, W_R, W_L)``.

    Shape ``(..., K)`` with ``K`` the number of complex parameters.
    """
    x = np.asarray(x, dtype=float)
    if theta is None:
        theta = hidden_arguments(rbm, x)
    n = rbm.n_sites
    t = np.tanh(theta)
    xr, xl = x[..., :n], x[..., n:]
    w_r = t[..., :, None] * xr[..., None, :]
    w_l = t[..., :, None] * xl[..., None, :]
    lead = x.shape[:-1]
    return np.concatenate(
        [xr, xl, t, w_r.reshape(*lead, -1), w_l.reshape(*lead, -1)], axis=-1
    )


def log_derivatives(trial: TrialState, x, theta=None, log_rbm=None, log_trial=None) -> np.ndarray:
    """``O_k(x) = d ln rho'(x) / d p_k`` over the real parameter vector.

    Real parts of the complex parameters come first, then imaginary parts;
    ``O`` for an imaginary part is ``i`` times the one for the real part.
    ``alpha`` is held fixed.  The chain-rule variant scales the RBM closed
    forms by ``rho_RBM(x) / rho'(x)``; the literal variant uses them as is.
    """
    x = np.asarray(x)
    if theta is None:
        theta = hidden_arguments(trial.rbm, x)
    d = rbm_log_derivatives(trial.rbm, x, theta)
    if trial.o_variant == CHAIN_RULE and trial.log_alpha is not None:
        if log_rbm is None:
            log_rbm = log_amplitude(trial.rbm, x, theta)
        if log_trial is None:
            log_trial = log_trial_amplitude(trial, x, log_rbm)
        d = d * np.exp(np.asarray(log_rbm) - np.asarray(log_trial))[..., None]
    return np.concatenate([d, 1j * d], axis=-1)


def exact_trace(rbm: RbmParameters) -> complex:
    """``Tr rho_RBM`` by summing all ``2**N`` diagonal amplitudes."""
    n = rbm.n_sites
    half = all_configs(n)
    diag = np.hstack([half, half])
    return complex(np.exp(log_amplitude(rbm, diag)).sum())


def refresh_alpha(trial: TrialState, trace_estimate: complex, trace_error: float = 0.0) -> TrialState:
    """Set ``alpha = -trace_estimate / Tr(rho'_0)``."""
    tr0 = trial.ancillary.trace(trial.n_sites)
    if tr0 == 0:
        raise InvalidAncillaryError("ancillary state has zero trace; alpha is undefined")
    trace_estimate = complex(trace_estimate)
    if trace_estimate == 0:
        log_alpha = None
    else:
        log_alpha = complex(np.log(-trace_estimate / tr0))
    return trial.replace(log_alpha=log_alpha, trace_estimate=trace_estimate, trace_error=float(trace_error))


def make_trial(rbm: RbmParameters, ancillary: AncillaryState, o_variant: str = CHAIN_RULE) -> TrialState:
    """Trial state with ``alpha`` set from the exact trace (use the sampler for large N)."""
    if o_variant not in O_VARIANTS:
        raise ValueError(f"unknown O_k variant {o_variant!r}")
    trial = TrialState(rbm, ancillary, o_variant=o_variant)
    return refresh_alpha(trial, exact_trace(rbm))


def trial_vector(trial: TrialState) -> np.ndarray:
    """Dense ``4**N`` vector of trial amplitudes, ordered by bi-base index."""
    configs = all_configs(2 * trial.n_sites)
    logs = log_trial_amplitude(trial, configs)
    return np.exp(logs)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = "# rbm-checkpoint"


def format_checkpoint(trial: TrialState, iteration: int) -> str:
    """Header line, then one real parameter per line in ``repr`` form (exact round-trip)."""
    rbm = trial.rbm
    tr = complex(trial.trace_estimate)
    head = (
        f"{CHECKPOINT_MAGIC} N={rbm.n_sites} M={rbm.n_hidden} ancillary={trial.ancillary.describe()} "
        f"iteration={int(iteration)} variant={trial.o_variant} trace={float(tr.real)!r},{float(tr.imag)!r} trace_error={float(trial.trace_error)!r}"
    )
    return head + "\n" + "".join(f"{float(v)!r}\n" for v in rbm.flatten())


def parse_checkpoint(text: str) -> tuple[TrialState, int]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a checkpoint file")
    fields = dict(item.split("=", 1) for item in lines[0][len(CHECKPOINT_MAGIC):].split())
    n, m = int(fields["N"]), int(fields["M"])
    values = np.array([float(v) for v in lines[1:] if v.strip()])
    rbm = RbmParameters.unflatten(values, n, m)
    if len(values) != rbm.n_real:
        raise ValueError(f"expected {rbm.n_real} values, got {len(values)}")
    anc = AncillaryState.parse(fields["ancillary"], n)
    re, im = (float(v) for v in fields.get("trace", "0,0").split(","))
    trial = TrialState(rbm, anc, o_variant=fields.get("variant", CHAIN_RULE))
    trial = refresh_alpha(trial, complex(re, im), float(fields.get("trace_error", 0.0)))
    return trial, int(fields["iteration"])


def save_checkpoint(path, trial: TrialState, iteration: int) -> None:
    with open(path, "w") as fh:
        fh.write(format_checkpoint(trial, iteration))


def load_checkpoint(path) -> tuple[TrialState, int]:
    with open(path) as fh:
        return parse_checkpoint(fh.read())
