"""Dense exact-diagonalization oracle for small systems.

Everything here is built directly from Kronecker products of the Hamiltonian
and jump operators, independently of the local-term machinery in
:mod:`liouvgap.model`; the two routes are checked against each other in the
tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, ExceptionalPointError, NotApplicableError, OracleError
from .model import LindbladModel

MAX_DENSE_SITES = 6
DEGENERACY_TOL = 1e-8

# single-site operators in the basis (up, down)
SX = np.array([[0, 1], [1, 0]], dtype=complex) / 2
SY = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
SZ = np.array([[1, 0], [0, -1]], dtype=complex) / 2
SP = np.array([[0, 1], [0, 0]], dtype=complex)
SM = np.array([[0, 0], [1, 0]], dtype=complex)
ID2 = np.eye(2, dtype=complex)


def site_operator(op: np.ndarray, site: int, n_sites: int) -> np.ndarray:
    factors = [ID2] * n_sites
    factors[site] = op
    return reduce(np.kron, factors)


def hamiltonian(model: LindbladModel) -> np.ndarray:
    n = model.n_sites
    dim = 2**n
    h = np.zeros((dim, dim), dtype=complex)
    ops = {name: [site_operator(o, j, n) for j in range(n)] for name, o in (("x", SX), ("y", SY), ("z", SZ))}
    for j, k in model.lattice.bonds:
        h += model.jx * ops["x"][j] @ ops["x"][k]
        h += model.jy * ops["y"][j] @ ops["y"][k]
        h += model.jz * ops["z"][j] @ ops["z"][k]
    return h


def jump_operators(model: LindbladModel) -> list[np.ndarray]:
    """``L_j = sqrt(gamma/2) S-_j`` so that the generic dissipator carries a bare factor 2."""
    n = model.n_sites
    pref = np.sqrt(model.gamma / 2)
    return [pref * site_operator(SM, j, n) for j in range(n)]


def effective_hamiltonian(model: LindbladModel) -> np.ndarray:
    """``H_NH = -iH - sum_mu L^+ L``, the right-half operator ``H_R``."""
    h_nh = -1j * hamiltonian(model)
    for L in jump_operators(model):
        h_nh -= L.conj().T @ L
    return h_nh


def _check_capacity(n_sites, max_sites=MAX_DENSE_SITES):
    if n_sites > max_sites:
        raise CapacityError(f"dense Liouvillian for {n_sites} sites exceeds the {max_sites}-site limit")


def dense_liouvillian(model: LindbladModel, max_sites: int = MAX_DENSE_SITES) -> np.ndarray:
    """``-iH (x) 1 + i 1 (x) H^T + sum_mu (2 L (x) L* - L^+L (x) 1 - 1 (x) L^T L*)``."""
    _check_capacity(model.n_sites, max_sites)
    h = hamiltonian(model)
    eye = np.eye(h.shape[0], dtype=complex)
    out = -1j * np.kron(h, eye) + 1j * np.kron(eye, h.T)
    for L in jump_operators(model):
        ldl = L.conj().T @ L
        out += 2 * np.kron(L, L.conj()) - np.kron(ldl, eye) - np.kron(eye, ldl.T)
    return out


def magnon_number(n_sites: int) -> np.ndarray:
    """Number of up spins of every ``2**n_sites`` basis state."""
    idx = np.arange(2**n_sites)
    bits = (idx[:, None] >> np.arange(n_sites)) & 1
    return n_sites - bits.sum(axis=1)


def magnon_sector_spectrum(model: LindbladModel, m: int) -> np.ndarray:
    """Eigenvalues of ``H_R`` restricted to states with ``m`` up spins.

    Only meaningful when the Hamiltonian conserves total ``S^z`` (``Jx == Jy``).
    """
    h_nh = effective_hamiltonian(model)
    sel = np.flatnonzero(magnon_number(model.n_sites) == m)
    return np.linalg.eigvals(h_nh[np.ix_(sel, sel)])


# ---------------------------------------------------------------------------
# spectra


@dataclass
class SpectrumResult:
    eigenvalues: np.ndarray  # sorted by decreasing real part
    eigenvectors: np.ndarray  # columns, unit norm, largest component real positive
    steady_index: int
    gap: float
    first_decay: np.ndarray  # indices into eigenvalues
    overlaps: np.ndarray  # |<v_i|v_j>| between first decay modes
    tol: float = DEGENERACY_TOL

    @property
    def n_sites(self) -> int:
        return int(round(np.log(len(self.eigenvalues)) / np.log(4)))

    def first_decay_modes(self) -> np.ndarray:
        return self.eigenvectors[:, self.first_decay]


def _fix_phase(vecs: np.ndarray) -> np.ndarray:
    vecs = vecs / np.linalg.norm(vecs, axis=0)
    lead = np.argmax(np.abs(vecs), axis=0)
    phase = vecs[lead, np.arange(vecs.shape[1])]
    return vecs * (np.abs(phase) / phase)


def _group_degenerate(values: np.ndarray, tol: float) -> list[np.ndarray]:
    groups: list[list[int]] = []
    for i, v in enumerate(values):
        for g in groups:
            if abs(values[g[0]] - v) < tol:
                g.append(i)
                break
        else:
            groups.append([i])
    return [np.array(g) for g in groups]


def _orthonormal_overlaps(values: np.ndarray, vecs: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Overlap matrix after orthonormalizing inside every exactly-degenerate group.

    A degenerate eigenspace has no preferred basis; only overlaps between
    different eigenvalues carry information.
    """
    vecs = vecs.copy()
    for g in _group_degenerate(values, tol):
        if len(g) > 1:
            q, _ = np.linalg.qr(vecs[:, g])
            vecs[:, g] = q
    vecs = _fix_phase(vecs)
    return vecs, np.abs(vecs.conj().T @ vecs)


def full_spectrum(matrix: np.ndarray, tol: float = DEGENERACY_TOL) -> SpectrumResult:
    try:
        vals, vecs = scipy.linalg.eig(matrix)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise OracleError(f"eigensolver failed: {exc}") from exc
    if not np.all(np.isfinite(vals)):
        raise OracleError("eigensolver returned non-finite eigenvalues")
    # decreasing real part; ties broken by imaginary part for reproducibility
    order = np.lexsort((np.round(vals.imag, 10), -np.round(vals.real, 10)))
    vals = vals[order]
    vecs = _fix_phase(vecs[:, order])
    if abs(vals[0]) > tol:
        raise OracleError(f"largest eigenvalue {vals[0]} is not zero; not a valid Liouvillian")
    if len(vals) > 1 and abs(vals[1].real) <= tol:
        raise OracleError("steady state is not unique")
    if np.max(vals.real) > tol:
        raise OracleError("eigenvalue with positive real part")
    re1 = vals[1].real if len(vals) > 1 else 0.0
    first = np.flatnonzero(np.abs(vals.real - re1) < tol)
    first = first[first > 0]
    sub_vecs, overlaps = _orthonormal_overlaps(vals[first], vecs[:, first], tol)
    vecs[:, first] = sub_vecs
    return SpectrumResult(vals, vecs, 0, float(-re1), first, overlaps, tol)


SINGLE = "single"
DEGENERATE_ORTHOGONAL = "degenerate-orthogonal"
DEGENERATE_NONORTHOGONAL = "degenerate-nonorthogonal"


def classify_decay_modes(spec: SpectrumResult) -> str:
    n = len(spec.first_decay)
    if n == 1:
        return SINGLE
    off = spec.overlaps - np.diag(np.diag(spec.overlaps))
    return DEGENERATE_ORTHOGONAL if np.max(off) < spec.tol else DEGENERATE_NONORTHOGONAL


def spectrum_records(eigenvalues, tol: float = DEGENERACY_TOL) -> list[tuple[float, float, int]]:
    """``(Re, Im, degeneracy)`` per distinct eigenvalue, for scatter plots."""
    vals = np.asarray(eigenvalues)
    return [
        (float(vals[g[0]].real), float(vals[g[0]].imag), len(g))
        for g in _group_degenerate(vals, tol)
    ]


def fidelity(trial, mode: np.ndarray) -> float:
    """``|<rho'|rho_1>|`` of the L2-normalized vectors.

    ``trial`` is either a dense vector or a :class:`~liouvgap.rbm.TrialState`.
    """
    if not isinstance(trial, np.ndarray):
        from .rbm import trial_vector

        trial = trial_vector(trial)
    tn = np.linalg.norm(trial)
    mn = np.linalg.norm(mode)
    if tn == 0 or mn == 0:
        raise ValueError("fidelity of a zero-norm vector is undefined")
    return float(abs(np.vdot(trial, mode)) / (tn * mn))


def subspace_fidelity(vector: np.ndarray, modes: np.ndarray) -> float:
    """Norm of the projection of the normalized ``vector`` onto span(``modes``)."""
    q, _ = np.linalg.qr(modes)
    v = vector / np.linalg.norm(vector)
    return float(np.linalg.norm(q.conj().T @ v))


# ---------------------------------------------------------------------------
# XXZ structure


@dataclass
class CoincidenceReport:
    liouvillian_eigenvalues: np.ndarray
    split_eigenvalues: np.ndarray
    max_deviation: float
    tol: float

    @property
    def coincide(self) -> bool:
        return self.max_deviation < self.tol


def match_multisets(a, b) -> float:
    """Largest distance under the optimal one-to-one pairing of ``a`` and ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return float("inf")
    cost = np.abs(a[:, None] - b[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].max()) if len(a) else 0.0


def coincidence_check(model: LindbladModel, tol: float = DEGENERACY_TOL) -> CoincidenceReport:
    """Compare the spectrum of the full vectorized Liouvillian with that of
    ``H_R (x) 1 + 1 (x) H_L`` (jump terms dropped)."""
    if not model.is_xxz:
        raise NotApplicableError("coincidence check needs Jx == Jy")
    full = np.linalg.eigvals(dense_liouvillian(model))
    e_r = np.linalg.eigvals(effective_hamiltonian(model))
    split = (e_r[:, None] + e_r.conj()[None, :]).ravel()
    return CoincidenceReport(full, split, match_multisets(full, split), tol)


@dataclass
class _Sector:
    energies: np.ndarray
    right: np.ndarray  # columns embedded in the full 2**N space
    left: np.ndarray  # rows of the inverse: <bar{m,j}|


def _sectors(model: LindbladModel) -> list[_Sector]:
    h_nh = effective_hamiltonian(model)
    mag = magnon_number(model.n_sites)
    dim = h_nh.shape[0]
    out = []
    for m in range(model.n_sites + 1):
        sel = np.flatnonzero(mag == m)
        block = h_nh[np.ix_(sel, sel)]
        e, v = np.linalg.eig(block)
        order = np.lexsort((e.real, e.imag))
        e, v = e[order], v[:, order]
        w = np.linalg.inv(v)
        right = np.zeros((dim, len(sel)), dtype=complex)
        right[sel] = v
        left = np.zeros((len(sel), dim), dtype=complex)
        left[:, sel] = w
        out.append(_Sector(e, right, left))
    return out


def construct_eigenstate(model: LindbladModel, m: int, j: int, n: int, k: int, tol: float = 1e-12) -> tuple[complex, np.ndarray]:
    """Eigenvector of the full Liouvillian grown from ``|m,j> (x) |n,k*>``.

    ``|m,j>`` are the eigenvectors of ``H_R`` with ``m`` up spins (index ``j``
    in the sector's canonical order).  Jump-induced corrections to lower
    magnon numbers are added level by level; a vanishing denominator means
    the model sits at an exceptional point.  Returns ``(eigenvalue, vector)``
    with the vector normalized and its largest component real positive.
    """
    if not model.is_xxz:
        raise NotApplicableError("eigenstate construction needs a U(1)-symmetric model (Jx == Jy)")
    sectors = _sectors(model)
    if not (0 <= m < len(sectors) and 0 <= n < len(sectors)):
        raise ValueError("magnon numbers out of range")
    if not (0 <= j < len(sectors[m].energies) and 0 <= k < len(sectors[n].energies)):
        raise ValueError("sector index out of range")
    jumps = jump_operators(model)
    lam = sectors[m].energies[j] + np.conj(sectors[n].energies[k])

    def lmat(level):
        # l[mu, j, j'] = <bar{level-1, j'}| L_mu |level, j>
        lo, hi = sectors[level - 1], sectors[level]
        return np.stack([lo.left @ L @ hi.right for L in jumps]).transpose(0, 2, 1)

    coeffs = np.zeros((len(sectors[m].energies), len(sectors[n].energies)), dtype=complex)
    coeffs[j, k] = 1.0
    vec = np.kron(sectors[m].right[:, j], sectors[n].right[:, k].conj())
    for r in range(1, min(m, n) + 1):
        lm, ln = lmat(m - r + 1), lmat(n - r + 1)
        src = 2 * np.einsum("ab,uac,ubd->cd", coeffs, lm, ln.conj())
        lo_m, lo_n = sectors[m - r].energies, sectors[n - r].energies
        den = lam - (lo_m[:, None] + lo_n.conj()[None, :])
        hit = (np.abs(den) < tol * max(1.0, abs(lam))) & (np.abs(src) > tol)
        if np.any(hit):
            raise ExceptionalPointError(f"vanishing denominator at correction level {r}")
        coeffs = np.where(np.abs(den) < tol * max(1.0, abs(lam)), 0, src / np.where(den == 0, 1, den))
        vec = vec + np.einsum("ab,ia,jb->ij", coeffs, sectors[m - r].right, sectors[n - r].right.conj()).ravel()
    vec = _fix_phase(vec[:, None])[:, 0]
    return complex(lam), vec
