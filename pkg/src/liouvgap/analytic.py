"""Closed-form and semi-analytic oracles for the dissipative XXZ/XYZ chain.

Energies follow ``E({k}) = -gamma m / 2 -/+ i sum_j (2 J cos k_j - J_z)``
where the minus branch belongs to the right system ``H_R`` and the plus
branch to the left system ``H_L``.  ``J`` is the flip-flop amplitude of
``J (S+S- + S-S+)``, so a model with ``Jx = Jy`` has ``J = Jx / 2``.

The reference (all-down) state of ``H_R`` has eigenvalue ``E_g = -i J_z N / 4``.
``bethe_energy`` leaves it out by default; pass ``include_offset=True`` to
compare against the spectrum of ``H_R`` itself.  In sums ``E_R + E_L`` the
offset cancels, so Liouvillian eigenvalues never carry it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

RIGHT = "right"
LEFT = "left"
BRANCHES = (RIGHT, LEFT)

UNIQUE = "unique-gapped"
DEGENERATE = "degenerate"

DEDUP_TOL = 1e-7
RESIDUAL_TOL = 1e-10
STRING_OFFSETS = (0.2, 0.5, 1.0)


def xxz_gap(gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return gamma / 2


def magnon_real_part(m: int, gamma: float, n_sites: int | None = None) -> float:
    """``-gamma m / 2``; ``m`` counts flipped spins on the 2N-site bi-base lattice."""
    if m < 0 or (n_sites is not None and m > 2 * n_sites):
        raise ValueError(f"magnon number {m} outside 0..2N")
    return -gamma * m / 2


def reference_offset(n_sites: int, jz: float) -> complex:
    """``E_g`` of the all-down reference state of ``H_R``."""
    return -1j * jz * n_sites / 4


def bethe_energy(roots, m: int, j: float, jz: float, gamma: float, branch: str = RIGHT, include_offset: bool = False, n_sites: int | None = None) -> complex:
    roots = np.asarray(roots, dtype=complex).ravel()
    if len(roots) != m:
        raise ValueError(f"expected {m} quasi-momenta, got {len(roots)}")
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}")
    sign = -1 if branch == RIGHT else 1
    e = -gamma * m / 2 + sign * 1j * complex(np.sum(2 * j * np.cos(roots) - jz))
    if include_offset:
        if n_sites is None:
            raise ValueError("n_sites is needed for the reference offset")
        off = reference_offset(n_sites, jz)
        e += off if branch == RIGHT else np.conj(off)
    return e


def solve_bethe_m1(n_sites: int) -> np.ndarray:
    if n_sites < 2:
        raise ValueError("need N >= 2")
    return 2 * np.pi * np.arange(n_sites) / n_sites


# ---------------------------------------------------------------------------
# two magnons


@dataclass
class BetheSolution:
    m: int
    momenta: np.ndarray
    energy: complex  # right branch, E_g excluded
    residual: float
    n_sites: int
    jz: float
    branch: str = RIGHT

    @property
    def energy_with_offset(self) -> complex:
        return self.energy + reference_offset(self.n_sites, self.jz)

    def energy_on(self, branch: str, gamma: float, j: float) -> complex:
        return bethe_energy(self.momenta, self.m, j, self.jz, gamma, branch)


@dataclass
class BetheReport:
    solutions: list[BetheSolution]
    expected: int
    missing: int = field(init=False)

    def __post_init__(self):
        self.missing = max(0, self.expected - len(self.solutions))

    @property
    def complete(self) -> bool:
        return self.missing == 0


def _m2_residual(u, n, j, jz):
    """Bethe equations with cleared denominators in ``u_j = exp(i k_j)``."""
    u1, u2 = u
    s = j * (u1 * u2 + 1)
    d1 = s - jz * u2
    d2 = s - jz * u1
    return np.array([u1**n * d1 + d2, u2**n * d2 + d1])


def _m2_jacobian(u, n, j, jz):
    u1, u2 = u
    s = j * (u1 * u2 + 1)
    d1 = s - jz * u2
    d2 = s - jz * u1
    # partials of d1, d2
    d1_1, d1_2 = j * u2, j * u1 - jz
    d2_1, d2_2 = j * u2 - jz, j * u1
    return np.array(
        [
            [n * u1 ** (n - 1) * d1 + u1**n * d1_1 + d2_1, u1**n * d1_2 + d2_2],
            [u2**n * d2_1 + d1_1, n * u2 ** (n - 1) * d2 + u2**n * d2_2 + d1_2],
        ]
    )


def _newton(u, n, j, jz, max_iter=200, tol=1e-13):
    f = _m2_residual(u, n, j, jz)
    norm = np.linalg.norm(f)
    for _ in range(max_iter):
        if norm < tol:
            break
        try:
            step = np.linalg.solve(_m2_jacobian(u, n, j, jz), -f)
        except np.linalg.LinAlgError:
            return None
        t = 1.0
        while t > 1e-6:
            trial = u + t * step
            ft = _m2_residual(trial, n, j, jz)
            if np.linalg.norm(ft) < norm:
                break
            t /= 2
        else:
            return None
        u, f, norm = trial, ft, np.linalg.norm(ft)
        if not np.all(np.isfinite(u)) or np.any(np.abs(u) < 1e-8):
            return None
    return u if norm < 1e-10 else None


def two_magnon_state(momenta, n_sites: int) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Bethe wavefunction on pairs ``j1 < j2`` with ``c1 / c2 = exp(i k1 N)``.

    For coincident momenta the two plane waves merge and the symmetric
    limit ``exp(i k (j1 + j2))`` is returned instead.
    """
    k1, k2 = np.asarray(momenta, dtype=complex)
    pairs = list(itertools.combinations(range(n_sites), 2))
    if abs(k1 - k2) < DEDUP_TOL:
        return pairs, np.array([np.exp(1j * k1 * (a + b)) for a, b in pairs])
    c1 = np.exp(1j * k1 * n_sites)
    amp = np.array([c1 * np.exp(1j * (k1 * a + k2 * b)) + np.exp(1j * (k1 * b + k2 * a)) for a, b in pairs])
    return pairs, amp


def _two_magnon_hamiltonian(n_sites, j, jz):
    """Hermitian XXZ ring ``J(S+S- + S-S+) + J_z SzSz`` on the two-magnon sector."""
    pairs = list(itertools.combinations(range(n_sites), 2))
    index = {p: i for i, p in enumerate(pairs)}
    h = np.zeros((len(pairs), len(pairs)))
    bonds = [(s, (s + 1) % n_sites) for s in range(n_sites)]
    for i, (a, b) in enumerate(pairs):
        up = {a, b}
        for s, t in bonds:
            if (s in up) == (t in up):
                h[i, i] += jz / 4
            else:
                h[i, i] -= jz / 4
                src, dst = (s, t) if s in up else (t, s)
                moved = tuple(sorted((up - {src}) | {dst}))
                h[index[moved], i] += j
    return h


def _canonical(k):
    k = np.asarray(k, dtype=complex)
    re = np.mod(k.real, 2 * np.pi)
    re[np.isclose(re, 2 * np.pi, atol=DEDUP_TOL)] = 0.0
    k = re + 1j * k.imag
    return k[np.lexsort((k.imag, k.real))]


def solve_bethe_m2(n_sites: int, j: float, jz: float) -> BetheReport:
    """Two-magnon roots by multi-start damped Newton.

    Roots are kept only when the Bethe wavefunction built from them is a
    nonzero eigenvector of the two-magnon Hamiltonian, which drops the
    spurious solutions introduced by clearing denominators.  ``missing``
    counts the states of the ``C(N, 2)``-dimensional sector left unresolved.
    """
    if n_sites < 3:
        raise ValueError("need N >= 3")
    n = n_sites
    # free-magnon momenta plus the half-step grid between them
    free = np.pi * np.arange(2 * n) / n
    seeds = [(a, b) for a, b in itertools.combinations_with_replacement(free, 2)]
    seeds += [(a + 1e-3, b - 1e-3) for a, b in seeds if a == b]
    for big_k in 2 * np.pi * np.arange(n) / n:
        for v in STRING_OFFSETS:
            seeds.append((big_k / 2 + 1j * v, big_k / 2 - 1j * v))
            seeds.append((big_k / 2 + np.pi + 1j * v, big_k / 2 + np.pi - 1j * v))
    h = _two_magnon_hamiltonian(n, j, jz)
    found: list[BetheSolution] = []
    vecs: list[np.ndarray] = []
    for seed in seeds:
        u = _newton(np.exp(1j * np.asarray(seed, dtype=complex)), n, j, jz)
        if u is None:
            continue
        k = _canonical(-1j * np.log(u))
        if any(np.allclose(k, s.momenta, atol=DEDUP_TOL) for s in found):
            continue
        _, psi = two_magnon_state(k, n)
        norm = np.linalg.norm(psi)
        if norm < 1e-6:
            continue
        eps = complex(np.sum(2 * j * np.cos(k) - jz) + jz * n / 4)
        if np.linalg.norm(h @ psi - eps * psi) > 1e-8 * norm:
            continue
        # distinct roots can describe the same state
        psi = psi / norm
        if any(abs(np.vdot(w, psi)) > 1 - 1e-8 for w in vecs):
            continue
        vecs.append(psi)
        res = float(np.max(np.abs(_m2_residual(np.exp(1j * k), n, j, jz))))
        found.append(BetheSolution(2, k, bethe_energy(k, 2, j, jz, 0.0), res, n, jz))
    found.sort(key=lambda s: (round(s.momenta[0].real, 9), round(s.momenta[0].imag, 9), round(s.momenta[1].real, 9), round(s.momenta[1].imag, 9)))
    return BetheReport(found, math.comb(n, 2))


def right_energies(n_sites: int, j: float, jz: float, gamma: float, max_magnons: int = 2) -> dict[int, np.ndarray]:
    """Bethe energies of ``H_R`` (``E_g`` excluded) per magnon number up to 2."""
    if max_magnons > 2:
        raise ValueError("only m <= 2 is solved")
    out = {0: np.array([0j])}
    if max_magnons >= 1:
        out[1] = np.array([bethe_energy([k], 1, j, jz, gamma) for k in solve_bethe_m1(n_sites)])
    if max_magnons >= 2:
        rep = solve_bethe_m2(n_sites, j, jz)
        out[2] = np.array([bethe_energy(s.momenta, 2, j, jz, gamma) for s in rep.solutions])
    return out


def liouvillian_energies(n_sites: int, j: float, jz: float, gamma: float, max_magnons: int = 2) -> np.ndarray:
    """Sums ``E_R + conj(E_R')`` with at most ``max_magnons`` magnons in total."""
    right = right_energies(n_sites, j, jz, gamma, max_magnons)
    out = []
    for mr, ml in itertools.product(right, repeat=2):
        if mr + ml <= max_magnons:
            out.extend((right[mr][:, None] + np.conj(right[ml])[None, :]).ravel())
    return np.array(out)


# ---------------------------------------------------------------------------
# mean field


@dataclass
class MeanFieldResult:
    sx: float
    sy: float
    sz: float
    phase: str
    discriminant: float  # 4 (Jy - Jz)(Jz - Jx) - gamma^2


def meanfield_rates(s, jx, jy, jz, gamma) -> np.ndarray:
    """Time derivatives of ``(<Sx>, <Sy>, <Sz>)`` for a product state."""
    sx, sy, sz = s
    return np.array(
        [
            2 * (jy - jz) * sy * sz - gamma / 2 * sx,
            2 * (jz - jx) * sz * sx - gamma / 2 * sy,
            2 * (jx - jy) * sx * sy - gamma * (sz + 0.5),
        ]
    )


def meanfield_steady_state(jx: float, jy: float, jz: float, gamma: float) -> MeanFieldResult:
    """Fixed point of the averaged spin equations.

    In the degenerate phase the two fixed points related by parity
    ``(Sx, Sy) -> (-Sx, -Sy)`` are equivalent; the one with ``Sy >= 0`` is returned.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    a, b = jy - jz, jz - jx
    disc = 4 * a * b - gamma**2
    if not disc > 0:
        return MeanFieldResult(0.0, 0.0, -0.5, UNIQUE, disc)
    root = math.sqrt(a * b)
    sz = -gamma / (4 * root)
    ratio = 4 * a * sz / gamma  # sx / sy
    sy = math.sqrt(gamma * (sz + 0.5) / (2 * (jx - jy) * ratio))
    return MeanFieldResult(ratio * sy, sy, sz, DEGENERATE, disc)
