"""Lattices, the dissipative XYZ model and its bi-base vectorization.

A density matrix on N spins is stored as a vector on a doubled lattice of
2N spins: sites ``0..N-1`` carry the ket (right) index and sites ``N..2N-1``
the bra (left) index.  Spin values are +1 (up) and -1 (down), and a
configuration maps to a dense index with site 0 as the most significant bit
and "up" as bit 0, so that ``rho.reshape(-1)`` (row-major) is the vector.

The Liouvillian becomes an ordinary non-Hermitian operator on that lattice.
Every term it contains is either diagonal or flips exactly two bi-base
spins, which is what makes ``connections`` cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import InvalidLatticeError, InvalidModelError

# operator kinds of a LocalTerm
Z = "Z"
ZZ = "ZZ"
FLIP_FLOP = "flip-flop"
PAIR_RAISE = "pair-raise"
PAIR_LOWER = "pair-lower"
IDENTITY = "identity"
OFF_DIAGONAL_KINDS = (FLIP_FLOP, PAIR_RAISE, PAIR_LOWER)


@dataclass(frozen=True)
class Lattice:
    """Sites plus a list of ordered nearest-neighbour bonds.

    The periodic two-site chain keeps both (0, 1) and (1, 0), and the
    periodic square lattice with an extent of 2 keeps both wrap directions.
    The Hamiltonian sums over this bond list as given, so those bonds are
    counted twice on purpose.
    """

    n_sites: int
    bonds: tuple[tuple[int, int], ...]
    geometry: str = "chain"
    periodic: bool = True
    extents: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_sites < 1:
            raise InvalidLatticeError("lattice needs at least one site")
        seen = set()
        for j, k in self.bonds:
            if not (0 <= j < self.n_sites and 0 <= k < self.n_sites) or j == k:
                raise InvalidLatticeError(f"bond {(j, k)} is not valid for {self.n_sites} sites")
            if (j, k) in seen:
                raise InvalidLatticeError(f"duplicate bond {(j, k)}")
            seen.add((j, k))

    def relabel(self, perm) -> "Lattice":
        """Same graph with site ``j`` renamed to ``perm[j]``."""
        perm = [int(p) for p in perm]
        if sorted(perm) != list(range(self.n_sites)):
            raise InvalidLatticeError("relabeling must be a permutation of the sites")
        bonds = tuple((perm[j], perm[k]) for j, k in self.bonds)
        return Lattice(self.n_sites, bonds, self.geometry, self.periodic, self.extents)


def build_chain(n_sites: int, periodic: bool = True) -> Lattice:
    if n_sites < 2:
        raise InvalidLatticeError(f"a chain needs at least 2 sites, got {n_sites}")
    bonds = [(j, j + 1) for j in range(n_sites - 1)]
    if periodic:
        bonds.append((n_sites - 1, 0))
    return Lattice(n_sites, tuple(bonds), "chain", periodic, (n_sites,))


def build_square(lx: int, ly: int, periodic: bool = True) -> Lattice:
    """Row-major ``lx`` by ``ly`` square lattice, site index ``y * lx + x``."""
    if lx < 2 or ly < 2:
        raise InvalidLatticeError(f"square lattice extents must be >= 2, got {lx}x{ly}")

    def site(x, y):
        return y * lx + x

    bonds = []
    for y in range(ly):
        for x in range(lx):
            if x + 1 < lx:
                bonds.append((site(x, y), site(x + 1, y)))
            elif periodic:
                bonds.append((site(x, y), site(0, y)))
    for y in range(ly):
        for x in range(lx):
            if y + 1 < ly:
                bonds.append((site(x, y), site(x, y + 1)))
            elif periodic:
                bonds.append((site(x, y), site(x, 0)))
    return Lattice(lx * ly, tuple(bonds), "square", periodic, (lx, ly))


@dataclass(frozen=True)
class LindbladModel:
    """Dissipative XYZ model with one ``S^-`` jump channel per site.

    Master equation::

        drho/dt = -i[H, rho] + gamma/2 sum_j (2 S-_j rho S+_j - {S+_j S-_j, rho})
        H = sum_<jk> Jx Sx_j Sx_k + Jy Sy_j Sy_k + Jz Sz_j Sz_k

    with ``S = sigma / 2``.  In the generic ``sum_mu (2 L rho L^+ - ...)``
    form the jump operators are ``L_j = sqrt(gamma / 2) S-_j``.
    """

    lattice: Lattice
    jx: float
    jy: float
    jz: float
    gamma: float

    def __post_init__(self):
        if not self.gamma >= 0:
            raise InvalidModelError(f"dissipation rate must be >= 0, got {self.gamma}")

    @property
    def n_sites(self) -> int:
        return self.lattice.n_sites

    @property
    def is_xxz(self) -> bool:
        return self.jx == self.jy

    @property
    def jump_rate(self) -> float:
        """Prefactor squared of the jump operator in the generic convention."""
        return self.gamma / 2


def build_xyz_model(lattice: Lattice, jx: float, jy: float, jz: float, gamma: float) -> LindbladModel:
    return LindbladModel(lattice, float(jx), float(jy), float(jz), float(gamma))


# ---------------------------------------------------------------------------
# bi-base configurations


def validate_config(x, n_sites: int) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (2 * n_sites,):
        raise ValueError(f"bi-base configuration must have length {2 * n_sites}, got shape {x.shape}")
    if not np.all((x == 1) | (x == -1)):
        raise ValueError("bi-base configuration entries must be +1 or -1")
    return x.astype(np.int8)


def config_to_index(x) -> int | np.ndarray:
    """Dense index of one configuration (1-D) or a batch (2-D, one per row)."""
    x = np.asarray(x)
    bits = (1 - x.astype(np.int64)) // 2
    weights = 1 << np.arange(x.shape[-1] - 1, -1, -1, dtype=np.int64)
    idx = bits @ weights
    return int(idx) if x.ndim == 1 else idx


def index_to_config(index, n_spins: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    shifts = np.arange(n_spins - 1, -1, -1, dtype=np.int64)
    bits = (index[..., None] >> shifts) & 1
    return (1 - 2 * bits).astype(np.int8)


def all_configs(n_spins: int) -> np.ndarray:
    """All ``2**n_spins`` configurations, ordered by dense index."""
    return index_to_config(np.arange(2**n_spins), n_spins)


def all_down(n_sites: int) -> np.ndarray:
    return -np.ones(2 * n_sites, dtype=np.int8)


def is_diagonal(x, n_sites: int) -> np.ndarray | bool:
    """True where the right half equals the left half."""
    x = np.asarray(x)
    return np.all(x[..., :n_sites] == x[..., n_sites:], axis=-1)


# ---------------------------------------------------------------------------
# vectorized Liouvillian


@dataclass(frozen=True)
class LocalTerm:
    coefficient: complex
    sites: tuple[int, ...]
    kind: str


@dataclass(frozen=True)
class PairFlip:
    """All off-diagonal terms acting on one unordered bi-base site pair.

    Row convention: ``<x|L|x'>`` with ``x'`` equal to ``x`` with both sites
    flipped is ``flip_flop`` if the two spins of ``x`` differ, ``raise_`` if
    both are up (the ``S+S+`` term lowers ``x'`` into ``x``), ``lower`` if
    both are down.
    """

    s: int
    t: int
    flip_flop: complex
    raise_: complex
    lower: complex

    def amplitude(self, xs, xt, transpose=False):
        xs = np.asarray(xs)
        xt = np.asarray(xt)
        up, down = (self.lower, self.raise_) if transpose else (self.raise_, self.lower)
        return np.where(
            xs != xt,
            self.flip_flop,
            np.where(xs > 0, up, down),
        )


@dataclass(frozen=True)
class VectorizedLiouvillian:
    """``L = -i H (x) 1 + i 1 (x) H^T + sum_mu (2 L (x) L* - L^+L (x) 1 - 1 (x) L^T L*)``
    stored as local terms on the 2N-site bi-base lattice."""

    n_sites: int
    terms: tuple[LocalTerm, ...]
    z_coeffs: np.ndarray = field(repr=False, compare=False)
    zz_pairs: tuple[tuple[int, int, complex], ...] = field(repr=False, compare=False)
    constant: complex = field(repr=False, compare=False)
    pairs: tuple[PairFlip, ...] = field(repr=False, compare=False)

    @classmethod
    def from_terms(cls, n_sites: int, terms) -> "VectorizedLiouvillian":
        terms = tuple(terms)
        z = np.zeros(2 * n_sites, dtype=complex)
        zz: dict[tuple[int, int], complex] = {}
        const = 0j
        flips: dict[tuple[int, int], list[complex]] = {}
        for term in terms:
            if term.kind == IDENTITY:
                const += term.coefficient
            elif term.kind == Z:
                z[term.sites[0]] += term.coefficient
            elif term.kind == ZZ:
                key = tuple(sorted(term.sites))
                zz[key] = zz.get(key, 0j) + term.coefficient
            elif term.kind in OFF_DIAGONAL_KINDS:
                key = tuple(sorted(term.sites))
                slot = flips.setdefault(key, [0j, 0j, 0j])
                slot[OFF_DIAGONAL_KINDS.index(term.kind)] += term.coefficient
            else:
                raise ValueError(f"unknown term kind {term.kind!r}")
        pairs = tuple(
            PairFlip(s, t, *coeffs)
            for (s, t), coeffs in sorted(flips.items())
            if any(c != 0 for c in coeffs)
        )
        zz_pairs = tuple((s, t, c) for (s, t), c in sorted(zz.items()) if c != 0)
        return cls(n_sites, terms, z, zz_pairs, const, pairs)

    @property
    def n_spins(self) -> int:
        return 2 * self.n_sites

    @property
    def dim(self) -> int:
        return 4**self.n_sites

    def diagonal(self, x) -> np.ndarray | complex:
        """``<x|L|x>`` for one configuration or a batch of rows."""
        x = np.asarray(x, dtype=float)
        val = self.constant + (x @ self.z_coeffs) / 2
        for s, t, c in self.zz_pairs:
            val = val + c * x[..., s] * x[..., t] / 4
        return val

    def flips(self, x, transpose=False) -> Iterator[tuple[int, int, np.ndarray]]:
        """Yield ``(s, t, amplitude)`` for every pair flip, batched over rows of ``x``."""
        x = np.asarray(x)
        for p in self.pairs:
            yield p.s, p.t, p.amplitude(x[..., p.s], x[..., p.t], transpose)

    def connections(self, x, transpose=False) -> list[tuple[np.ndarray, complex]]:
        """Configurations ``x'`` with ``<x|L|x'> != 0`` and their amplitudes.

        ``transpose=True`` returns the column instead, i.e. ``L|x>`` as a list
        of ``(x', <x'|L|x>)``.  The diagonal entry comes first when nonzero.
        """
        x = validate_config(x, self.n_sites)
        out = []
        d = complex(self.diagonal(x))
        if d != 0:
            out.append((x.copy(), d))
        for s, t, amp in self.flips(x, transpose):
            amp = complex(amp)
            if amp != 0:
                y = x.copy()
                y[s] = -y[s]
                y[t] = -y[t]
                out.append((y, amp))
        return out

    def to_dense(self) -> np.ndarray:
        """Dense matrix assembled row by row from ``connections``."""
        configs = all_configs(self.n_spins)
        mat = np.zeros((self.dim, self.dim), dtype=complex)
        rows = np.arange(self.dim)
        mat[rows, rows] = self.diagonal(configs)
        for s, t, amp in self.flips(configs):
            flipped = configs.copy()
            flipped[:, s] *= -1
            flipped[:, t] *= -1
            cols = config_to_index(flipped)
            mat[rows, cols] += amp
        return mat


def vectorize(model: LindbladModel) -> VectorizedLiouvillian:
    """Map the model's Liouvillian to local terms on the bi-base lattice.

    For ``Jx == Jy`` the terms reproduce::

        -i sum_<ij> [Jz (Sz_iR Sz_jR - Sz_iL Sz_jL)
                     + J/2 (S+_iR S-_jR + S-_iR S+_jR - S+_iL S-_jL - S-_iL S+_jL)]
        + gamma/2 sum_i (2 S-_iR S-_iL - Sz_iR - Sz_iL - 1)
    """
    n = model.n_sites
    terms = []
    ff = (model.jx + model.jy) / 4
    pp = (model.jx - model.jy) / 4
    # H is real symmetric, so H^T on the left half has the same form as H
    for half, sign in ((0, -1j), (n, 1j)):
        for j, k in model.lattice.bonds:
            s, t = j + half, k + half
            if model.jz:
                terms.append(LocalTerm(sign * model.jz, (s, t), ZZ))
            if ff:
                terms.append(LocalTerm(sign * ff, (s, t), FLIP_FLOP))
            if pp:
                terms.append(LocalTerm(sign * pp, (s, t), PAIR_RAISE))
                terms.append(LocalTerm(sign * pp, (s, t), PAIR_LOWER))
    g = model.gamma
    if g:
        for j in range(n):
            terms.append(LocalTerm(complex(g), (j, j + n), PAIR_LOWER))
            terms.append(LocalTerm(complex(-g / 2), (j,), Z))
            terms.append(LocalTerm(complex(-g / 2), (j + n,), Z))
            terms.append(LocalTerm(complex(-g / 2), (), IDENTITY))
    return VectorizedLiouvillian.from_terms(n, terms)
