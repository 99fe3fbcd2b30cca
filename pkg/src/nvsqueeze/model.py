"""Coupling graphs and Hamiltonian descriptions shared by both engines.

All Hamiltonians are built from three ingredients:

* XXZ exchange ``-sum_{i<j} W_ij (sx sx + sy sy - sz sz)``; every unordered
  pair is counted once, so an isolated pair with coupling J oscillates as
  ``cos(J t)``;
* one-axis twisting ``chi * Sz^2``;
* a uniform transverse field ``h_x * Sx``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .constants import J0 as DEFAULT_J0
from .errors import InvalidGeometryError

# XXZ anisotropy (x, y, z) of the exchange term, including the leading minus sign.
XXZ_SIGNS = np.array([-1.0, -1.0, 1.0])


@dataclass(frozen=True, eq=False)
class CouplingGraph:
    """Dense dipolar coupling matrix over the active spins of an ensemble."""

    J: np.ndarray
    J0: float = DEFAULT_J0
    indices: np.ndarray = None
    positions: np.ndarray = None

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        if J.ndim != 2 or J.shape[0] != J.shape[1]:
            raise ValueError("coupling matrix must be square")
        J.flags.writeable = False
        object.__setattr__(self, "J", J)
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(J)))

    @property
    def n(self) -> int:
        return len(self.J)

    @property
    def J_i(self) -> np.ndarray:
        """Mean-field coupling of each spin, ``sum_j J_ij``."""
        return self.J.sum(axis=1)

    @classmethod
    def from_positions(cls, positions, J0=DEFAULT_J0, indices=None) -> CouplingGraph:
        pos = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = len(pos)
        if n == 0:
            raise ValueError("need at least one spin")
        if n == 1:
            return cls(np.zeros((1, 1)), J0, indices, pos)
        d = pdist(pos)
        if np.any(d == 0):
            raise InvalidGeometryError("coincident spin positions")
        J = squareform(J0 / d**3)
        return cls(J, J0, indices, pos)

    def submatrix(self, keep) -> CouplingGraph:
        keep = np.asarray(keep)
        pos = None if self.positions is None else self.positions[keep]
        return CouplingGraph(self.J[np.ix_(keep, keep)], self.J0, self.indices[keep], pos)


def build_coupling(ensemble, J0=DEFAULT_J0) -> CouplingGraph:
    """Coupling graph ``J_ij = J0 / r_ij^3`` over the active spins (3D distances)."""
    idx = np.flatnonzero(ensemble.active)
    if len(idx) == 0:
        raise ValueError("ensemble has no active spins")
    return CouplingGraph.from_positions(ensemble.positions[idx], J0, idx)


@dataclass(frozen=True)
class CouplingHistogram:
    centers: np.ndarray
    edges: np.ndarray
    probability: np.ndarray  # density, integrates to 1 over the bins
    mean: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["J_bin_center", "probability"])
        for c, p in zip(self.centers, self.probability):
            w.writerow([repr(float(c)), repr(float(p))])
        return buf.getvalue()


def coupling_distribution(graphs, bins=50, range=None) -> CouplingHistogram:
    """Normalized histogram of the mean-field couplings ``J_i``.

    ``graphs`` may be one graph or an iterable of graphs (disorder average).
    The reported mean is the exact sample mean of ``J_i``, not the binned one.
    """
    if isinstance(graphs, CouplingGraph):
        graphs = [graphs]
    Ji = np.concatenate([g.J_i for g in graphs])
    if Ji.size == 0:
        raise ValueError("empty coupling graph")
    lo, hi = (Ji.min(), Ji.max()) if range is None else range
    if hi <= lo:
        width = max(abs(lo), 1.0) * 1e-6
        edges = np.array([lo - width, lo + width])
    else:
        edges = np.histogram_bin_edges(Ji, bins=bins, range=(lo, hi))
    prob, edges = np.histogram(Ji, bins=edges, density=True)
    centers = 0.5 * (edges[1:] + edges[:-1])
    return CouplingHistogram(centers, edges, prob, float(Ji.mean()))


def mean_field_chi(graph: CouplingGraph) -> float:
    """Effective twisting strength ``chi = (2/N) sum_{i<j} J_ij = mean(J_i)``.

    Normalized so that, from a coherent state along +x, the early-time
    correlator obeys ``<SySz>(t)/<Sz^2> = chi t`` and a state tipped to
    ``<Sz> = (N/2) sin(phi)`` precesses as ``Sy/Sx = chi t sin(phi)``.  With
    the XXZ sign above (antiferro Ising part), chi > 0 and the precession
    angle follows the sign of <Sz>.  For an isolated pair chi equals the pair
    coupling, matching the dimer result ``Sy/Sx = -sin(phi_o) tan(J t)`` for a
    tip of +phi_o about y (which gives <Sz> < 0).
    """
    if graph.n < 2:
        raise ValueError("mean-field chi needs at least two active spins")
    return float(graph.J.sum() / graph.n)


# ---------------------------------------------------------------- Hamiltonians


@dataclass(frozen=True)
class XXZ:
    graph: CouplingGraph


@dataclass(frozen=True)
class OAT:
    chi: float
    n: int


@dataclass(frozen=True)
class Dimer:
    J: float


@dataclass(frozen=True)
class TransverseField:
    h_x: float
    n: int


_KINDS = (XXZ, OAT, Dimer, TransverseField)


@dataclass(frozen=True)
class HamiltonianSpec:
    """Weighted sum of Hamiltonian terms acting on the same set of spins."""

    terms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        terms = []
        for item in self.terms:
            w, term = (1.0, item) if isinstance(item, _KINDS) else item
            if not isinstance(term, _KINDS):
                raise TypeError(f"unsupported Hamiltonian term {term!r}")
            terms.append((float(w), term))
        object.__setattr__(self, "terms", tuple(terms))
        sizes = {self._term_size(t) for _, t in self.terms}
        if len(sizes) > 1:
            raise ValueError(f"terms act on different spin counts: {sorted(sizes)}")

    @staticmethod
    def _term_size(term) -> int:
        if isinstance(term, XXZ):
            return term.graph.n
        if isinstance(term, Dimer):
            return 2
        return term.n

    @classmethod
    def xxz(cls, graph, h_x=0.0) -> HamiltonianSpec:
        terms = [XXZ(graph)]
        if h_x:
            terms.append(TransverseField(h_x, graph.n))
        return cls(tuple(terms))

    @classmethod
    def oat(cls, chi, n) -> HamiltonianSpec:
        return cls((OAT(chi, n),))

    def __add__(self, other):
        return HamiltonianSpec(self.terms + other.terms)

    @property
    def n(self) -> int:
        if not self.terms:
            raise ValueError("empty Hamiltonian")
        return self._term_size(self.terms[0][1])

    def exchange_matrix(self) -> np.ndarray:
        """Total pair coupling ``W_ij`` of the XXZ part (symmetric, zero diagonal)."""
        W = np.zeros((self.n, self.n))
        for w, t in self.terms:
            if isinstance(t, XXZ):
                W += w * t.graph.J
            elif isinstance(t, Dimer):
                W += w * np.array([[0.0, t.J], [t.J, 0.0]])
        return W

    def twisting(self) -> float:
        return sum(w * t.chi for w, t in self.terms if isinstance(t, OAT))

    def field(self) -> float:
        return sum(w * t.h_x for w, t in self.terms if isinstance(t, TransverseField))

    def with_field(self, h_x) -> HamiltonianSpec:
        kept = tuple((w, t) for w, t in self.terms if not isinstance(t, TransverseField))
        if h_x:
            kept = kept + ((1.0, TransverseField(h_x, self.n)),)
        return HamiltonianSpec(kept)

    def is_sz_conserving(self) -> bool:
        return self.field() == 0.0

    def dense(self) -> np.ndarray:
        """Dense matrix via Kronecker products (N <= 10; used as an oracle)."""
        n = self.n
        if n > 10:
            raise ValueError("dense matrices are limited to N <= 10")
        ops = single_site_operators(n)
        H = np.zeros((2**n, 2**n), dtype=complex)
        W = self.exchange_matrix()
        for i in range(n):
            for j in range(i + 1, n):
                if W[i, j]:
                    for a in range(3):
                        H += XXZ_SIGNS[a] * W[i, j] * ops[a][i] @ ops[a][j]
        chi = self.twisting()
        if chi:
            Sz = sum(ops[2])
            H += chi * Sz @ Sz
        hx = self.field()
        if hx:
            H += hx * sum(ops[0])
        return H


_PAULI = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def single_site_operators(n):
    """``ops[a][i]`` = spin-1/2 component a on site i as a dense 2^n matrix.

    Site 0 is the most significant tensor factor; basis bit 0 is s_z = +1/2.
    """
    eye = np.eye(2, dtype=complex)
    out = []
    for a in range(3):
        row = []
        for i in range(n):
            m = np.ones((1, 1), dtype=complex)
            for k in range(n):
                m = np.kron(m, 0.5 * _PAULI[a] if k == i else eye)
            row.append(m)
        out.append(row)
    return out
