"""Cluster discrete truncated Wigner engine.

Spins are grouped into clusters of one or two (strongest couplings paired
first).  Each trajectory carries, per cluster, the expectation values of the
Pauli-product basis: ``c = (1, <sx>, <sy>, <sz>)`` in Pauli units for a
singleton and the 16 values ``<sigma_a (x) sigma_b>`` (a, b in 0,x,y,z) for a
pair, with the identity entry fixed to 1.

Couplings inside a cluster act exactly; a spin outside the cluster enters
only through its current one-body values (mean field).  The intra-cluster
part, including a uniform transverse field, is integrated exactly with an
integrating factor and the mean-field part with classical RK4 (Lawson
scheme).  Because every stage of the scheme is linear in the invariants and
the mean-field flow conserves total S_z for U(1)-symmetric couplings, total
S_z is conserved per trajectory up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import IntegrationError
from .model import XXZ_SIGNS, CouplingGraph, HamiltonianSpec
from .stats import TrajectoryStats, tree_reduce

_PAULI = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def _structure(ops):
    """``M[k, l, m] = Tr(i [P_k, P_l] P_m) / dim`` for an orthogonal operator basis."""
    d = ops[0].shape[0]
    n = len(ops)
    M = np.zeros((n, n, n))
    for k in range(n):
        for l in range(n):
            comm = 1j * (ops[k] @ ops[l] - ops[l] @ ops[k])
            for m in range(n):
                M[k, l, m] = np.trace(comm @ ops[m]).real / d
    return M


_OPS1 = list(_PAULI)
_OPS2 = [np.kron(a, b) for a in _PAULI for b in _PAULI]
# d c_l / dt = sum_k h_k sum_m M[k, l, m] c_m  for  H = sum_k h_k P_k
_M1 = _structure(_OPS1)
_M2 = _structure(_OPS2)

# one-body Pauli indices inside a pair vector: site a -> (a, 0), site b -> (0, b)
_PAIR_A = np.array([4, 8, 12])
_PAIR_B = np.array([1, 2, 3])
_PAIR_AB = np.array([[4 * (a + 1) + (b + 1) for b in range(3)] for a in range(3)])


# ------------------------------------------------------------- clustering


@dataclass(frozen=True)
class ClusterPartition:
    """Disjoint clusters (pairs first, then singletons) covering ``n`` spins."""

    pairs: tuple
    singles: tuple
    scores: tuple = ()

    def __post_init__(self):
        flat = [i for p in self.pairs for i in p] + list(self.singles)
        if len(set(flat)) != len(flat):
            raise ValueError("clusters overlap")

    @property
    def n(self) -> int:
        return 2 * len(self.pairs) + len(self.singles)

    @property
    def clusters(self) -> list:
        return [tuple(p) for p in self.pairs] + [(s,) for s in self.singles]

    def cluster_id(self) -> np.ndarray:
        cid = np.empty(self.n, dtype=int)
        for k, c in enumerate(self.clusters):
            cid[list(c)] = k
        return cid

    @classmethod
    def singletons(cls, n) -> ClusterPartition:
        return cls((), tuple(range(n)))


def build_clusters(graph, max_cluster_size=2) -> ClusterPartition:
    """Greedy matching on J_ij: pair the strongest couple among unpaired spins.

    Ties are broken by the lexicographically smallest index pair.
    ``max_cluster_size=1`` gives the plain (all-singleton) partition.
    """
    J = graph.J if isinstance(graph, CouplingGraph) else np.asarray(graph)
    n = len(J)
    if n == 0:
        raise ValueError("empty coupling graph")
    if max_cluster_size not in (1, 2):
        raise ValueError("only clusters of one or two spins are supported")
    if max_cluster_size == 1 or n == 1:
        return ClusterPartition.singletons(n)
    iu, ju = np.triu_indices(n, 1)
    w = np.abs(J[iu, ju])
    order = np.lexsort((ju, iu, -w))
    free = np.ones(n, dtype=bool)
    pairs, scores = [], []
    for k in order:
        i, j = iu[k], ju[k]
        if free[i] and free[j] and w[k] > 0:
            pairs.append((int(i), int(j)))
            scores.append(float(w[k]))
            free[i] = free[j] = False
    return ClusterPartition(tuple(pairs), tuple(int(s) for s in np.flatnonzero(free)), tuple(scores))


# ---------------------------------------------------------------- couplings


def axis_couplings(spec: HamiltonianSpec) -> np.ndarray:
    """Per-axis pair couplings ``K[a, i, j]`` with ``H = sum_{i<j,a} K_aij s_a^i s_a^j + h_x Sx``."""
    n = spec.n
    W = spec.exchange_matrix()
    K = XXZ_SIGNS[:, None, None] * W[None]
    chi = spec.twisting()
    if chi:
        # chi Sz^2 = 2 chi sum_{i<j} sz sz + const
        K[2] += 2 * chi * (1 - np.eye(n))
    return K


# ------------------------------------------------------------------- state


@dataclass
class ClusterTrajectories:
    """A batch of trajectories sharing one partition.

    ``singles``: (T, S, 4) and ``pairs``: (T, P, 16) Pauli-basis vectors.
    """

    partition: ClusterPartition
    singles: np.ndarray
    pairs: np.ndarray
    seeds: np.ndarray = field(default=None)

    @property
    def n_traj(self) -> int:
        return self.singles.shape[0]

    def copy(self) -> ClusterTrajectories:
        return ClusterTrajectories(self.partition, self.singles.copy(), self.pairs.copy(), self.seeds)

    def one_body(self) -> np.ndarray:
        """Per-trajectory spin expectation values (T, n, 3), spin units."""
        part = self.partition
        m = np.empty((self.n_traj, part.n, 3))
        if part.singles:
            m[:, list(part.singles)] = 0.5 * self.singles[..., 1:]
        if part.pairs:
            pa = np.array(part.pairs)
            m[:, pa[:, 0]] = 0.5 * self.pairs[..., _PAIR_A]
            m[:, pa[:, 1]] = 0.5 * self.pairs[..., _PAIR_B]
        return m

    def total_sz(self) -> np.ndarray:
        return self.one_body()[..., 2].sum(axis=1)

    def collective(self):
        """Per-trajectory estimators of S (T, 3) and symmetrized S_mu S_nu (T, 3, 3)."""
        m = self.one_body()
        n = m.shape[1]
        S = m.sum(axis=1)
        SS = S[:, :, None] * S[:, None, :] - np.einsum("tia,tib->tab", m, m)
        if self.partition.pairs:
            pa = np.array(self.partition.pairs)
            ma, mb = m[:, pa[:, 0]], m[:, pa[:, 1]]
            SS -= np.einsum("tpa,tpb->tab", ma, mb) + np.einsum("tpa,tpb->tab", mb, ma)
            C = self.pairs[..., _PAIR_AB].sum(axis=1)  # (T, 3, 3)
            SS += 0.25 * (C + C.transpose(0, 2, 1))
        SS += 0.25 * n * np.eye(3)
        return S, SS

    def rotate(self, axis, angle) -> ClusterTrajectories:
        """Apply the global rotation ``exp(-i angle S_axis)`` to every trajectory."""
        R = _rotation_matrix(axis, angle)
        R4 = np.eye(4)
        R4[1:, 1:] = R
        out = self.copy()
        out.singles = self.singles @ R4.T
        if self.partition.pairs:
            P = self.pairs.reshape(*self.pairs.shape[:2], 4, 4)
            out.pairs = (R4 @ P @ R4.T).reshape(self.pairs.shape)
        return out


def _rotation_matrix(axis, angle):
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


def trajectory_seeds(master_seed, start, count) -> list:
    """Per-trajectory seed sequences; trajectory k depends only on (master, k)."""
    return [np.random.SeedSequence(master_seed, spawn_key=(k,)) for k in range(start, start + count)]


def sample_phase_points(partition, n_traj, eta=1.0, axis="x", seed=0, start=0) -> ClusterTrajectories:
    """Discrete Wigner samples of a (partially) polarized product state.

    Along the polarization axis each spin carries +1/2 (or -1/2 if flipped,
    probability (1 - eta)/2); the two transverse components are +-1/2 with
    equal probability.  Pair vectors are products of the two spin vectors.
    Trajectory ``k`` draws from ``SeedSequence(seed, spawn_key=(start + k,))``.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError("polarization must lie in [0, 1]")
    sign = -1.0 if axis.startswith("-") else 1.0
    a = "xyz".index(axis.lstrip("+-"))
    trans = [b for b in range(3) if b != a]
    n = partition.n
    seqs = trajectory_seeds(seed, start, n_traj)
    vec = np.empty((n_traj, n, 3))
    for t, ss in enumerate(seqs):
        rng = np.random.default_rng(ss)
        flips = rng.random(n) < 0.5 * (1.0 - eta)
        vec[t, :, a] = np.where(flips, -sign, sign)
        vec[t, :, trans] = rng.choice([-1.0, 1.0], size=(n, 2)).T
    # Pauli units: sigma = 2 s = +-1
    singles = np.ones((n_traj, len(partition.singles), 4))
    if partition.singles:
        singles[..., 1:] = vec[:, list(partition.singles)]
    pairs = np.ones((n_traj, len(partition.pairs), 16))
    if partition.pairs:
        pa = np.array(partition.pairs)
        va = np.concatenate([np.ones((n_traj, len(pa), 1)), vec[:, pa[:, 0]]], axis=-1)
        vb = np.concatenate([np.ones((n_traj, len(pa), 1)), vec[:, pa[:, 1]]], axis=-1)
        pairs = (va[..., :, None] * vb[..., None, :]).reshape(n_traj, len(pa), 16)
    seeds = np.arange(start, start + n_traj)
    return ClusterTrajectories(partition, singles, pairs, seeds)


# ------------------------------------------------------------------ engine


class ClusterEngine:
    """Equations of motion for one partition and one static Hamiltonian."""

    def __init__(self, spec: HamiltonianSpec, partition: ClusterPartition, steps_per_radian=50.0):
        if spec.n != partition.n:
            raise ValueError("partition and Hamiltonian act on different spin counts")
        self.partition = partition
        self.K = axis_couplings(spec)
        self.h_x = spec.field()
        cid = partition.cluster_id()
        same = cid[:, None] == cid[None, :]
        # mean-field couplings act only across clusters
        self.K_mf = np.where(same[None], 0.0, self.K)
        self.pa = np.array(partition.pairs, dtype=int).reshape(-1, 2)
        self.si = np.array(partition.singles, dtype=int)
        inter = np.abs(self.K_mf).max() if partition.n > 1 else 0.0
        self.max_dt = 1.0 / (steps_per_radian * inter) if inter > 0 else np.inf
        # structure constants flattened to (m, k*l) so that c @ M gives every
        # generator's action at once
        self._m1 = _M1[1:4].transpose(2, 0, 1).reshape(4, 12)
        self._m2 = np.concatenate(
            [_M2[[4, 8, 12]].transpose(2, 0, 1), _M2[[1, 2, 3]].transpose(2, 0, 1)], axis=1
        ).reshape(16, 96)

    def _intra_generators(self):
        """Linear generators of the exact intra-cluster flow (singles, pairs)."""
        g1 = 0.5 * self.h_x * _M1[1]
        g2 = []
        for a, b in self.pa:
            G = sum(0.25 * self.K[k, a, b] * _M2[5 * (k + 1)] for k in range(3))
            g2.append(G + 0.5 * self.h_x * (_M2[4] + _M2[1]))
        return g1, np.array(g2).reshape(-1, 16, 16)

    def _propagators(self, dt):
        g1, g2 = self._intra_generators()
        E1 = expm(g1 * dt)
        E2 = np.array([expm(g * dt) for g in g2]).reshape(-1, 16, 16)
        return E1, E2

    def _apply(self, E1, E2, s, p):
        # c_new = E c  per cluster
        return s @ E1.T, np.einsum("pij,tpj->tpi", E2, p) if len(E2) else p

    def _mean_field(self, s, p):
        """Time derivative from inter-cluster couplings (singles, pairs)."""
        T = s.shape[0]
        n = self.partition.n
        m = np.empty((T, n, 3))
        if len(self.si):
            m[:, self.si] = 0.5 * s[..., 1:]
        if len(self.pa):
            m[:, self.pa[:, 0]] = 0.5 * p[..., _PAIR_A]
            m[:, self.pa[:, 1]] = 0.5 * p[..., _PAIR_B]
        # local fields h_ia = sum_j K_aij m_ja; H_mf = sum_a h_ia s_a^i = sum (h/2) sigma
        h = np.einsum("tja,aij->tia", m, self.K_mf)
        ds = dp = None
        if len(self.si):
            hs = 0.5 * h[:, self.si]  # (T, S, 3) coefficients of sigma
            act = (s @ self._m1).reshape(T, -1, 3, 4)
            ds = np.einsum("tskl,tsk->tsl", act, hs)
        if len(self.pa):
            hab = 0.5 * np.concatenate([h[:, self.pa[:, 0]], h[:, self.pa[:, 1]]], axis=-1)
            act = (p @ self._m2).reshape(T, -1, 6, 16)
            dp = np.einsum("tpkl,tpk->tpl", act, hab)
        return ds, dp

    def evolve(self, state: ClusterTrajectories, times, observe=None, max_steps=10_000_000):
        """Integrate through ``times`` (relative to the current state, starting at 0).

        Returns ``[observe(state_t) for t in times]`` (copies of the state if
        ``observe`` is None).
        """
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) < 0) or (len(times) and times[0] < 0):
            raise ValueError("times must be non-negative and non-decreasing")
        s, p = state.singles.copy(), state.pairs.copy()
        out = []
        now = 0.0
        cache = {}
        total_steps = 0
        for t in times:
            span = t - now
            if span > 0:
                nsteps = max(1, math.ceil(span / self.max_dt - 1e-9))
                total_steps += nsteps
                if total_steps > max_steps:
                    raise IntegrationError(f"step limit {max_steps} exceeded")
                dt = span / nsteps
                key = round(dt, 15)
                if key not in cache:
                    cache[key] = self._propagators(0.5 * dt)
                E1, E2 = cache[key]
                for _ in range(nsteps):
                    s, p = self._step(s, p, dt, E1, E2)
                if not (np.isfinite(s).all() and np.isfinite(p).all()):
                    raise IntegrationError("non-finite values in trajectory integration")
                now = t
            snap = ClusterTrajectories(state.partition, s.copy(), p.copy(), state.seeds)
            out.append(snap if observe is None else observe(snap))
        return out

    def _step(self, s, p, dt, E1, E2):
        """One Lawson-RK4 step; E1/E2 propagate the exact intra flow over dt/2."""
        has_s, has_p = s.shape[1] > 0, p.shape[1] > 0

        def N(s_, p_):
            ds, dp = self._mean_field(s_, p_)
            return (ds if has_s else s_ * 0), (dp if has_p else p_ * 0)

        def E(s_, p_):
            return self._apply(E1, E2, s_, p_)

        k1s, k1p = N(s, p)
        a = E(s + 0.5 * dt * k1s, p + 0.5 * dt * k1p)
        k2s, k2p = N(*a)
        es, ep = E(s, p)
        k3s, k3p = N(es + 0.5 * dt * k2s, ep + 0.5 * dt * k2p)
        ees, eep = E(es, ep)
        ek3 = E(k3s, k3p)
        k4s, k4p = N(ees + dt * ek3[0], eep + dt * ek3[1])
        e1 = E(*E(k1s, k1p))
        e23 = E(k2s + k3s, k2p + k3p)
        s_new = ees + dt / 6 * (e1[0] + 2 * e23[0] + k4s)
        p_new = eep + dt / 6 * (e1[1] + 2 * e23[1] + k4p)
        return s_new, p_new


def evolve_trajectory(state, spec, times, steps_per_radian=50.0):
    """Time series of trajectory batches under a static Hamiltonian."""
    return ClusterEngine(spec, state.partition, steps_per_radian).evolve(state, times)


# --------------------------------------------------------------- statistics


def estimators(state: ClusterTrajectories) -> np.ndarray:
    """Per-trajectory (Sx, Sy, Sz, SxSx, SySy, SzSz, {SySz}/2) estimates, shape (T, 7)."""
    S, SS = state.collective()
    return np.column_stack([S, SS[:, 0, 0], SS[:, 1, 1], SS[:, 2, 2], SS[:, 1, 2]])


def trajectory_stats(state: ClusterTrajectories) -> TrajectoryStats:
    return TrajectoryStats.from_samples(state.partition.n, estimators(state))


@dataclass
class DTWAResult:
    times: np.ndarray
    stats: list  # TrajectoryStats per time
    n_traj: int
    seed: int

    def moments(self):
        return [s.moments() for s in self.stats]

    def sx(self):
        return np.array([s.mean[0] for s in self.stats]), np.array([s.stderr()["sx"] for s in self.stats])


CHUNK = 250


def run_dtwa(
    spec, partition, times, n_traj, seed, eta=1.0, axis="x", rotation=None, chunk=CHUNK, steps_per_radian=50.0
) -> DTWAResult:
    """Trajectory-averaged collective moments on ``times``.

    Trajectories are processed in fixed chunks of ``chunk`` and reduced in a
    fixed tree order, so results are reproducible regardless of how chunks
    are scheduled.  ``rotation`` = (axis, angle) is applied to the initial
    phase points (e.g. a tip before a twisting experiment).
    """
    if n_traj < 2:
        raise ValueError("need at least two trajectories")
    engine = ClusterEngine(spec, partition, steps_per_radian)
    per_chunk = []
    for start in range(0, n_traj, chunk):
        cnt = min(chunk, n_traj - start)
        st = sample_phase_points(partition, cnt, eta, axis, seed, start)
        if rotation is not None:
            st = st.rotate(*rotation)
        per_chunk.append(engine.evolve(st, times, trajectory_stats))
    stats = [tree_reduce([c[k] for c in per_chunk], TrajectoryStats.merge) for k in range(len(times))]
    return DTWAResult(np.asarray(times, dtype=float), stats, n_traj, seed)
