"""Experiment sequences shared by both engines.

A sequence is: lattice engineering (removal filter or transverse-field ramp),
a generation quench of length t_g under H_XXZ, a global rotation X_theta and
a readout quench of length t_r.  Engines are hidden behind a small backend
interface so that every sequence runs unchanged on the exact and the cluster
Wigner engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dtwa, exact
from .constants import J0 as DEFAULT_J0
from .ensemble import (
    RemovalModel,
    SpinEnsemble,
    Status,
    apply_removal,
    depolarization_probability,
    nearest_active_distances,
    sample_fixed_count,
)
from .model import HamiltonianSpec, build_coupling
from .stats import TrajectoryStats, combined_sx, tree_reduce

# ------------------------------------------------------------------- plans


@dataclass(frozen=True)
class RampSpec:
    """Transverse-field ramp solving ``dh/dt = -k h^3``: ``h(t) = h0 / sqrt(1 + 2 h0^2 k t)``."""

    h0: float
    k: float
    duration: float
    steps: int = 100
    wait: bool = True

    def __post_init__(self):
        if not (self.h0 > 0 and self.k > 0):
            raise ValueError("ramp needs h0 > 0 and k > 0")
        if self.duration <= 0:
            raise ValueError("ramp duration must be positive")
        if self.steps < 10:
            raise ValueError("staircase needs at least 10 steps")

    def field(self, t):
        return self.h0 / np.sqrt(1 + 2 * self.h0**2 * self.k * np.asarray(t, dtype=float))

    @property
    def h_final(self) -> float:
        return float(self.field(self.duration))

    def staircase(self):
        """(step length, field) pairs; each step holds the field at its midpoint."""
        dt = self.duration / self.steps
        mids = (np.arange(self.steps) + 0.5) * dt
        return dt, self.field(mids)

    def r_depol(self, J0=DEFAULT_J0) -> float:
        """Radius at which a pair's coupling equals the final field, ``(J0/h_f)^(1/3)``.

        The adiabatically followed pair eigenstate at field h_f has total
        polarization ``1 - depolarization_probability(r, r_depol)`` with this
        radius.
        """
        return (J0 / self.h_final) ** (1.0 / 3.0)


def _strictly_increasing(a, name, allow_empty=False):
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or (len(a) == 0 and not allow_empty):
        raise ValueError(f"{name} grid must be a non-empty 1D sequence")
    if np.any(np.diff(a) <= 0):
        raise ValueError(f"{name} grid must be strictly increasing")
    return a


@dataclass(frozen=True)
class QuenchPlan:
    """Grids, engine choice and sampling parameters of one experiment.

    ``n_traj`` is the number of Wigner trajectories (cluster engine) or of
    pure-state samples of the partially polarized initial state (exact
    engine; one sample suffices when ``eta == 1``).
    """

    t_g: tuple = (0.0,)
    theta: tuple = (0.0,)
    t_r: tuple = (0.0,)
    engine: str = "exact"
    eta: float = 1.0
    n_realizations: int = 1
    n_traj: int = 1
    seed: int = 0
    prelude: object = None
    max_spins: int = exact.MAX_SPINS
    steps_per_radian: float = 50.0
    cluster_size: int = 2

    def __post_init__(self):
        for name in ("t_g", "theta", "t_r"):
            object.__setattr__(self, name, tuple(_strictly_increasing(getattr(self, name), name)))
        if self.t_r[0] != 0.0:
            raise ValueError("t_r grid must start at 0")
        if self.engine not in ("exact", "dtwa"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.n_realizations < 1 or self.n_traj < 1:
            raise ValueError("n_realizations and n_traj must be positive")
        if self.engine == "dtwa" and self.n_traj < 2:
            raise ValueError("the cluster engine needs n_traj >= 2")
        if self.prelude is not None and not isinstance(self.prelude, (RemovalModel, RampSpec)):
            raise TypeError("prelude must be a RemovalModel, a RampSpec or None")


# ---------------------------------------------------------------- backends


def _sub_seed(seed, *key) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0])


@dataclass
class Snapshot:
    """Engine state of every sample at one point of a sequence."""

    backend: object
    payload: list
    t: float = 0.0

    def stats(self) -> TrajectoryStats:
        return self.backend.stats(self.payload)


class ExactBackend:
    name = "exact"

    def __init__(self, spec, eta=1.0, n_samples=1, seed=0, max_spins=exact.MAX_SPINS):
        self.n = spec.n
        self.op = exact.SpinOperator(spec, max_spins)
        self.eta = eta
        self.n_samples = 1 if eta == 1.0 else n_samples
        self.seed = seed
        self.max_spins = max_spins

    def with_spec(self, spec):
        out = ExactBackend.__new__(ExactBackend)
        out.__dict__.update(self.__dict__)
        out.op = exact.SpinOperator(spec, self.max_spins)
        return out

    def initial(self, rotation=None) -> Snapshot:
        states = list(
            exact.sample_polarized_states(
                self.n, "x", self.eta, self.n_samples, _sub_seed(self.seed, 1), self.max_spins
            )
        )
        if rotation is not None:
            states = [exact.rotate_global(s, *rotation) for s in states]
        return Snapshot(self, states)

    def rotate(self, snap, axis, angle) -> Snapshot:
        return Snapshot(self, [exact.rotate_global(s, axis, angle) for s in snap.payload], snap.t)

    def evolve(self, snap, times, observe=None):
        """Per time: observe(Snapshot) (or the Snapshot itself)."""
        per_sample = [exact.evolve(s, self.op, times) for s in snap.payload]
        out = []
        for k, t in enumerate(times):
            sn = Snapshot(self, [traj[k] for traj in per_sample], snap.t + t)
            out.append(sn if observe is None else observe(sn))
        return out

    def stats(self, payload) -> TrajectoryStats:
        return TrajectoryStats.from_moments([exact.moments(s) for s in payload])

    def site_sx(self, payload) -> np.ndarray:
        """Mean <s_x> of every site."""
        n = self.n
        out = np.zeros(n)
        for s in payload:
            pt = s.reshape((2,) * n)
            for i in range(n):
                out[i] += 0.5 * np.vdot(pt, np.flip(pt, axis=i)).real
        return out / len(payload)


class ClusterBackend:
    name = "dtwa"

    def __init__(self, spec, partition, eta=1.0, n_traj=2, seed=0, steps_per_radian=50.0, chunk=dtwa.CHUNK):
        self.n = spec.n
        self.partition = partition
        self.engine = dtwa.ClusterEngine(spec, partition, steps_per_radian)
        self.eta = eta
        self.n_traj = n_traj
        self.seed = seed
        self.steps_per_radian = steps_per_radian
        self.chunk = chunk

    def with_spec(self, spec):
        out = ClusterBackend.__new__(ClusterBackend)
        out.__dict__.update(self.__dict__)
        out.engine = dtwa.ClusterEngine(spec, self.partition, self.steps_per_radian)
        return out

    def initial(self, rotation=None) -> Snapshot:
        chunks = []
        for start in range(0, self.n_traj, self.chunk):
            cnt = min(self.chunk, self.n_traj - start)
            st = dtwa.sample_phase_points(self.partition, cnt, self.eta, "x", self.seed, start)
            chunks.append(st if rotation is None else st.rotate(*rotation))
        return Snapshot(self, chunks)

    def rotate(self, snap, axis, angle) -> Snapshot:
        return Snapshot(self, [c.rotate(axis, angle) for c in snap.payload], snap.t)

    def evolve(self, snap, times, observe=None):
        per_chunk = [self.engine.evolve(c, times) for c in snap.payload]
        out = []
        for k, t in enumerate(times):
            sn = Snapshot(self, [pc[k] for pc in per_chunk], snap.t + t)
            out.append(sn if observe is None else observe(sn))
        return out

    def stats(self, payload) -> TrajectoryStats:
        return tree_reduce([dtwa.trajectory_stats(c) for c in payload], TrajectoryStats.merge)

    def site_sx(self, payload) -> np.ndarray:
        tot = sum(c.one_body()[..., 0].sum(axis=0) for c in payload)
        return tot / sum(c.n_traj for c in payload)


def make_backend(plan: QuenchPlan, spec: HamiltonianSpec, graph=None, seed=None):
    seed = plan.seed if seed is None else seed
    if plan.engine == "exact":
        return ExactBackend(spec, plan.eta, plan.n_traj, seed, plan.max_spins)
    part = dtwa.build_clusters(graph if graph is not None else spec.exchange_matrix(), plan.cluster_size)
    return ClusterBackend(spec, part, plan.eta, plan.n_traj, seed, plan.steps_per_radian)


# -------------------------------------------------------- lattice engineering


def engineer(plan: QuenchPlan, ensemble: SpinEnsemble, seed=None, ramp_engine="probabilistic"):
    """Apply the plan's prelude to ``ensemble``."""
    pre = plan.prelude
    if pre is None:
        return ensemble
    if isinstance(pre, RemovalModel):
        graph = build_coupling(ensemble) if ensemble.n_active else None
        return apply_removal(ensemble, pre, graph, seed)
    return run_adiabatic_ramp(ensemble, pre, ramp_engine, seed=seed)[0]


def sample_engineered(n_active, density, thickness, prelude, seed, max_tries=10_000):
    """Fixed-count ensemble whose lattice engineering leaves exactly ``n_active`` spins.

    Attempt ``k`` samples ``n_total`` spins with seed derived from
    ``(seed, k)``; ``n_total`` is nudged up or down after each miss.
    """
    n_total = n_active
    for k in range(max_tries):
        ens = sample_fixed_count(n_total, density, thickness, _sub_seed(seed, k))
        if prelude is not None:
            if isinstance(prelude, RemovalModel):
                graph = build_coupling(ens) if n_total > 0 else None
                ens = apply_removal(ens, prelude, graph, _sub_seed(seed, k, 1))
            else:
                ens = run_adiabatic_ramp(ens, prelude, "probabilistic", seed=_sub_seed(seed, k, 1))[0]
        got = ens.n_active
        if got == n_active:
            return ens
        n_total = max(n_active, n_total + (1 if got < n_active else -1))
    raise RuntimeError(f"no ensemble with {n_active} active spins after {max_tries} attempts")


def run_adiabatic_ramp(
    ensemble, ramp: RampSpec, engine="probabilistic", seed=None, J0=DEFAULT_J0, n_traj=2000, max_spins=exact.MAX_SPINS
):
    """Depolarize strongly coupled spins with a decreasing transverse field.

    ``probabilistic`` marks spins with :func:`depolarization_probability` at
    ``ramp.r_depol()``.  ``exact``/``dtwa`` propagate the active spins under
    ``H_XXZ + h(t) Sx`` on the staircase and mark each spin depolarized with
    probability ``1 - 2 <s_x>``.  Returns ``(ensemble, per-spin <s_x>)``;
    the per-spin values of inactive spins are 0.  With ``ramp.wait`` the
    depolarized spins are reported with zero residual polarization.
    """
    rng = np.random.default_rng(np.random.SeedSequence(0 if seed is None else seed, spawn_key=(0xDE,)))
    status = ensemble.status.copy()
    act = np.flatnonzero(ensemble.active)
    sx = np.zeros(ensemble.n_spins)
    if len(act) == 0:
        return ensemble, sx
    if engine == "probabilistic":
        r_nn = nearest_active_distances(ensemble)[act]
        finite = np.isfinite(r_nn)
        p = np.zeros(len(act))
        p[finite] = depolarization_probability(r_nn[finite], ramp.r_depol(J0))
        sx[act] = 0.5 * (1 - p)
    elif engine in ("exact", "dtwa"):
        graph = build_coupling(ensemble, J0)
        dt, fields = ramp.staircase()
        spec = HamiltonianSpec.xxz(graph)
        if engine == "exact":
            be = ExactBackend(spec, 1.0, 1, 0, max_spins)
        else:
            part = dtwa.build_clusters(graph)
            be = ClusterBackend(spec, part, 1.0, n_traj, _sub_seed(0 if seed is None else seed, 2))
        snap = be.initial()
        for h in fields:
            be = be.with_spec(spec.with_field(float(h)))
            snap = be.evolve(Snapshot(be, snap.payload, snap.t), [dt])[0]
        sx[act] = be.site_sx(snap.payload)
        p = np.clip(1 - 2 * sx[act], 0.0, 1.0)
    else:
        raise ValueError(f"unknown ramp engine {engine!r}")
    u = rng.random(len(act))
    hit = u < p
    status[act[hit]] = Status.DEPOLARIZED
    if ramp.wait:
        sx[act[hit]] = 0.0
    return ensemble.with_status(status), sx


# ------------------------------------------------------------- sequences


@dataclass
class GenerationResult:
    t_g: np.ndarray
    stats: list
    snapshots: list
    n: int
    backend: object = None

    def sx(self):
        return np.array([s.mean[0] for s in self.stats]), np.array([s.stderr()["sx"] for s in self.stats])


def realization_spec(ensemble, J0=DEFAULT_J0):
    graph = build_coupling(ensemble, J0)
    return graph, HamiltonianSpec.xxz(graph)


def run_generation(plan: QuenchPlan, ensemble: SpinEnsemble, seed=None, J0=DEFAULT_J0) -> GenerationResult:
    """Quench the (already engineered) ensemble and keep a snapshot at each t_g."""
    graph, spec = realization_spec(ensemble, J0)
    be = make_backend(plan, spec, graph, seed)
    snaps = be.evolve(be.initial(), plan.t_g)
    return GenerationResult(np.array(plan.t_g), [s.stats() for s in snaps], snaps, graph.n, be)


def run_readout(plan: QuenchPlan, snapshot: Snapshot, theta: float):
    """Rotate the snapshot by X_theta and record collective statistics on the t_r grid."""
    be = snapshot.backend
    rot = be.rotate(snapshot, "x", theta)
    return be.evolve(rot, plan.t_r, observe=Snapshot.stats)


@dataclass
class TwistResult:
    phi_o: float
    t: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    sx_err: np.ndarray
    sy_err: np.ndarray

    @property
    def phi_p(self):
        return np.arctan2(self.sy, self.sx)


def run_twisting(plan: QuenchPlan, ensemble: SpinEnsemble, phis, times=None, seed=None, J0=DEFAULT_J0):
    """Tip by exp(-i phi_o Sy), quench, and record Sx, Sy and the precession angle."""
    times = np.asarray(plan.t_g if times is None else times, dtype=float)
    graph, spec = realization_spec(ensemble, J0)
    be = make_backend(plan, spec, graph, seed)
    out = []
    for phi in phis:
        if not abs(phi) < math.pi / 2:
            raise ValueError("tip angle must satisfy |phi_o| < pi/2")
        st = be.evolve(be.initial(rotation=("y", phi)), times, observe=Snapshot.stats)
        m = np.array([s.mean[:2] for s in st])
        e = np.array([[s.stderr()["sx"], s.stderr()["sy"]] for s in st])
        out.append(TwistResult(float(phi), times, m[:, 0], m[:, 1], e[:, 0], e[:, 1]))
    return out


# --------------------------------------------------------- aggregation


def normalized_sx(stats_per_realization):
    """Total <Sx> over independent realizations divided by N_total/2, with error."""
    val, err = combined_sx(stats_per_realization)
    half = 0.5 * sum(s.n for s in stats_per_realization)
    return val / half, err / half
