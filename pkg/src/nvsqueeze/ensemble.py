"""Positionally disordered spin ensembles and lattice-engineering filters.

Spins live in a box ``[0, Lx] x [0, Ly] x [0, d]`` (nm) with open boundaries.
Each spin carries a status: active, shelved or depolarized.  Only active spins
enter Hamiltonians and observables.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .constants import J0

SCHEMA_VERSION = 1


class Status(enum.IntEnum):
    ACTIVE = 0
    SHELVED = 1
    DEPOLARIZED = 2


@dataclass(frozen=True, eq=False)
class SpinEnsemble:
    """Spin positions (nm) in a quasi-2D box plus per-spin status flags."""

    positions: np.ndarray
    box: tuple[float, float, float]
    density: float
    seed: int | None = None
    status: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "positions", pos)
        if self.status is None:
            st = np.zeros(len(pos), dtype=np.int8)
        else:
            st = np.asarray(self.status, dtype=np.int8)
        if st.shape != (len(pos),):
            raise ValueError("status must have one entry per spin")
        object.__setattr__(self, "status", st)
        object.__setattr__(self, "box", tuple(float(b) for b in self.box))
        pos.flags.writeable = False
        st.flags.writeable = False

    def __len__(self):
        return len(self.positions)

    @property
    def n_spins(self) -> int:
        return len(self.positions)

    @property
    def active(self) -> np.ndarray:
        """Boolean mask of active spins."""
        return self.status == Status.ACTIVE

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active))

    @property
    def active_positions(self) -> np.ndarray:
        return self.positions[self.active]

    def with_status(self, status) -> SpinEnsemble:
        return replace(self, status=np.asarray(status, dtype=np.int8))

    def counts(self) -> dict[str, int]:
        return {s.name.lower(): int(np.count_nonzero(self.status == s)) for s in Status}

    def __eq__(self, other):
        if not isinstance(other, SpinEnsemble):
            return NotImplemented
        return (
            self.box == other.box
            and self.density == other.density
            and self.seed == other.seed
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.status, other.status)
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "box": {"Lx": self.box[0], "Ly": self.box[1], "thickness": self.box[2]},
            "density": self.density,
            "units": "nm",
            "positions": self.positions.tolist(),
            "status": [Status(s).name.lower() for s in self.status],
        }

    @classmethod
    def from_dict(cls, data: dict) -> SpinEnsemble:
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported ensemble schema version {version!r}")
        box = data["box"]
        status = [Status[s.upper()] for s in data["status"]]
        return cls(
            positions=np.asarray(data["positions"], dtype=float).reshape(-1, 3),
            box=(box["Lx"], box["Ly"], box["thickness"]),
            density=float(data["density"]),
            seed=data.get("seed"),
            status=np.asarray(status, dtype=np.int8),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> SpinEnsemble:
        return cls.from_dict(json.loads(text))


def _check_box(box, thickness):
    lx, ly = (float(b) for b in box)
    if not (lx > 0 and ly > 0):
        raise ValueError(f"box extents must be positive, got {box!r}")
    if thickness < 0:
        raise ValueError("thickness must be non-negative")
    return lx, ly


def _place(rng, n, lx, ly, thickness):
    xy = rng.uniform(0.0, 1.0, size=(n, 2)) * (lx, ly)
    z = rng.uniform(0.0, thickness, size=n) if thickness > 0 else np.zeros(n)
    return np.column_stack([xy, z])


def sample_positions(density, box, thickness, seed) -> SpinEnsemble:
    """Poisson-distributed spin count with i.i.d. uniform positions.

    The count is drawn from Poisson(density * Lx * Ly); z is uniform in the
    layer.  All spins start active.
    """
    if density < 0:
        raise ValueError("density must be non-negative")
    lx, ly = _check_box(box, thickness)
    rng = np.random.default_rng(seed)
    n = int(rng.poisson(density * lx * ly))
    pos = _place(rng, n, lx, ly, thickness)
    return SpinEnsemble(pos, (lx, ly, thickness), float(density), seed)


def sample_fixed_count(n_spins, density, thickness, seed, aspect=1.0) -> SpinEnsemble:
    """Place exactly ``n_spins`` spins in a box sized so the areal density is exact."""
    if n_spins < 0:
        raise ValueError("n_spins must be non-negative")
    if density <= 0:
        raise ValueError("density must be positive")
    area = n_spins / density
    lx = math.sqrt(area * aspect)
    ly = area / lx if lx > 0 else 0.0
    lx, ly = _check_box((lx, ly), thickness)
    rng = np.random.default_rng(seed)
    pos = _place(rng, int(n_spins), lx, ly, thickness)
    return SpinEnsemble(pos, (lx, ly, thickness), float(density), seed)


def nn_distance_pdf(r, n, dim=2):
    """Nearest-neighbour distance density for a Poisson point process.

    dim=2: ``2 pi r n exp(-pi r^2 n)`` with n in nm^-2;
    dim=3: ``4 pi r^2 n exp(-4/3 pi r^3 n)`` with n in nm^-3.
    """
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim!r}")
    if n <= 0:
        raise ValueError("density must be positive")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("r must be non-negative")
    if dim == 2:
        out = 2.0 * np.pi * r * n * np.exp(-np.pi * r**2 * n)
    else:
        out = 4.0 * np.pi * r**2 * n * np.exp(-4.0 / 3.0 * np.pi * r**3 * n)
    return out if out.ndim else float(out)


def nn_distance_cdf(r, n, dim=2):
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim!r}")
    r = np.asarray(r, dtype=float)
    if dim == 2:
        return 1.0 - np.exp(-np.pi * r**2 * n)
    return 1.0 - np.exp(-4.0 / 3.0 * np.pi * r**3 * n)


def shelving_probability(J, omega):
    """Probability that the weak selective pi-pulse leaves a spin behind.

    A spin detuned by its interaction shift ``J`` from a pulse of Rabi
    frequency ``omega`` is transferred with probability
    ``omega^2/(omega^2+J^2) sin^2(pi/2 sqrt((J/omega)^2+1))``; the remainder
    is shelved.
    """
    omega = float(omega)
    if omega <= 0:
        raise ValueError("Rabi frequency must be positive")
    J = np.asarray(J, dtype=float)
    if np.any(J < 0):
        raise ValueError("J must be non-negative")
    x2 = (J / omega) ** 2
    p_transfer = np.sin(0.5 * np.pi * np.sqrt(x2 + 1.0)) ** 2 / (1.0 + x2)
    out = np.clip(1.0 - p_transfer, 0.0, 1.0)
    return out if out.ndim else float(out)


def depolarization_probability(r_nn, r_depol):
    """Depolarization probability of a dimer with spacing ``r_nn``.

    Equal to one minus the x-polarization of the field-dressed dimer eigenstate
    adiabatically connected to |xx>.  With ``u = 2 (r_nn/r_depol)^3`` the
    polarization reduces to ``u / sqrt(1 + u^2)``.
    """
    r_nn = np.asarray(r_nn, dtype=float)
    if np.any(r_nn <= 0):
        raise ValueError("r_nn must be positive")
    if r_depol < 0:
        raise ValueError("r_depol must be non-negative")
    if r_depol == 0:
        out = np.zeros_like(r_nn)
    else:
        with np.errstate(over="ignore", divide="ignore"):
            # 1/u form keeps precision for widely separated dimers
            inv_u = 0.5 * (r_depol / r_nn) ** 3
            pol = 1.0 / np.sqrt(1.0 + inv_u**2)
        out = np.clip(1.0 - pol, 0.0, 1.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class RemovalModel:
    """Lattice-engineering filter.

    ``kind`` is one of ``hard_cutoff``, ``shelving``, ``depolarization``.
    For shelving, ``coupling_source`` selects the interaction shift used in
    the transfer probability: ``"nearest"`` uses ``J0 / r_nn^3`` (distance to
    the nearest active neighbour), ``"mean_field"`` uses ``J_i`` from the
    coupling graph.
    """

    kind: str
    radius: float
    coupling_source: str = "nearest"

    def __post_init__(self):
        if self.kind not in ("hard_cutoff", "shelving", "depolarization"):
            raise ValueError(f"unknown removal kind {self.kind!r}")
        if not self.radius >= 0:
            raise ValueError("removal radius must be >= 0")
        if self.coupling_source not in ("nearest", "mean_field"):
            raise ValueError(f"unknown coupling source {self.coupling_source!r}")


def nearest_active_distances(ensemble: SpinEnsemble) -> np.ndarray:
    """Distance from every spin to its nearest *other* active spin (inf if none)."""
    act = ensemble.active_positions
    out = np.full(ensemble.n_spins, np.inf)
    if len(act) == 0 or ensemble.n_spins == 0:
        return out
    tree = cKDTree(act)
    k = min(2, len(act))
    d, _ = tree.query(ensemble.positions, k=k)
    d = d.reshape(ensemble.n_spins, k)
    is_act = ensemble.active
    # active spins find themselves at distance 0 first
    out[is_act] = d[is_act, 1] if k == 2 else np.inf
    out[~is_act] = d[~is_act, 0]
    return out


def _removal_rng(ensemble, seed):
    if seed is None:
        base = 0 if ensemble.seed is None else ensemble.seed
        return np.random.default_rng(np.random.SeedSequence(base, spawn_key=(0x5E1F,)))
    return np.random.default_rng(seed)


def apply_removal(ensemble: SpinEnsemble, model: RemovalModel, coupling=None, seed=None) -> SpinEnsemble:
    """Apply a lattice-engineering filter, returning a new ensemble.

    Only active spins can change status.  ``hard_cutoff`` deterministically
    shelves every active spin that has an active neighbour closer than
    ``radius``; the stochastic filters draw one uniform number per spin (in
    spin order) from ``seed``.
    """
    status = ensemble.status.copy()
    act = ensemble.active
    if model.radius == 0 or not act.any():
        return ensemble.with_status(status)
    r_nn = nearest_active_distances(ensemble)

    if model.kind == "hard_cutoff":
        status[act & (r_nn < model.radius)] = Status.SHELVED
        return ensemble.with_status(status)

    rng = _removal_rng(ensemble, seed)
    u = rng.random(ensemble.n_spins)
    if model.kind == "shelving":
        omega = J0 / model.radius**3 if coupling is None else coupling.J0 / model.radius**3
        if model.coupling_source == "mean_field":
            if coupling is None:
                raise ValueError("mean_field shelving needs the coupling graph")
            J = np.zeros(ensemble.n_spins)
            J[coupling.indices] = coupling.J_i
        else:
            j0 = J0 if coupling is None else coupling.J0
            with np.errstate(divide="ignore"):
                J = np.where(np.isfinite(r_nn), j0 / r_nn**3, 0.0)
        p = np.zeros(ensemble.n_spins)
        p[act] = shelving_probability(J[act], omega)
        status[act & (u < p)] = Status.SHELVED
    else:
        p = np.zeros(ensemble.n_spins)
        finite = act & np.isfinite(r_nn)
        p[finite] = depolarization_probability(r_nn[finite], model.radius)
        status[act & (u < p)] = Status.DEPOLARIZED
    return ensemble.with_status(status)


def mean_nn_spacing(ensemble: SpinEnsemble) -> float:
    """Mean nearest-neighbour distance among active spins."""
    d = nearest_active_distances(ensemble)[ensemble.active]
    d = d[np.isfinite(d)]
    return float(d.mean()) if len(d) else float("nan")
