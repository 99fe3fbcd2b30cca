"""Exact state-vector engine.

States are complex vectors of length 2**N in the s_z product basis.  Site i is
tensor axis i of ``psi.reshape((2,) * N)`` (site 0 most significant); bit value
0 means s_z = +1/2.

Hamiltonians are applied matrix-free.  The XXZ exchange is rewritten with the
two-site swap ``P_ij`` (``s_i . s_j = P_ij / 2 - 1/4``)::

    -W (sx sx + sy sy - sz sz) = -(W/2) P_ij + W (1/4 + 2 sz sz)

so one application costs a diagonal multiply plus one axis swap per coupled
pair.  When it fits in ``SPARSE_BYTES`` the same operator is cached as a
sparse matrix, which is several times faster.  Time evolution uses a Lanczos approximation of exp(-iHt) with
adaptive substeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.sparse import csr_matrix

from .errors import CapacityError, ConvergenceError, UndefinedSqueezingError
from .model import HamiltonianSpec

MAX_SPINS = 24

#: Memory budget for caching the Hamiltonian as a sparse matrix.
SPARSE_BYTES = 256 * 2**20

_AXES = {"x": 0, "y": 1, "z": 2}


def check_capacity(n, max_spins=MAX_SPINS):
    if n > max_spins:
        raise CapacityError(f"exact engine limited to N <= {max_spins}, got N = {n}")


def _bits(n):
    """(2**n, n) array of basis bits, site 0 most significant."""
    idx = np.arange(2**n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts) & 1).astype(np.int8)


_SZ_CACHE: dict[int, np.ndarray] = {}


def sz_diagonal(n) -> np.ndarray:
    """Eigenvalues of total S_z over the basis."""
    if n not in _SZ_CACHE:
        out = np.zeros(2**n)
        for i in range(n):
            out += _site_sz(n, i)
        _SZ_CACHE[n] = out
    return _SZ_CACHE[n]


def _site_sz(n, i):
    """s_z of site i over the basis, as a broadcast-free flat vector."""
    shape = [1] * n
    shape[i] = 2
    z = np.array([0.5, -0.5]).reshape(shape)
    return np.broadcast_to(z, (2,) * n).reshape(-1)


class SpinOperator:
    """Matrix-free Hamiltonian ``-sum W_ij (xx+yy-zz) + chi Sz^2 + h_x Sx``."""

    def __init__(self, spec: HamiltonianSpec, max_spins=MAX_SPINS):
        n = spec.n
        check_capacity(n, max_spins)
        self.n = n
        self.spec = spec
        W = spec.exchange_matrix()
        self.swaps = [(i, j, -0.5 * W[i, j]) for i in range(n) for j in range(i + 1, n) if W[i, j] != 0.0]
        diag = np.zeros(2**n)
        for i, j, c in self.swaps:
            w = -2.0 * c
            diag += w * (0.25 + 2.0 * _site_sz(n, i) * _site_sz(n, j))
        chi = spec.twisting()
        if chi:
            diag += chi * sz_diagonal(n) ** 2
        self.diag = diag
        self.h_x = spec.field()
        self._csr = self._build_sparse() if self._sparse_nnz() * 12 <= SPARSE_BYTES else None

    def _sparse_nnz(self) -> int:
        return self.dim * (1 + len(self.swaps) // 2 + (self.n if self.h_x else 0))

    def _build_sparse(self):
        """CSR form: faster than the axis-swap loop when it fits in memory."""
        n, dim = self.n, self.dim
        idx = np.arange(dim)
        diag = self.diag.copy()
        rows, cols, vals = [idx], [idx], []
        for i, j, c in self.swaps:
            bi, bj = 1 << (n - 1 - i), 1 << (n - 1 - j)
            differ = ((idx & bi) > 0) != ((idx & bj) > 0)
            # SWAP is the identity on equal bits and a flip-flop otherwise
            diag[~differ] += c
            src = idx[differ]
            rows.append(src)
            cols.append(src ^ (bi | bj))
            vals.append(np.full(len(src), c))
        if self.h_x:
            for i in range(n):
                rows.append(idx)
                cols.append(idx ^ (1 << (n - 1 - i)))
                vals.append(np.full(dim, 0.5 * self.h_x))
        vals.insert(0, diag)
        return csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim))

    @property
    def dim(self):
        return 2**self.n

    def matvec(self, psi):
        if self._csr is not None:
            # a real matrix against real and imaginary parts avoids a complex upcast per call
            if np.iscomplexobj(psi):
                return self._csr @ psi.real + 1j * (self._csr @ psi.imag)
            return self._csr @ psi
        n = self.n
        out = self.diag * psi
        if not self.swaps and not self.h_x:
            return out
        pt = psi.reshape((2,) * n)
        ot = out.reshape((2,) * n)
        for i, j, c in self.swaps:
            ot += c * np.swapaxes(pt, i, j)
        if self.h_x:
            for i in range(n):
                ot += 0.5 * self.h_x * np.flip(pt, axis=i)
        return out

    __call__ = matvec

    def energy(self, psi) -> float:
        return float(np.vdot(psi, self.matvec(psi)).real)

    def norm_bound(self) -> float:
        """Cheap upper bound on the spectral norm."""
        off = sum(abs(c) for _, _, c in self.swaps) + 0.5 * abs(self.h_x) * self.n
        return float(np.abs(self.diag).max() + off)


def as_operator(H, max_spins=MAX_SPINS) -> SpinOperator:
    if isinstance(H, SpinOperator):
        return H
    if isinstance(H, HamiltonianSpec):
        return SpinOperator(H, max_spins)
    raise TypeError(f"cannot build a spin operator from {type(H).__name__}")


# ------------------------------------------------------------------ states


def _single_spin_state(axis):
    sign = -1.0 if axis.startswith("-") else 1.0
    a = axis.lstrip("+-")
    if a == "z":
        return np.array([1, 0], dtype=complex) if sign > 0 else np.array([0, 1], dtype=complex)
    if a == "x":
        return np.array([1, sign], dtype=complex) / math.sqrt(2)
    if a == "y":
        return np.array([1, 1j * sign], dtype=complex) / math.sqrt(2)
    raise ValueError(f"unknown axis {axis!r}")


def product_state(single_states) -> np.ndarray:
    psi = np.ones(1, dtype=complex)
    for s in single_states:
        psi = np.kron(psi, s)
    return psi


def prepare_polarized(n, axis="x", eta=1.0, seed=None, max_spins=MAX_SPINS):
    """Product state polarized along ``axis`` (``"x"``, ``"-z"``, ...).

    With ``eta < 1`` each spin is independently flipped to the opposite axis
    with probability ``(1 - eta)/2``; averaging observables over many draws
    reproduces the partially polarized mixed state.  Returns ``(psi, flips)``.
    """
    check_capacity(n, max_spins)
    if not 0.0 <= eta <= 1.0:
        raise ValueError("polarization must lie in [0, 1]")
    if eta < 1.0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        flips = rng.random(n) < 0.5 * (1.0 - eta)
    else:
        flips = np.zeros(n, dtype=bool)
    a = axis.lstrip("+-")
    neg = axis.startswith("-")
    up, down = _single_spin_state(("-" if neg else "+") + a), _single_spin_state(("+" if neg else "-") + a)
    return product_state([down if f else up for f in flips]), flips


def sample_polarized_states(n, axis="x", eta=1.0, n_samples=1, seed=None, max_spins=MAX_SPINS):
    """Yield ``n_samples`` bit-flip samples of the partially polarized state."""
    rng = np.random.default_rng(seed)
    for _ in range(n_samples):
        yield prepare_polarized(n, axis, eta, rng, max_spins)[0]


# ------------------------------------------------------------- collective ops


def apply_collective(psi, axis, n=None):
    """Apply S_axis (axis in x, y, z) to ``psi``."""
    n = n or round(math.log2(psi.size))
    a = _AXES[axis]
    if a == 2:
        return sz_diagonal(n) * psi
    pt = psi.reshape((2,) * n)
    out = np.zeros_like(pt)
    shape = [1] * n
    for i in range(n):
        fl = np.flip(pt, axis=i)
        if a == 0:
            out += 0.5 * fl
        else:
            shape[i] = 2
            out += fl * np.array([-0.5j, 0.5j]).reshape(shape)
            shape[i] = 1
    return out.reshape(-1)


def rotate_global(psi, axis, angle, n=None):
    """Apply ``exp(-i angle S_axis)`` to every spin.

    With this sign, ``X_theta^dagger S_z X_theta = cos(theta) S_z + sin(theta) S_y``.
    """
    n = n or round(math.log2(psi.size))
    if angle == 0:
        return psi.copy()
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    a = _AXES[axis]
    if a == 0:
        U = np.array([[c, -1j * s], [-1j * s, c]])
    elif a == 1:
        U = np.array([[c, -s], [s, c]], dtype=complex)
    else:
        U = np.array([[c - 1j * s, 0], [0, c + 1j * s]])
    out = np.asarray(psi, dtype=complex).copy()
    for i in range(n):
        v = out.reshape(2**i, 2, 2 ** (n - i - 1))
        out = np.einsum("ab,ibj->iaj", U, v).reshape(-1)
    return out


# ------------------------------------------------------------------ Krylov


@dataclass
class KrylovStats:
    substeps: int = 0
    matvecs: int = 0
    max_error: float = 0.0


def _lanczos(op, v, m, beta0, done=None):
    """Lanczos with full reorthogonalization.  Returns (alpha, beta, V, k).

    ``done(alpha, beta, j)`` may stop the recursion early after step j.
    """
    dim = v.size
    V = np.empty((m, dim), dtype=complex)
    alpha = np.zeros(m)
    beta = np.zeros(m)
    V[0] = v / beta0
    breakdown_tol = 1e-13 * max(beta0, 1.0)
    k = m
    for j in range(m):
        w = op(V[j])
        alpha[j] = np.vdot(V[j], w).real
        w -= alpha[j] * V[j]
        if j > 0:
            w -= beta[j - 1] * V[j - 1]
        # reorthogonalize against the whole basis
        w -= V[: j + 1].T @ (V[: j + 1].conj() @ w)
        beta[j] = np.linalg.norm(w)
        if beta[j] < breakdown_tol:
            k = j + 1
            beta[j] = 0.0
            break
        if j + 1 < m:
            V[j + 1] = w / beta[j]
        if done is not None and j + 1 < m and done(alpha[: j + 1], beta[: j + 1]):
            k = j + 1
            break
    return alpha[:k], beta[:k], V[:k], k


def krylov_propagate(psi, H, t, tol=1e-10, m=30, max_substeps=100_000, stats=None):
    """Approximate ``exp(-i H t) psi`` by adaptive Lanczos substeps.

    Each substep builds an m-dimensional Krylov basis and picks the largest
    step tau (halving from the remaining time) whose a-posteriori error
    estimate ``beta_m |[exp(-i tau T)]_{m,1}|`` stays below ``tol * tau/|t|``,
    so the accumulated estimate is bounded by ``tol``.
    """
    op = as_operator(H)
    psi = np.asarray(psi, dtype=complex)
    if t == 0:
        return psi.copy()
    if not math.isfinite(t):
        raise ValueError("evolution time must be finite")
    stats = stats if stats is not None else KrylovStats()
    total = abs(t)
    sign = 1.0 if t > 0 else -1.0
    done = 0.0
    v = psi.copy()
    norm0 = np.linalg.norm(v)
    while done < total * (1 - 1e-15):
        if stats.substeps >= max_substeps:
            raise ConvergenceError(
                "Krylov propagation exceeded the substep limit",
                {"substeps": stats.substeps, "time_done": done, "time_total": total},
            )
        beta0 = np.linalg.norm(v)
        remaining = total - done

        def converged(a, b, remaining=remaining, beta0=beta0):
            # the whole remaining interval already meets the tolerance
            if len(a) < 4:
                return False
            ev, ec = eigh_tridiagonal(a, b[:-1])
            c_last = ec[-1] @ (np.exp(-1j * sign * remaining * ev) * ec[0].conj())
            return b[-1] * abs(c_last) * beta0 <= tol * remaining / total

        alpha, beta, V, k = _lanczos(op, v, m, beta0, converged)
        stats.matvecs += k
        evals, evecs = eigh_tridiagonal(alpha, beta[: k - 1]) if k > 1 else (alpha, np.ones((1, 1)))
        first = evecs[0].conj()
        tau = remaining
        for _ in range(60):
            coeff = evecs @ (np.exp(-1j * sign * tau * evals) * first)
            err = beta[k - 1] * abs(coeff[-1]) * beta0
            if err <= tol * tau / total:
                break
            tau *= 0.5
        else:
            raise ConvergenceError(
                "Krylov step size underflow",
                {"substeps": stats.substeps, "error_estimate": float(err), "tau": tau},
            )
        v = beta0 * (V.T @ coeff)
        stats.max_error = max(stats.max_error, float(err))
        stats.substeps += 1
        done += tau
    # renormalize away rounding drift
    nv = np.linalg.norm(v)
    if nv > 0:
        v *= norm0 / nv
    return v


def evolve(psi, H, times, observe=None, tol=1e-10, m=30):
    """Propagate through an increasing time grid (starting from time 0).

    Returns the list of ``observe(psi_t)`` values (the states themselves if
    ``observe`` is None).
    """
    op = as_operator(H)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be non-decreasing")
    out = []
    now = 0.0
    state = np.asarray(psi, dtype=complex)
    for t in times:
        if t != now:
            state = krylov_propagate(state, op, t - now, tol=tol, m=m)
            now = t
        out.append(state.copy() if observe is None else observe(state))
    return out


# ------------------------------------------------------------------ moments


@dataclass(frozen=True)
class CollectiveMoments:
    """First and second moments of the collective spin.

    ``syz`` is the symmetrized correlator ``<{Sy, Sz}>/2``.
    """

    n: int
    sx: float
    sy: float
    sz: float
    sx2: float
    sy2: float
    sz2: float
    syz: float

    def covariance(self) -> np.ndarray:
        """2x2 covariance of (S_y, S_z)."""
        vy = self.sy2 - self.sy**2
        vz = self.sz2 - self.sz**2
        c = self.syz - self.sy * self.sz
        return np.array([[vy, c], [c, vz]])

    def var_theta(self, theta):
        """Var(S_theta) with ``S_theta = cos(theta) Sz + sin(theta) Sy``."""
        theta = np.asarray(theta, dtype=float)
        c, s = np.cos(theta), np.sin(theta)
        mean = c * self.sz + s * self.sy
        second = c**2 * self.sz2 + s**2 * self.sy2 + 2 * s * c * self.syz
        return second - mean**2

    def min_variance(self) -> tuple[float, float]:
        """Smallest Var(S_theta) and its angle, from the covariance eigenproblem."""
        cov = self.covariance()
        w, vec = np.linalg.eigh(cov)
        vy, vz = vec[:, 0]
        theta = math.atan2(vy, vz) % math.pi
        return float(w[0]), theta

    def spin_length(self) -> float:
        return math.sqrt(max(self.sx2 + self.sy2, 0.0))

    @classmethod
    def mean(cls, items) -> CollectiveMoments:
        items = list(items)
        vals = np.mean([[m.sx, m.sy, m.sz, m.sx2, m.sy2, m.sz2, m.syz] for m in items], axis=0)
        return cls(items[0].n, *map(float, vals))

    def as_dict(self):
        return {k: getattr(self, k) for k in ("n", "sx", "sy", "sz", "sx2", "sy2", "sz2", "syz")}


def moments(psi, n=None) -> CollectiveMoments:
    n = n or round(math.log2(psi.size))
    sz = sz_diagonal(n)
    p = np.abs(psi) ** 2
    xpsi = apply_collective(psi, "x", n)
    ypsi = apply_collective(psi, "y", n)
    zpsi = sz * psi
    return CollectiveMoments(
        n=n,
        sx=float(np.vdot(psi, xpsi).real),
        sy=float(np.vdot(psi, ypsi).real),
        sz=float(p @ sz),
        sx2=float(np.vdot(xpsi, xpsi).real),
        sy2=float(np.vdot(ypsi, ypsi).real),
        sz2=float(p @ sz**2),
        syz=float(np.vdot(ypsi, zpsi).real),
    )


def squeezing_parameter(m: CollectiveMoments, n=None) -> float:
    """``xi^2 = N min_theta Var(S_theta) / <Sx>^2`` (closed-form minimum)."""
    n = m.n if n is None else n
    if abs(m.sx) < 1e-14 * max(n, 1):
        raise UndefinedSqueezingError("<Sx> = 0: squeezing parameter undefined")
    vmin, _ = m.min_variance()
    return n * vmin / m.sx**2


def squeezing_parameter_grid(m: CollectiveMoments, thetas, n=None) -> float:
    """Grid-scan version of :func:`squeezing_parameter` (cross-check)."""
    n = m.n if n is None else n
    if abs(m.sx) < 1e-14 * max(n, 1):
        raise UndefinedSqueezingError("<Sx> = 0: squeezing parameter undefined")
    return n * float(np.min(m.var_theta(thetas))) / m.sx**2
