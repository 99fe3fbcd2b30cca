"""Closed-form reference results for twisting, readout and decay.

Two twisting-strength conventions appear below and are kept apart:

* ``chi_oat`` is the coefficient of ``chi_oat * Sz^2`` (used by
  :func:`oat_moments` and :func:`oat_decay`);
* ``chi`` without suffix is the collective rate ``(N - 1) * chi_oat``, the quantity
  returned by :func:`nvsqueeze.model.mean_field_chi`.  It sets the early-time
  correlator ``<SySz>/<Sz^2> = chi t`` and the precession ``Sy/Sx``, and is the
  one entering :func:`offset_time` and :func:`chi_from_twisting`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .constants import J0 as DEFAULT_J0
from .exact import CollectiveMoments

# ----------------------------------------------------------------- OAT


def oat_moments(chi_oat, n, t) -> CollectiveMoments:
    """Exact collective moments of ``exp(-i chi_oat Sz^2 t)`` acting on a CSS along +x."""
    S = n / 2
    mu = 2 * chi_oat * t
    c2 = math.cos(mu) ** (n - 2) if n > 1 else 1.0
    sx = S * math.cos(chi_oat * t) ** (n - 1)
    sy2 = S / 2 * (1 + (S - 0.5) * (1 - c2))
    sx2 = S / 2 + S * (S - 0.5) * (1 + c2) / 2
    syz = S * (S - 0.5) * math.sin(mu / 2) * math.cos(mu / 2) ** (n - 2) if n > 1 else 0.0
    return CollectiveMoments(n=n, sx=sx, sy=0.0, sz=0.0, sx2=sx2, sy2=sy2, sz2=S / 2, syz=syz)


def oat_squeezing(chi_oat, n, t) -> float:
    """Squeezing parameter of the ideal OAT state (closed form)."""
    m = oat_moments(chi_oat, n, t)
    cov = m.covariance()
    vmin = 0.5 * (cov[0, 0] + cov[1, 1]) - math.hypot(0.5 * (cov[0, 0] - cov[1, 1]), cov[0, 1])
    return n * vmin / m.sx**2


@dataclass(frozen=True)
class OATParams:
    """Gaussian-state description of a twisted state before readout.

    ``chi_oat`` is the Sz^2 coefficient, ``L`` the spin length,
    ``var_z`` = Var(Sz) and ``syz`` the symmetrized covariance <SySz>.
    """

    chi_oat: float
    n: int
    L: float
    var_z: float
    syz: float = 0.0
    var_y: float | None = None

    def __post_init__(self):
        if self.var_z < 0:
            raise ValueError("Var(Sz) must be non-negative")
        if self.var_y is not None and self.syz**2 > self.var_y * self.var_z * (1 + 1e-12):
            raise ValueError("|<SySz>| exceeds sqrt(Var(Sy) Var(Sz))")

    @property
    def t2(self) -> float:
        return 1.0 / (math.sqrt(2.0) * abs(self.chi_oat) * math.sqrt(self.var_z))

    @property
    def t_o(self) -> float:
        return -self.syz / (2 * self.chi_oat * self.var_z * self.L)


def oat_decay(params: OATParams, t_r):
    """Readout spin length ``L exp(-2 chi^2 Var(Sz) (t_r - t_o)^2)``."""
    if params.chi_oat == 0 or params.var_z <= 0:
        raise ValueError("oat_decay needs chi != 0 and Var(Sz) > 0")
    t_r = np.asarray(t_r, dtype=float)
    return params.L * np.exp(-2 * params.chi_oat**2 * params.var_z * (t_r - params.t_o) ** 2)


def offset_time(theta, chi, t_g):
    """Readout offset t_o of a Gaussian twisted state rotated by X_theta.

    Evaluated in homogeneous cos/sin form so theta = pi/2 needs no limit.
    Generation for t_g at collective rate chi leaves the state with
    <SySz>/Var(Sz) = chi t_g; the rotated covariance then gives
    ``chi t_o = -[(c^2 - s^2) x + s c x^2] / [c^2 + s^2 (1 + x^2) + 2 s c x]``.
    """
    theta = np.asarray(theta, dtype=float)
    t_g = np.asarray(t_g, dtype=float)
    x = chi * t_g
    c, s = np.cos(theta), np.sin(theta)
    # t_g factored out so theta = 0 returns -t_g exactly and chi = 0 needs no branch
    num = c**2 - s**2 + s * c * x
    den = c**2 + s**2 * (1 + x**2) + 2 * s * c * x
    return -t_g * num / den


def chi_from_twisting(t, sy_over_sx, theta, max_ratio=0.2) -> float:
    """Collective rate from the early precession of a tipped state.

    The state is tipped by exp(-i theta Sy), so <Sz> = -(N/2) sin(theta) and
    the mean-field precession is ``Sy/Sx = -chi t sin(theta)``.  The slope is
    fitted through the origin on points with ``|Sy/Sx| < max_ratio``.
    """
    s = math.sin(theta)
    if abs(s) < 1e-12:
        raise ValueError("chi_from_twisting needs sin(theta) != 0")
    t = np.asarray(t, dtype=float)
    r = np.asarray(sy_over_sx, dtype=float)
    sel = (t > 0) & (np.abs(r) < max_ratio)
    if sel.sum() < 3:
        raise ValueError("need at least 3 early-time points inside the window")
    slope = float(t[sel] @ r[sel] / (t[sel] @ t[sel]))
    return -slope / s


# ---------------------------------------------------------------- dimers


def dimer_twisting(phi_o, J, t):
    """Total (<Sx>, <Sy>) of a coupled pair tipped by exp(-i phi_o Sy)."""
    t = np.asarray(t, dtype=float)
    return (
        math.cos(phi_o) * np.cos(J * t),
        -math.sin(phi_o) * math.cos(phi_o) * np.sin(J * t),
    )


def dimer_readout(theta, J, t_g, t_r):
    """Total <Sx> of a pair after generation t_g, rotation X_theta and readout t_r."""
    J = np.asarray(J, dtype=float)
    return np.sin(theta) ** 2 * np.cos(J * (t_g - t_r)) + np.cos(theta) ** 2 * np.cos(J * (t_g + t_r))


# --------------------------------------------------------- crossover law

GAMMA_M13 = math.pi / (math.sin(-math.pi / 3) * math.gamma(4.0 / 3.0))


def expn_real(m, x, scaled=False):
    """Generalized exponential integral ``E_m(x) = int_1^inf e^{-xt} t^{-m} dt``.

    Non-integer ``m > 1``, ``x >= 0``.  ``scaled=True`` returns ``e^x E_m(x)``,
    which stays representable where E_m itself underflows (x > ~700).
    Uses the convergent series
    ``x^{m-1} Gamma(1-m) - sum_k (-x)^k / (k! (1-m+k))`` for ``x < 1`` and
    adaptive quadrature otherwise.
    """
    if m <= 1 or float(m).is_integer():
        raise ValueError("expn_real supports non-integer m > 1")
    x = float(x)
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0 / (m - 1)
    if x < 1.0:
        total = x ** (m - 1) * math.gamma(1 - m)
        term = 1.0
        k = 0
        while True:
            add = term / (1 - m + k)
            total -= add
            if abs(add) < 1e-17 * abs(total) and k > 2:
                break
            k += 1
            term *= -x / k
        return total * math.exp(x) if scaled else total
    # substitute t = 1 + u/x so the integrand decays on an O(1) scale
    f = lambda u: math.exp(-u) * (1 + u / x) ** (-m)
    val, _ = quad(f, 0, np.inf, epsabs=0, epsrel=1e-13, limit=200)
    return (val if scaled else math.exp(-x) * val) / x


@dataclass(frozen=True)
class CrossoverParams:
    """2D Poisson ensemble with hard core ``r_min`` (nm) at areal density ``density``.

    The decay is driven by ``chi(t) = (J0 t)^2``.
    """

    density: float
    r_min: float = 0.0
    J0: float = DEFAULT_J0

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.r_min < 0:
            raise ValueError("r_min must be non-negative")


def crossover_log_decay(params: CrossoverParams, t):
    """``-ln(Sx(t)/Sx(0))``; equals ``2 pi n int_{r_min}^inf r (1 - exp(-chi/8r^6)) dr``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    chi = (params.J0 * t) ** 2
    r = params.r_min
    out = -(chi ** (1 / 3)) / 12 * GAMMA_M13
    if r > 0:
        # E_m(0) = 1/(m-1) = 3 at t = 0; E_m -> 0 once r^6 underflows
        e = np.array([3.0 if c == 0 else _expn_or_zero(c, 8 * r**6) for c in chi])
        out = out + r**2 / 6 * (e - 3)
    return 2 * math.pi * params.density * out


def _expn_or_zero(num, den):
    return expn_real(4 / 3, num / den) if den > 0 and math.isfinite(num / den) else 0.0


def crossover_sx(params: CrossoverParams, t):
    out = np.exp(-crossover_log_decay(params, t))
    return out if np.ndim(t) else float(out[0])


def local_stretch_exponent(params: CrossoverParams, t, h=1e-4):
    """``d ln(-ln Sx) / d ln t`` by central differences in ln t."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    up = np.log(crossover_log_decay(params, t * math.exp(h)))
    dn = np.log(crossover_log_decay(params, t * math.exp(-h)))
    return (up - dn) / (2 * h)


def crossover_time(params: CrossoverParams, exponent=4.0 / 3.0) -> float:
    """Time at which the local stretch exponent passes ``exponent`` (between 2/3 and 2)."""
    if params.r_min <= 0:
        raise ValueError("crossover needs r_min > 0")
    # natural time scale: chi/8r^6 = 1
    tau = math.sqrt(8.0) * params.r_min**3 / params.J0
    f = lambda lt: local_stretch_exponent(params, math.exp(lt))[0] - exponent
    return math.exp(brentq(f, math.log(tau) - 12, math.log(tau) + 12, xtol=1e-10))
