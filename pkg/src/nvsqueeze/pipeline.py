"""Squeezing experiments end to end: simulate, fit, map, extract.

:func:`simulate_realization` runs one disorder realization through the
twisting, generation and readout sequences.  :func:`combine_realizations`
merges independent realizations into a :class:`SqueezeData` record, and
:func:`analyze` applies the offset shift, the global stretched fit, the
variance map and the squeezing extraction.  The true moments at each t_g
travel with the data so every extracted quantity has a direct oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import analytics, fit, protocol
from .constants import J0 as DEFAULT_J0
from .stats import combine_moments, combined_min_variance, combined_sx, combined_var_theta


@dataclass
class RealizationResult:
    """Per-realization statistics; every list is indexed like the plan grids."""

    seed: int
    n: int
    n_traj: int
    generation: list  # [t_g] TrajectoryStats
    readout: list  # [t_g][theta][t_r] TrajectoryStats
    twist_t: np.ndarray
    twist: list  # [t] TrajectoryStats of the tipped state


def simulate_realization(plan, ensemble, seed, twist_phi=math.pi / 4, twist_times=None, J0=DEFAULT_J0):
    """Generation, readout and (optionally) twisting for one engineered ensemble."""
    gen = protocol.run_generation(plan, ensemble, seed, J0)
    readout = [[protocol.run_readout(plan, snap, th) for th in plan.theta] for snap in gen.snapshots]
    tw_t = np.asarray(twist_times if twist_times is not None else [], dtype=float)
    twist = []
    if len(tw_t):
        be = gen.backend
        twist = be.evolve(be.initial(rotation=("y", twist_phi)), tw_t, observe=protocol.Snapshot.stats)
    n_traj = plan.n_traj if plan.engine == "dtwa" else gen.backend.n_samples
    return RealizationResult(seed, gen.n, n_traj, gen.stats, readout, tw_t, twist)


@dataclass
class SqueezeData:
    """Realization-combined observables of one squeezing experiment.

    Spin lengths are totals over all realizations.  ``var_ratio`` is the true
    ``Var(S_theta)/Var(S_0)`` at each t_g and ``xi2_direct`` the squeezing
    parameter computed straight from the moments, normalized to the initial
    state (1 at t_g = 0 for any polarization).
    """

    t_g: np.ndarray
    theta: np.ndarray
    t_r: np.ndarray
    n: int
    sx0: float
    sx0_err: float
    gen_sx: np.ndarray
    gen_sx_err: np.ndarray
    readout: np.ndarray  # (n_tg, n_theta, n_tr)
    readout_err: np.ndarray
    var_theta: np.ndarray  # (n_tg, n_theta)
    var_ratio: np.ndarray
    xi2_direct: np.ndarray
    xi2_direct_err: np.ndarray
    xi2_eq_raw: np.ndarray  # N min Var / <Sx>^2
    chi: float = float("nan")
    twist_phi: float = math.pi / 4
    provenance: list = field(default_factory=list)


def _xi2_direct(parts, sx0):
    """``(minVar/Var_0)(Sx(0)/Sx)^2`` with Var_0 = Var(Sz) of the initial state (N/4)."""
    vmin, verr, _ = combined_min_variance(parts)
    sx, sxe = combined_sx(parts)
    var0 = sum(p.n for p in parts) / 4.0
    val = vmin / var0 * (sx0 / sx) ** 2
    err = abs(val) * math.hypot(verr / vmin if vmin else 0.0, 2 * sxe / sx)
    raw = sum(p.n for p in parts) * vmin / sx**2
    return val, err, raw


def combine_realizations(plan, results, twist_phi=math.pi / 4, max_ratio=0.2) -> SqueezeData:
    results = list(results)
    n_tg, n_th, n_tr = len(plan.t_g), len(plan.theta), len(plan.t_r)
    n = sum(r.n for r in results)
    # the t_r = 0 point of any readout is the state at t_g; the t_g grid may not contain 0
    init = [r.readout[0][0][0] for r in results] if plan.t_g[0] == 0 else None
    gen_sx = np.zeros(n_tg)
    gen_err = np.zeros(n_tg)
    for k in range(n_tg):
        gen_sx[k], gen_err[k] = combined_sx([r.generation[k] for r in results])
    if init is not None:
        sx0, sx0_err = combined_sx(init)
    else:
        sx0, sx0_err = plan.eta * n / 2.0, 0.0
    ro = np.zeros((n_tg, n_th, n_tr))
    ro_err = np.zeros_like(ro)
    for a in range(n_tg):
        for b in range(n_th):
            for c in range(n_tr):
                ro[a, b, c], ro_err[a, b, c] = combined_sx([r.readout[a][b][c] for r in results])
    var_abs = np.zeros((n_tg, n_th))
    ratio = np.zeros((n_tg, n_th))
    xi = np.zeros(n_tg)
    xi_err = np.zeros(n_tg)
    raw = np.zeros(n_tg)
    for k in range(n_tg):
        parts = [r.generation[k] for r in results]
        var_abs[k], _ = combined_var_theta(parts, plan.theta)
        var0 = combined_var_theta(parts, 0.0)[0][0]
        ratio[k] = var_abs[k] / var0
        xi[k], xi_err[k], raw[k] = _xi2_direct(parts, sx0)
    chi = float("nan")
    if results and len(results[0].twist_t):
        t = results[0].twist_t
        tw = [combine_moments([r.twist[k] for r in results]) for k in range(len(t))]
        ratio_t = np.array([m.sy / m.sx for m in tw])
        chi = analytics.chi_from_twisting(t, ratio_t, twist_phi, max_ratio)
    prov = [{"seed": r.seed, "n": r.n, "n_traj": r.n_traj} for r in results]
    return SqueezeData(
        np.array(plan.t_g), np.array(plan.theta), np.array(plan.t_r), n, sx0, sx0_err,
        gen_sx, gen_err, ro, ro_err, var_abs, ratio, xi, xi_err, raw, chi, twist_phi, prov,
    )  # fmt: skip


# ------------------------------------------------------------------ analysis


@dataclass
class SqueezeAnalysis:
    fits: dict  # t_max -> StretchedFit over all (t_g, theta) curves, row-major
    t2: np.ndarray  # (n_tmax, n_tg, n_theta)
    t2_err: np.ndarray
    t_o: np.ndarray  # (n_tg, n_theta)
    vmap: fit.VarianceMap
    xi2: fit.Xi2Series
    mapped_ratio: np.ndarray  # (n_tg, n_theta), first t_max


def readout_curves(data: SqueezeData, chi=None):
    """Shifted decay curves for every (t_g, theta), with the offsets used."""
    chi = data.chi if chi is None else chi
    curves = []
    t_o = np.zeros((len(data.t_g), len(data.theta)))
    for a, tg in enumerate(data.t_g):
        t_o[a] = analytics.offset_time(data.theta, chi, tg)
        for b, th in enumerate(data.theta):
            err = data.readout_err[a, b]
            c = fit.DecayCurve(
                data.t_r,
                data.readout[a, b],
                err if np.all(err > 0) else None,
                {"t_g": float(tg), "theta": float(th)},
            )
            curves.append(fit.shift_curve(c, t_o[a, b]))
    return curves, t_o


def fit_readouts(data: SqueezeData, t_max=(None,), chi=None, p_mode="global", min_points=4):
    """Offset-shift and fit every readout curve, once per ``t_max`` of the sweep.

    All curves share one stretch power; each is fitted on the effective-time
    window ``t_g <= t_eff <= t_max`` of its own generation time.  ``None`` in
    ``t_max`` means the end of the readout grid.  Returns
    ``(fits, t2, t2_err, t_o)`` with ``t2`` shaped (n_tmax, n_tg, n_theta).
    """
    curves, t_o = readout_curves(data, chi)
    n_tg, n_th = len(data.t_g), len(data.theta)
    t_max = [float(data.t_r[-1]) if tm is None else float(tm) for tm in t_max]
    fits = {}
    t2 = np.zeros((len(t_max), n_tg, n_th))
    t2e = np.zeros_like(t2)
    for s, tm in enumerate(t_max):
        trimmed = [_trim(c, data.t_g[i // n_th], tm) for i, c in enumerate(curves)]
        f = fit.fit_stretched(trimmed, window=(-np.inf, np.inf), p_mode=p_mode, min_points=min_points)
        fits[tm] = f
        t2[s] = f.T2.reshape(n_tg, n_th)
        t2e[s] = f.T2_err.reshape(n_tg, n_th)
    return fits, t2, t2e, t_o


def map_points(data: SqueezeData, t2) -> list:
    """(T2, true variance ratio) support points of one fitted (n_tg, n_theta) grid."""
    return [
        fit.MapPoint(float(data.t_g[a]), float(data.theta[b]), float(t2[a, b]), float(data.var_ratio[a, b]))
        for a in range(len(data.t_g))
        for b in range(len(data.theta))
    ]


def analyze(data: SqueezeData, t_max=(None,), chi=None, p_mode="global", map_tolerance=0.1, min_points=4):
    """Fit, map and extract squeezing from simulated readout curves.

    The map is built from the first ``t_max`` of the sweep and the true
    variance ratios; ξ² error bars include the spread over the sweep.
    """
    fits, t2, t2e, t_o = fit_readouts(data, t_max, chi, p_mode, min_points)
    vmap = fit.build_variance_map(map_points(data, t2[0]), map_tolerance)
    inputs = []
    for a in range(len(data.t_g)):
        sxr = data.sx0 / data.gen_sx[a]
        sxr_err = sxr * math.hypot(data.gen_sx_err[a] / data.gen_sx[a], data.sx0_err / data.sx0)
        inputs.append(fit.XiInput(float(data.t_g[a]), data.theta, t2[:, a], t2e[:, a], sxr, sxr_err))
    xi2 = fit.extract_xi2(vmap, inputs)
    mapped = np.array([vmap(t2[0, a]) for a in range(len(data.t_g))])
    return SqueezeAnalysis(fits, t2, t2e, t_o, vmap, xi2, mapped)


def _trim(curve: fit.DecayCurve, t_min, t_max) -> fit.DecayCurve:
    sel = (curve.t >= t_min - 1e-12) & (curve.t <= t_max + 1e-12)
    se = None if curve.stderr is None else curve.stderr[sel]
    return fit.DecayCurve(curve.t[sel], curve.values[sel], se, dict(curve.metadata))
