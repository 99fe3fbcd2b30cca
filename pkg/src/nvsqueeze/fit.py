"""Variance readout analysis: shifting, stretched-exponential fits, T2 -> variance maps.

The chain turns readout curves ``<Sx(t_r)>`` into variances without ever
measuring a second moment directly:

1. each curve is shifted by its offset time, ``t_eff = t_r - t_o``;
2. all curves are fitted jointly to ``A_k exp(-(t_eff/T2_k)^p)`` with one
   shared stretch power p;
3. a monotone dictionary ``T2 -> Var(S_theta)/Var(S_0)`` built from
   simulations converts fitted T2 values into variance ratios;
4. the minimum over theta of the mapped ratio, corrected for the loss of
   spin length during generation, gives the squeezing parameter.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import least_squares

from .errors import ExtrapolationError, FitError, MapConstructionError

# ------------------------------------------------------------------ curves


@dataclass(frozen=True)
class DecayCurve:
    """Spin length versus readout time, with optional standard errors."""

    t: np.ndarray
    values: np.ndarray
    stderr: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1:
            raise ValueError("t and values must be 1D arrays of equal length")
        if not (np.isfinite(t).all() and np.isfinite(v).all()):
            raise ValueError("curve contains non-finite values")
        if np.any(np.diff(t) <= 0):
            raise ValueError("curve time grid must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)
        if self.stderr is not None:
            se = np.asarray(self.stderr, dtype=float)
            if se.shape != v.shape:
                raise ValueError("stderr must match values")
            object.__setattr__(self, "stderr", se)

    @property
    def raw_t(self) -> np.ndarray:
        """Readout times before any offset shift."""
        return self.t + self.metadata.get("t_o", 0.0)

    def scaled(self, c) -> DecayCurve:
        se = None if self.stderr is None else self.stderr * abs(c)
        return DecayCurve(self.t, self.values * c, se, dict(self.metadata))

    def to_dict(self) -> dict:
        return {
            "t": self.t.tolist(),
            "values": self.values.tolist(),
            "stderr": None if self.stderr is None else self.stderr.tolist(),
            "metadata": self.metadata,
        }


def shift_curve(curve: DecayCurve, t_o: float) -> DecayCurve:
    """Relabel the grid as ``t_eff = t_r - t_o`` (no resampling)."""
    meta = dict(curve.metadata)
    meta["t_o"] = meta.get("t_o", 0.0) + float(t_o)
    return DecayCurve(curve.t - t_o, curve.values, curve.stderr, meta)


# ------------------------------------------------------------ stretched fit


@dataclass
class StretchedFit:
    """Joint fit ``A_k exp(-(|t_eff|/T2_k)^p)``; ``cov`` orders (A..., T2..., p)."""

    A: np.ndarray
    T2: np.ndarray
    p: float
    window: tuple
    cov: np.ndarray
    chi2: float
    n_points: int
    p_fixed: bool = False
    r2: float = float("nan")
    residual_trace: list = field(default_factory=list)

    @property
    def n_curves(self) -> int:
        return len(self.T2)

    @property
    def T2_err(self) -> np.ndarray:
        k = self.n_curves
        return np.sqrt(np.clip(np.diag(self.cov)[k : 2 * k], 0, None))

    @property
    def p_err(self) -> float:
        return 0.0 if self.p_fixed else float(math.sqrt(max(self.cov[-1, -1], 0.0)))

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "T2": self.T2.tolist(),
            "T2_err": self.T2_err.tolist(),
            "p": self.p,
            "p_err": self.p_err,
            "p_fixed": self.p_fixed,
            "window": list(self.window),
            "covariance": self.cov.tolist(),
            "chi2": self.chi2,
            "n_points": self.n_points,
            "r2": self.r2,
        }


def _window_data(curves, window, min_points):
    t_min, t_max = window
    data = []
    for k, c in enumerate(curves):
        sel = (c.t >= t_min - 1e-12) & (c.t <= t_max + 1e-12)
        if sel.sum() == 0:
            raise FitError(f"curve {k} has no points inside the window {window}")
        if sel.sum() < min_points:
            raise FitError(f"curve {k} has {int(sel.sum())} points in the window, need {min_points}")
        se = np.ones(int(sel.sum())) if c.stderr is None else c.stderr[sel]
        if np.any(se <= 0):
            se = np.ones(int(sel.sum()))
        data.append((np.abs(c.t[sel]), c.values[sel], se))
    return data


def _model(t, A, T, p):
    return A * np.exp(-((t / T) ** p))


def _linearized(t, y, se, p):
    """Initial (A, T) from ln y = ln A - T^-p |t|^p on positive points."""
    pos = y > 0
    if pos.sum() < 2:
        return max(float(np.max(np.abs(y))), 1e-12), float(np.max(t)) or 1.0
    w = (y[pos] / se[pos]) ** 2
    X = np.column_stack([np.ones(pos.sum()), -(t[pos] ** p)])
    coef, *_ = np.linalg.lstsq(X * np.sqrt(w)[:, None], np.log(y[pos]) * np.sqrt(w), rcond=None)
    A = math.exp(coef[0])
    b = coef[1]
    T = b ** (-1.0 / p) if b > 0 else 10.0 * float(np.max(t) or 1.0)
    return A, T


def _fit_single(t, y, se, p):
    A0, T0 = _linearized(t, y, se, p)
    scale_t = float(np.max(t)) or 1.0

    def res(x):
        return (_model(t, x[0], math.exp(x[1]), p) - y) / se

    x0 = np.array([A0, math.log(max(T0, 1e-6 * scale_t))])
    sol = least_squares(res, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    return sol.x[0], math.exp(sol.x[1]), float(sol.fun @ sol.fun), sol


def golden_section(f, a, b, tol=1e-8, max_iter=200):
    """Minimize a unimodal scalar function on [a, b]."""
    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol * (abs(c) + abs(d)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def fit_stretched(curves, window=None, p_mode="global", p_bounds=(0.3, 3.0), min_points=4) -> StretchedFit:
    """Joint stretched-exponential fit with a shared stretch power.

    ``window`` = (t_min, t_max) applies to the shifted time ``t_eff``; the
    natural choice ``t_min = max_theta(-t_o) = t_g`` is the first effective
    time that every curve of a generation time reaches.  With
    ``p_mode="global"`` the power is found by golden-section search, each
    trial p solving every curve separately (log-linear start, then
    Levenberg-Marquardt); otherwise ``p_mode`` is the fixed power.  The final
    covariance comes from a joint solve over all amplitudes, times and p.
    Residuals are weighted by the curve standard errors when given.
    """
    curves = list(curves)
    if not curves:
        raise FitError("no curves to fit")
    if window is None:
        window = (min(c.t[0] for c in curves), max(c.t[-1] for c in curves))
    data = _window_data(curves, window, min_points)
    trace = []

    def total(p):
        s = sum(_fit_single(t, y, se, p)[2] for t, y, se in data)
        trace.append((float(p), float(s)))
        return s

    if p_mode == "global":
        p, _ = golden_section(total, *p_bounds, tol=1e-10)
        fixed = False
    else:
        p = float(p_mode)
        if not 0 < p <= 4:
            raise FitError("fixed stretch power must lie in (0, 4]")
        fixed = True
    singles = [_fit_single(t, y, se, p) for t, y, se in data]
    if not all(s[3].success for s in singles):
        raise FitError("per-curve fit did not converge", trace)
    A = np.array([s[0] for s in singles])
    T = np.array([s[1] for s in singles])

    k = len(data)

    def joint(x):
        pp = p if fixed else x[-1]
        out = []
        for i, (t, y, se) in enumerate(data):
            out.append((_model(t, x[i], x[k + i], pp) - y) / se)
        return np.concatenate(out)

    x0 = np.concatenate([A, T] + ([] if fixed else [[p]]))
    sol = least_squares(joint, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000)
    if not sol.success or not np.isfinite(sol.x).all():
        raise FitError("joint fit did not converge", trace)
    A, T = sol.x[:k], sol.x[k : 2 * k]
    if not fixed:
        p = float(sol.x[-1])
    if np.any(T <= 0) or np.any(A <= 0) or not 0 < p <= 4:
        raise FitError(f"fit left the admissible region (p={p:.4g})", trace)
    J = sol.jac
    chi2 = float(sol.fun @ sol.fun)
    n_pts = sum(len(d[0]) for d in data)
    dof = max(n_pts - len(sol.x), 1)
    try:
        cov = np.linalg.pinv(J.T @ J)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - pinv rarely fails
        raise FitError("singular fit covariance", trace) from exc
    if all(c.stderr is None for c in curves):
        cov = cov * chi2 / dof
    if fixed:
        full = np.zeros((2 * k + 1, 2 * k + 1))
        full[: 2 * k, : 2 * k] = cov
        cov = full
    y_all = np.concatenate([d[1] for d in data])
    pred = y_all + np.concatenate([d[2] for d in data]) * sol.fun
    ss_tot = float(((y_all - y_all.mean()) ** 2).sum())
    r2 = 1 - float(((y_all - pred) ** 2).sum()) / ss_tot if ss_tot > 0 else float("nan")
    return StretchedFit(A, T, float(p), tuple(map(float, window)), cov, chi2, n_pts, fixed, r2, trace)


# ------------------------------------------------------------ variance map


def pav_decreasing(y, w=None):
    """Weighted isotonic (non-increasing) regression by pool-adjacent-violators."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    vals, wts, sizes = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] < vals[-1]:
            v2, w2, s2 = vals.pop(), wts.pop(), sizes.pop()
            v1, w1, s1 = vals.pop(), wts.pop(), sizes.pop()
            vals.append((v1 * w1 + v2 * w2) / (w1 + w2))
            wts.append(w1 + w2)
            sizes.append(s1 + s2)
    return np.repeat(vals, sizes)


@dataclass(frozen=True)
class MapPoint:
    t_g: float
    theta: float
    t2: float
    var_ratio: float


@dataclass
class VarianceMap:
    """Monotone dictionary ``T2 -> Var(S_theta)/Var(S_0)``, interpolated in log-log."""

    t2: np.ndarray
    var_ratio: np.ndarray
    points: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t2 = np.asarray(self.t2, dtype=float)
        self.var_ratio = np.asarray(self.var_ratio, dtype=float)
        if len(self.t2) >= 2:
            self._f = PchipInterpolator(np.log(self.t2), np.log(self.var_ratio), extrapolate=False)
        else:
            self._f = None

    @property
    def valid_range(self) -> tuple[float, float]:
        return float(self.t2[0]), float(self.t2[-1])

    def __call__(self, t2, rtol=1e-9):
        t2 = np.asarray(t2, dtype=float)
        lo, hi = self.valid_range
        if np.any(t2 < lo * (1 - rtol)) or np.any(t2 > hi * (1 + rtol)):
            raise ExtrapolationError(f"T2 outside the map range [{lo:.4g}, {hi:.4g}]")
        if self._f is None:
            return np.full_like(t2, self.var_ratio[0])
        x = np.clip(np.log(t2), math.log(lo), math.log(hi))
        return np.exp(self._f(x))

    def derivative(self, t2):
        """d ratio / d T2."""
        t2 = np.asarray(t2, dtype=float)
        if self._f is None:
            return np.zeros_like(t2)
        lo, hi = self.valid_range
        x = np.clip(np.log(t2), math.log(lo), math.log(hi))
        return self(t2) * self._f.derivative()(x) / t2

    def to_dict(self) -> dict:
        return {
            "t2": self.t2.tolist(),
            "var_ratio": self.var_ratio.tolist(),
            "valid_range": list(self.valid_range),
            "points": [vars(p) for p in self.points],
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_g", "theta", "T2", "var_ratio"])
        for p in self.points:
            w.writerow([repr(p.t_g), repr(p.theta), repr(p.t2), repr(p.var_ratio)])
        return buf.getvalue()


def _monotone_support(t2, ratio):
    order = np.lexsort((-ratio, t2))
    x, y = np.log(t2[order]), np.log(ratio[order])
    fitted = pav_decreasing(y)
    # merge equal abscissae and flat runs into single knots
    xs, ys = [], []
    for xi, yi in zip(x, fitted):
        if xs and (abs(xi - xs[-1]) < 1e-12 or abs(yi - ys[-1]) < 1e-14):
            continue
        xs.append(xi)
        ys.append(yi)
    return np.array(xs), np.array(ys), np.max(np.abs(y - fitted)) if len(y) else 0.0


def build_variance_map(points, tolerance=0.1) -> VarianceMap:
    """Build the monotone T2 -> variance-ratio dictionary from simulated points.

    Raises :class:`MapConstructionError` when the scatter deviates from a
    non-increasing relation by more than ``tolerance`` (relative, in the
    variance ratio).  The diagnostics report the largest pointwise
    disagreement between maps built from individual t_g slices.
    """
    points = [p if isinstance(p, MapPoint) else MapPoint(*p) for p in points]
    if not points:
        raise MapConstructionError("no support points")
    t2 = np.array([p.t2 for p in points])
    ratio = np.array([p.var_ratio for p in points])
    if np.any(t2 <= 0) or np.any(ratio <= 0) or not (np.isfinite(t2).all() and np.isfinite(ratio).all()):
        raise MapConstructionError("support points must be positive and finite")
    xs, ys, dev = _monotone_support(t2, ratio)
    diag = {"max_log_deviation": float(dev), "n_points": len(points), "slice_overlap": slice_overlap(points)}
    if dev > math.log1p(tolerance):
        raise MapConstructionError(
            f"T2 -> variance scatter is not monotone (max relative deviation {math.expm1(dev):.3g})", diag
        )
    return VarianceMap(np.exp(xs), np.exp(ys), points, diag)


def slice_overlap(points) -> float:
    """Largest relative disagreement between maps of different t_g slices on their common T2 range."""
    slices = {}
    for p in points:
        slices.setdefault(p.t_g, []).append(p)
    maps = []
    for pts in slices.values():
        t2 = np.array([p.t2 for p in pts])
        r = np.array([p.var_ratio for p in pts])
        xs, ys, _ = _monotone_support(t2, r)
        if len(xs) >= 2:
            maps.append(PchipInterpolator(xs, ys, extrapolate=False))
    worst = 0.0
    for i in range(len(maps)):
        for j in range(i + 1, len(maps)):
            lo = max(maps[i].x[0], maps[j].x[0])
            hi = min(maps[i].x[-1], maps[j].x[-1])
            if hi <= lo:
                continue
            x = np.linspace(lo, hi, 50)
            worst = max(worst, float(np.max(np.expm1(np.abs(maps[i](x) - maps[j](x))))))
    return worst


# ----------------------------------------------------------- squeezing


def fit_sinusoid(theta, values, errors=None):
    """Fit ``c0 + c1 cos(2 theta + phi)``; returns (coef [c0, a, b], cov, R^2) with a cos + b sin."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(values, dtype=float)
    w = np.ones_like(v) if errors is None else 1.0 / np.maximum(np.asarray(errors, dtype=float), 1e-300)
    X = np.column_stack([np.ones_like(theta), np.cos(2 * theta), np.sin(2 * theta)])
    Xw = X * w[:, None]
    coef, *_ = np.linalg.lstsq(Xw, v * w, rcond=None)
    cov = np.linalg.pinv(Xw.T @ Xw)
    pred = X @ coef
    ss = float(((v - v.mean()) ** 2).sum())
    r2 = 1 - float(((v - pred) ** 2).sum()) / ss if ss > 0 else 1.0
    if errors is None:
        dof = max(len(v) - 3, 1)
        cov = cov * float(((v - pred) ** 2).sum()) / dof
    return coef, cov, r2


def sinusoid_minimum(coef, cov):
    """Minimum ``c0 - sqrt(a^2 + b^2)`` and its standard error."""
    c0, a, b = coef
    amp = math.hypot(a, b)
    grad = np.array([1.0, -a / amp, -b / amp]) if amp > 0 else np.array([1.0, 0.0, 0.0])
    return c0 - amp, math.sqrt(max(grad @ cov @ grad, 0.0))


@dataclass(frozen=True)
class XiInput:
    """Fitted readout timescales at one generation time.

    ``t2`` has shape (n_tmax, n_theta): one row per t_max of the window sweep;
    ``sx_ratio`` is S_x(0)/S_x(t_g) of the generation curve.
    """

    t_g: float
    theta: np.ndarray
    t2: np.ndarray
    t2_err: np.ndarray
    sx_ratio: float
    sx_ratio_err: float = 0.0


@dataclass
class Xi2Series:
    t_g: np.ndarray
    xi2: np.ndarray
    err: np.ndarray
    stat_err: np.ndarray
    sweep_spread: np.ndarray
    min_ratio: np.ndarray
    r2: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in vars(self).items()}


def extract_xi2(vmap: VarianceMap, inputs) -> Xi2Series:
    """Squeezing parameter ``min_theta(Var_theta/Var_0) (S_x(0)/S_x(t_g))^2`` per t_g.

    The minimum over theta is taken on a sinusoid fitted to the mapped
    variance ratios (raw minimum when fewer than three angles).  Errors
    combine the propagated fit covariance with the max-min spread over the
    t_max sweep in quadrature.
    """
    out = {k: [] for k in ("t_g", "xi2", "err", "stat_err", "sweep_spread", "min_ratio", "r2")}
    for inp in inputs:
        t2 = np.atleast_2d(np.asarray(inp.t2, dtype=float))
        t2e = np.atleast_2d(np.asarray(inp.t2_err, dtype=float))
        theta = np.asarray(inp.theta, dtype=float)
        xi_rows, stat_rows, r2_rows, min_rows = [], [], [], []
        for row, erow in zip(t2, t2e):
            ratio = vmap(row)
            rerr = np.abs(vmap.derivative(row)) * erow
            if len(theta) >= 3:
                errs = rerr if np.all(rerr > 0) else None
                coef, cov, r2 = fit_sinusoid(theta, ratio, errs)
                mn, mn_err = sinusoid_minimum(coef, cov)
            else:
                k = int(np.argmin(ratio))
                mn, mn_err, r2 = float(ratio[k]), float(rerr[k]), float("nan")
            xi = mn * inp.sx_ratio**2
            se = math.hypot(mn_err * inp.sx_ratio**2, 2 * mn * inp.sx_ratio * inp.sx_ratio_err)
            xi_rows.append(xi)
            stat_rows.append(se)
            r2_rows.append(r2)
            min_rows.append(mn)
        spread = float(np.ptp(xi_rows)) if len(xi_rows) > 1 else 0.0
        out["t_g"].append(inp.t_g)
        out["xi2"].append(xi_rows[0])
        out["stat_err"].append(stat_rows[0])
        out["sweep_spread"].append(spread)
        out["err"].append(math.hypot(stat_rows[0], spread))
        out["min_ratio"].append(min_rows[0])
        out["r2"].append(r2_rows[0])
    return Xi2Series(**{k: np.array(v) for k, v in out.items()})
