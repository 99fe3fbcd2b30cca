import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvsqueeze.analytics import OATParams, oat_decay
from nvsqueeze.errors import ExtrapolationError, FitError, MapConstructionError
from nvsqueeze.fit import (
    DecayCurve,
    MapPoint,
    XiInput,
    build_variance_map,
    extract_xi2,
    fit_sinusoid,
    fit_stretched,
    golden_section,
    pav_decreasing,
    shift_curve,
    sinusoid_minimum,
    slice_overlap,
)


def stretched(t, A, T, p):
    return A * np.exp(-((np.abs(t) / T) ** p))


# ----------------------------------------------------------------- curves


def test_curve_validation():
    with pytest.raises(ValueError):
        DecayCurve([0, 1], [1.0])
    with pytest.raises(ValueError):
        DecayCurve([0, 0], [1.0, 1.0])
    with pytest.raises(ValueError):
        DecayCurve([0, 1], [1.0, np.nan])


def test_shift_is_relabel_and_composes():
    c = DecayCurve(np.linspace(0, 2, 5), np.arange(5.0))
    s = shift_curve(shift_curve(c, 0.3), -0.1)
    np.testing.assert_allclose(s.t, c.t - 0.2)
    np.testing.assert_allclose(s.raw_t, c.t)
    np.testing.assert_array_equal(s.values, c.values)
    assert shift_curve(c, 0.0).t.tolist() == c.t.tolist()


# ----------------------------------------------------------- stretched fit


def test_synthetic_joint_fit_exact():
    t = np.linspace(0, 5, 40)
    Ts, p = [1.0, 2.0, 3.5], 1.3
    curves = [DecayCurve(t, stretched(t, 0.8 + 0.1 * k, T, p)) for k, T in enumerate(Ts)]
    f = fit_stretched(curves)
    assert f.p == pytest.approx(p, abs=1e-6)
    np.testing.assert_allclose(f.T2, Ts, rtol=1e-6)
    np.testing.assert_allclose(f.A, [0.8, 0.9, 1.0], rtol=1e-6)
    assert f.r2 == pytest.approx(1.0)


def test_gaussian_power_recovered_with_noise():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 3, 60)
    se = 0.005 * np.ones_like(t)
    curves = [DecayCurve(t, stretched(t, 1.0, T, 2.0) + rng.normal(0, 0.005, t.size), se) for T in (1.0, 1.5)]
    f = fit_stretched(curves)
    assert f.p == pytest.approx(2.0, abs=0.02)
    assert abs(f.p - 2.0) < 4 * f.p_err


@settings(max_examples=20, deadline=None)
@given(c=st.floats(0.01, 100.0))
def test_timescales_invariant_under_amplitude(c):
    t = np.linspace(0, 4, 30)
    curves = [DecayCurve(t, stretched(t, 1.0, T, 1.5)) for T in (0.7, 1.9)]
    a = fit_stretched(curves, p_mode=1.5)
    b = fit_stretched([x.scaled(c) for x in curves], p_mode=1.5)
    np.testing.assert_allclose(b.T2, a.T2, rtol=1e-6)
    np.testing.assert_allclose(b.A, c * a.A, rtol=1e-6)


def test_fixed_power_reports_no_power_error():
    t = np.linspace(0, 3, 20)
    f = fit_stretched([DecayCurve(t, stretched(t, 1, 1, 2))], p_mode=2.0)
    assert f.p_fixed and f.p == 2.0 and f.p_err == 0.0
    assert f.cov.shape == (3, 3)


def test_empty_window_and_too_few_points():
    c = DecayCurve(np.linspace(0, 1, 10), np.linspace(1, 0.5, 10))
    with pytest.raises(FitError):
        fit_stretched([c], window=(5.0, 6.0))
    with pytest.raises(FitError):
        fit_stretched([c], window=(0.0, 0.2), min_points=4)
    with pytest.raises(FitError):
        fit_stretched([])


def test_window_applies_to_effective_time():
    t = np.linspace(-1, 4, 51)
    c = shift_curve(DecayCurve(t + 0.5, stretched(t, 1, 2, 2)), 0.5)
    f = fit_stretched([c], window=(0.0, 4.0), p_mode=2.0)
    assert f.T2[0] == pytest.approx(2.0, rel=1e-8)
    assert f.n_points == np.sum(c.t >= -1e-12)


def test_oat_curves_collapse_after_shift():
    """Gaussian readout curves with equal Var(Sz) coincide once shifted by their offsets."""
    t_r = np.linspace(0, 6, 61)
    curves = []
    for syz in (0.0, 0.5, 1.2):
        p = OATParams(0.3, 10, 5.0, 2.5, syz)
        curves.append(shift_curve(DecayCurve(t_r, oat_decay(p, t_r)), p.t_o))
    f = fit_stretched(curves, window=(0.0, 4.0), p_mode=2.0)
    np.testing.assert_allclose(f.T2, OATParams(0.3, 10, 5.0, 2.5).t2, rtol=1e-8)


# ------------------------------------------------------------ golden / PAV


def test_golden_section_on_parabola():
    x, fx = golden_section(lambda x: (x - 1.234) ** 2 + 3, 0, 5, tol=1e-12)
    assert x == pytest.approx(1.234, abs=1e-6)
    assert fx == pytest.approx(3.0)


@settings(max_examples=50, deadline=None)
@given(y=st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_pav_is_monotone_and_mean_preserving(y):
    out = pav_decreasing(y)
    assert np.all(np.diff(out) <= 1e-12)
    assert out.sum() == pytest.approx(sum(y), abs=1e-9)


def test_pav_leaves_sorted_input_alone():
    y = np.array([5.0, 4.0, 4.0, 1.0])
    np.testing.assert_array_equal(pav_decreasing(y), y)
    np.testing.assert_allclose(pav_decreasing([1.0, 3.0]), [2.0, 2.0])


# ------------------------------------------------------------ variance map


THETAS = np.linspace(0, math.pi, 9, endpoint=False)


def oat_points(t_gs=(0.5, 1.0), thetas=THETAS, t2_0=2.0):
    """Gaussian law: T2 scales as Var^-1/2, so ratio = (T2_0/T2)^2."""
    pts = []
    for t_g in t_gs:
        x = 0.8 * t_g
        for th in thetas:
            c, s = math.cos(th), math.sin(th)
            ratio = c**2 + s**2 * (1 + x**2) + 2 * s * c * x
            pts.append(MapPoint(t_g, th, t2_0 / math.sqrt(ratio), ratio))
    return pts


def test_map_inverts_gaussian_law():
    m = build_variance_map(oat_points())
    t2 = np.linspace(*m.valid_range, 25)
    np.testing.assert_allclose(m(t2), (2.0 / t2) ** 2, rtol=2e-3)
    assert m.diagnostics["slice_overlap"] < 1e-3


def test_map_at_untwisted_timescale_is_one():
    m = build_variance_map(oat_points())
    assert m(2.0) == pytest.approx(1.0, rel=1e-9)


def test_map_rejects_non_monotone_scatter():
    pts = [MapPoint(0.5, 0.0, 1.0, 1.0), MapPoint(0.5, 0.5, 2.0, 3.0), MapPoint(0.5, 1.0, 3.0, 0.5)]
    with pytest.raises(MapConstructionError) as exc:
        build_variance_map(pts)
    assert exc.value.diagnostics["max_log_deviation"] > 0.5


def test_map_refuses_extrapolation():
    m = build_variance_map(oat_points())
    lo, hi = m.valid_range
    with pytest.raises(ExtrapolationError):
        m(0.5 * lo)
    with pytest.raises(ExtrapolationError):
        m(2 * hi)


def test_map_derivative_matches_finite_difference():
    m = build_variance_map(oat_points())
    x = np.linspace(*m.valid_range, 7)[1:-1]
    h = 1e-6
    np.testing.assert_allclose(m.derivative(x), (m(x + h) - m(x - h)) / (2 * h), rtol=1e-4)


def test_slice_overlap_detects_disagreement():
    a = oat_points(t_gs=(0.5,))
    b = [MapPoint(1.0, p.theta, p.t2, 1.5 * p.var_ratio) for p in a]
    assert slice_overlap(a + b) == pytest.approx(0.5, rel=1e-6)


def test_map_serializes():
    m = build_variance_map(oat_points())
    assert m.to_csv().startswith("t_g,theta,T2,var_ratio\n")
    assert '"valid_range"' in m.to_json()


# ------------------------------------------------------------ squeezing


def test_sinusoid_fit_exact():
    th = np.linspace(0, math.pi, 12, endpoint=False)
    v = 1.0 + 0.4 * np.cos(2 * th + 0.3)
    coef, cov, r2 = fit_sinusoid(th, v)
    assert r2 == pytest.approx(1.0)
    mn, err = sinusoid_minimum(coef, cov)
    assert mn == pytest.approx(0.6)
    assert err == pytest.approx(0.0, abs=1e-7)


def test_xi2_unity_without_twisting():
    m = build_variance_map(oat_points())
    th = np.linspace(0, math.pi, 6, endpoint=False)
    inp = XiInput(0.0, th, np.full((1, 6), 2.0), np.full((1, 6), 0.01), 1.0)
    res = extract_xi2(m, [inp])
    assert res.xi2[0] == pytest.approx(1.0, abs=1e-9)


def test_xi2_recovers_gaussian_minimum():
    x = 0.8
    th = np.linspace(0, math.pi, 9, endpoint=False)
    c, s = np.cos(th), np.sin(th)
    ratio = c**2 + s**2 * (1 + x**2) + 2 * s * c * x
    m = build_variance_map(oat_points(t_gs=(0.5, 1.0, 1.5)))
    rows = np.vstack([2.0 / np.sqrt(ratio), 2.0 / np.sqrt(ratio) * 0.999])
    res = extract_xi2(m, [XiInput(1.0, th, rows, np.full_like(rows, 1e-3), 1.1, 0.01)])
    # minimum eigenvalue of [[1, x], [x, 1 + x^2]]
    lam = 1 + x**2 / 2 - math.sqrt(x**2 + x**4 / 4)
    assert res.min_ratio[0] == pytest.approx(lam, rel=1e-3)
    assert res.xi2[0] == pytest.approx(lam * 1.21, rel=1e-3)
    assert res.sweep_spread[0] > 0
    assert res.err[0] == pytest.approx(math.hypot(res.stat_err[0], res.sweep_spread[0]))
