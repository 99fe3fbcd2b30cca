import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from nvsqueeze.constants import J0, ppm_nm_to_areal
from nvsqueeze.ensemble import (
    RemovalModel,
    SpinEnsemble,
    Status,
    apply_removal,
    depolarization_probability,
    mean_nn_spacing,
    nearest_active_distances,
    nn_distance_cdf,
    nn_distance_pdf,
    sample_fixed_count,
    sample_positions,
    shelving_probability,
)

RHO8 = ppm_nm_to_areal(8.0)


def test_density_conversion():
    # 8 ppm*nm with 176.3 atoms/nm^3
    assert RHO8 == pytest.approx(1.4104e-3, rel=1e-4)


def test_zero_density_is_empty():
    ens = sample_positions(0.0, (100.0, 100.0), 7.0, seed=1)
    assert ens.n_spins == 0


def test_zero_volume_box_rejected():
    with pytest.raises(ValueError):
        sample_positions(1e-3, (0.0, 100.0), 7.0, seed=1)


def test_positions_inside_box_and_deterministic():
    a = sample_positions(RHO8, (300.0, 200.0), 7.0, seed=42)
    b = sample_positions(RHO8, (300.0, 200.0), 7.0, seed=42)
    assert np.array_equal(a.positions, b.positions)
    p = a.positions
    assert np.all((p[:, 0] >= 0) & (p[:, 0] <= 300) & (p[:, 1] >= 0) & (p[:, 1] <= 200))
    assert np.all((p[:, 2] >= 0) & (p[:, 2] <= 7))
    assert np.all(a.status == Status.ACTIVE)


def test_mean_spacing_at_working_density():
    spacings = [mean_nn_spacing(sample_fixed_count(200, RHO8, 7.0, seed=s)) for s in range(100)]
    # quasi-2D layer: roughly 1/(2 sqrt(n)) = 13 nm, raised by edges and thickness
    assert 13.0 <= np.mean(spacings) <= 30.0


def test_nn_histogram_matches_2d_law():
    n = 2.5e-3
    box = 400.0
    r = []
    for seed in range(300):
        ens = sample_positions(n, (box, box), 0.0, seed=seed)
        d = nearest_active_distances(ens)
        # spins far from the edges see an unbiased neighbourhood
        inner = np.all((ens.positions[:, :2] > 60) & (ens.positions[:, :2] < box - 60), axis=1)
        r.append(d[inner])
    r = np.concatenate(r)
    ks = stats.kstest(r, lambda x: nn_distance_cdf(x, n, dim=2))
    assert ks.statistic < 0.02


@pytest.mark.parametrize("dim", [2, 3])
def test_nn_pdf_normalized(dim):
    n = 1e-3 if dim == 2 else 1e-4
    val, _ = integrate.quad(nn_distance_pdf, 0, np.inf, args=(n, dim), epsabs=1e-12)
    assert val == pytest.approx(1.0, abs=1e-9)
    assert nn_distance_pdf(0.0, n, dim) == 0.0


def test_nn_pdf_3d_unit_interval():
    val, _ = integrate.quad(nn_distance_pdf, 0, 10, args=(1.0, 3), epsabs=1e-13)
    assert val == pytest.approx(1.0, abs=1e-9)


def test_nn_pdf_2d_mode():
    n = 0.01
    mode = 1 / math.sqrt(2 * math.pi * n)
    h = 1e-4
    assert nn_distance_pdf(mode - h, n) < nn_distance_pdf(mode, n) > nn_distance_pdf(mode + h, n)


def test_nn_pdf_bad_dim():
    with pytest.raises(ValueError):
        nn_distance_pdf(1.0, 1.0, dim=4)


def test_shelving_probability_values():
    assert shelving_probability(0.0, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert shelving_probability(1.0, 1.0) == pytest.approx(0.684, abs=1e-3)
    assert shelving_probability(1.0, 1.0) == pytest.approx(1 - 0.5 * math.sin(math.pi / math.sqrt(2)) ** 2)
    assert shelving_probability(1e4, 1.0) > 0.999
    with pytest.raises(ValueError):
        shelving_probability(1.0, 0.0)


def test_depolarization_probability_values():
    assert depolarization_probability(10.0, 0.0) == 0.0
    assert depolarization_probability(1e-3, 14.0) > 0.999
    x1 = 1 - 4 * (math.sqrt(5) - 1) / (4 + (math.sqrt(5) - 1) ** 2)
    assert depolarization_probability(14.0, 14.0) == pytest.approx(x1, rel=1e-12)
    assert x1 == pytest.approx(0.106, abs=1e-3)


@given(
    x=st.floats(min_value=0.05, max_value=20.0),
    r_depol=st.floats(min_value=0.1, max_value=50.0),
)
def test_depolarization_matches_quoted_rational_form(x, r_depol):
    s = math.sqrt(1 + 4 * x**6)
    pol = 4 * x**3 * (s - 1) / (4 * x**6 + (s - 1) ** 2)
    assert depolarization_probability(x * r_depol, r_depol) == pytest.approx(1 - pol, abs=1e-9)


def test_probabilities_bounded_on_many_inputs():
    rng = np.random.default_rng(0)
    # only J/omega enters, so one Rabi frequency covers every ratio
    ratio = rng.exponential(10.0, 10**6) * rng.choice([1e-3, 1.0, 1e3], 10**6)
    p = shelving_probability(ratio, 1.0)
    assert np.all((p >= 0) & (p <= 1))
    r = rng.exponential(10.0, 10**6) + 1e-6
    q = depolarization_probability(r, 14.0)
    assert np.all((q >= 0) & (q <= 1))


def test_depolarization_monotone_in_spacing():
    r = np.linspace(0.1, 100, 2000)
    assert np.all(np.diff(depolarization_probability(r, 14.0)) <= 0)


def test_hard_cutoff_zero_radius_unchanged():
    ens = sample_fixed_count(50, RHO8, 7.0, seed=3)
    out = apply_removal(ens, RemovalModel("hard_cutoff", 0.0))
    assert np.array_equal(out.status, ens.status)


def test_hard_cutoff_enforces_minimum_distance():
    ens = sample_fixed_count(400, RHO8, 7.0, seed=4)
    out = apply_removal(ens, RemovalModel("hard_cutoff", 16.0))
    act = out.active_positions
    assert len(act) > 10
    d = np.linalg.norm(act[:, None] - act[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 16.0


def test_hard_cutoff_idempotent():
    ens = sample_fixed_count(200, RHO8, 7.0, seed=5)
    m = RemovalModel("hard_cutoff", 12.0)
    once = apply_removal(ens, m)
    assert np.array_equal(apply_removal(once, m).status, once.status)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), ra=st.floats(0.0, 20.0), rb=st.floats(0.0, 20.0))
def test_hard_cutoff_monotone_in_radius(seed, ra, rb):
    ra, rb = sorted((ra, rb))
    ens = sample_fixed_count(80, RHO8, 7.0, seed=seed)
    na = apply_removal(ens, RemovalModel("hard_cutoff", ra)).n_active
    nb = apply_removal(ens, RemovalModel("hard_cutoff", rb)).n_active
    assert na >= nb


def test_removal_only_touches_active_and_statuses_partition():
    ens = sample_fixed_count(300, RHO8, 7.0, seed=6)
    dep = apply_removal(ens, RemovalModel("depolarization", 14.0), seed=1)
    both = apply_removal(dep, RemovalModel("shelving", 7.0), seed=2)
    # a spin depolarized first stays depolarized
    assert np.all(both.status[dep.status == Status.DEPOLARIZED] == Status.DEPOLARIZED)
    c = both.counts()
    assert c["active"] + c["shelved"] + c["depolarized"] == both.n_spins


def test_removal_deterministic():
    ens = sample_fixed_count(300, RHO8, 7.0, seed=7)
    m = RemovalModel("shelving", 7.0)
    assert np.array_equal(apply_removal(ens, m, seed=9).status, apply_removal(ens, m, seed=9).status)


def test_shelved_fraction_matches_semianalytic_integral():
    """Planar layer: the fraction shelved follows the 2D nearest-neighbour law."""
    omega = J0 / 7.0**3
    expected, _ = integrate.quad(
        lambda r: nn_distance_pdf(r, RHO8) * shelving_probability(J0 / r**3, omega), 0, np.inf, limit=200
    )
    box = 500.0
    shelved = total = 0
    for seed in range(60):
        ens = sample_positions(RHO8, (box, box), 0.0, seed=seed)
        out = apply_removal(ens, RemovalModel("shelving", 7.0), seed=seed + 1000)
        inner = np.all((ens.positions[:, :2] > 80) & (ens.positions[:, :2] < box - 80), axis=1)
        shelved += int(np.sum(out.status[inner] == Status.SHELVED))
        total += int(inner.sum())
    frac = shelved / total
    sigma = math.sqrt(expected * (1 - expected) / total)
    assert abs(frac - expected) < 3 * sigma


def test_json_round_trip():
    ens = apply_removal(sample_fixed_count(30, RHO8, 7.0, seed=8), RemovalModel("shelving", 7.0), seed=1)
    back = SpinEnsemble.from_json(ens.to_json())
    assert np.array_equal(back.positions, ens.positions)
    assert np.array_equal(back.status, ens.status)
    assert back.box == ens.box
