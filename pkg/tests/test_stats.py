import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvsqueeze.exact import krylov_propagate, moments, prepare_polarized, rotate_global
from nvsqueeze.model import HamiltonianSpec
from nvsqueeze.stats import (
    N_EST,
    TrajectoryStats,
    combine_moments,
    combined_min_variance,
    combined_sx,
    combined_var_theta,
    tree_reduce,
)


def samples(k, seed):
    return np.random.default_rng(seed).normal(size=(k, N_EST))


@settings(max_examples=30, deadline=None)
@given(a=st.integers(1, 40), b=st.integers(1, 40), seed=st.integers(0, 1000))
def test_merge_equals_pooled(a, b, seed):
    x, y = samples(a, seed), samples(b, seed + 1)
    m = TrajectoryStats.from_samples(3, x).merge(TrajectoryStats.from_samples(3, y))
    p = TrajectoryStats.from_samples(3, np.vstack([x, y]))
    assert m.count == p.count
    np.testing.assert_allclose(m.mean, p.mean, atol=1e-12)
    np.testing.assert_allclose(m.gram, p.gram, atol=1e-10)


def test_cov_of_mean_matches_numpy():
    x = samples(50, 2)
    s = TrajectoryStats.from_samples(4, x)
    np.testing.assert_allclose(s.cov_of_mean, np.cov(x.T) / 50, atol=1e-12)
    assert TrajectoryStats.from_samples(4, x[:1]).cov_of_mean.sum() == 0.0


def test_tree_reduce_fixed_order():
    items = [TrajectoryStats.from_samples(2, samples(3, k)) for k in range(7)]
    a = tree_reduce(items, TrajectoryStats.merge)
    b = tree_reduce(items, TrajectoryStats.merge)
    np.testing.assert_array_equal(a.total, b.total)
    assert tree_reduce([1, 2, 3, 4, 5], lambda u, v: u + v) == 15
    with pytest.raises(ValueError):
        tree_reduce([], TrajectoryStats.merge)


def twisted(n, t, seed):
    psi = rotate_global(prepare_polarized(n, "x")[0], "y", 0.2 * seed)
    return krylov_propagate(psi, HamiltonianSpec.oat(0.4, n), t)


def test_combine_moments_of_product_state():
    """Union moments of two independent blocks equal the moments of the tensor product."""
    a, b = twisted(3, 0.7, 1), twisted(4, 1.3, 2)
    joint = moments(np.kron(a, b))
    got = combine_moments([moments(a), moments(b)])
    for f in ("sx", "sy", "sz", "sx2", "sy2", "sz2", "syz"):
        assert getattr(got, f) == pytest.approx(getattr(joint, f), abs=1e-12)
    assert got.n == 7


def test_combined_var_and_min_variance():
    a, b = twisted(3, 0.7, 1), twisted(4, 1.3, 2)
    parts = [TrajectoryStats.from_moments([moments(a)]), TrajectoryStats.from_moments([moments(b)])]
    joint = moments(np.kron(a, b))
    th = np.linspace(0, math.pi, 7)
    v, err = combined_var_theta(parts, th)
    np.testing.assert_allclose(v, joint.var_theta(th), atol=1e-12)
    assert np.all(err == 0)
    vmin, _, _th_min = combined_min_variance(parts)
    assert vmin == pytest.approx(joint.min_variance()[0], abs=1e-12)
    assert vmin <= v.min() + 1e-12
    assert combined_sx(parts)[0] == pytest.approx(joint.sx)


def test_var_theta_error_matches_resampling():
    """Delta-method error against the spread of independent replicates."""
    rng = np.random.default_rng(3)

    def draw(k):
        y, z = rng.normal(0, 1.0, k), rng.normal(0, 0.5, k)
        return np.column_stack([np.ones(k), y, z, np.ones(k), y**2, z**2, y * z])

    errs, vals = [], []
    for _ in range(200):
        v, e = TrajectoryStats.from_samples(1, draw(400)).var_theta(0.4)
        vals.append(v[0])
        errs.append(e[0])
    assert np.mean(errs) == pytest.approx(np.std(vals), rel=0.15)
