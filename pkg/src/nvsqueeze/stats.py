"""Sample statistics shared by both engines.

Every engine reduces a realization to per-sample estimators of
``(Sx, Sy, Sz, SxSx, SySy, SzSz, {SySz}/2)``: one row per DTWA trajectory,
or one row per pure-state sample of a partially polarized initial state.
Independent realizations (disjoint patches of one large sample) combine by
adding means and covariances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exact import CollectiveMoments

N_EST = 7
FIELDS = ("sx", "sy", "sz", "sx2", "sy2", "sz2", "syz")


@dataclass
class TrajectoryStats:
    """Mergeable sums of the per-sample estimator vectors."""

    n: int
    count: int = 0
    total: np.ndarray = field(default_factory=lambda: np.zeros(N_EST))
    gram: np.ndarray = field(default_factory=lambda: np.zeros((N_EST, N_EST)))

    @classmethod
    def from_samples(cls, n, v) -> TrajectoryStats:
        v = np.atleast_2d(np.asarray(v, dtype=float))
        return cls(n, len(v), v.sum(axis=0), v.T @ v)

    @classmethod
    def from_moments(cls, items) -> TrajectoryStats:
        items = list(items)
        v = np.array([[getattr(m, f) for f in FIELDS] for m in items])
        return cls.from_samples(items[0].n, v)

    def merge(self, other: TrajectoryStats) -> TrajectoryStats:
        return TrajectoryStats(self.n, self.count + other.count, self.total + other.total, self.gram + other.gram)

    @property
    def mean(self) -> np.ndarray:
        return self.total / self.count

    @property
    def cov_of_mean(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros((N_EST, N_EST))
        mu = self.mean
        c = (self.gram - self.count * np.outer(mu, mu)) / (self.count - 1)
        return c / self.count

    def moments(self) -> CollectiveMoments:
        return CollectiveMoments(self.n, *map(float, self.mean))

    def stderr(self) -> dict:
        se = np.sqrt(np.clip(np.diag(self.cov_of_mean), 0, None))
        return dict(zip(FIELDS, map(float, se)))

    def var_theta(self, theta):
        return combined_var_theta([self], theta)

    def min_variance(self):
        return combined_min_variance([self])


def combine_moments(parts) -> CollectiveMoments:
    """Moments of the union of independent subsystems."""
    parts = list(parts)
    ms = [p.moments() if isinstance(p, TrajectoryStats) else p for p in parts]
    n = sum(m.n for m in ms)
    sx, sy, sz = (sum(getattr(m, f) for m in ms) for f in ("sx", "sy", "sz"))
    cxx = sum(m.sx2 - m.sx**2 for m in ms)
    cyy = sum(m.sy2 - m.sy**2 for m in ms)
    czz = sum(m.sz2 - m.sz**2 for m in ms)
    cyz = sum(m.syz - m.sy * m.sz for m in ms)
    return CollectiveMoments(n, sx, sy, sz, cxx + sx**2, cyy + sy**2, czz + sz**2, cyz + sy * sz)


def combined_sx(parts) -> tuple[float, float]:
    """Total <Sx> and its Monte Carlo standard error."""
    val = sum(float(p.mean[0]) for p in parts)
    err = math.sqrt(sum(float(p.cov_of_mean[0, 0]) for p in parts))
    return val, err


def _var_grad(v, th):
    c, s = math.cos(th), math.sin(th)
    mean_t = c * v[2] + s * v[1]
    val = c * c * v[5] + s * s * v[4] + 2 * s * c * v[6] - mean_t**2
    grad = np.zeros(N_EST)
    grad[5], grad[4], grad[6] = c * c, s * s, 2 * s * c
    grad[2] -= 2 * mean_t * c
    grad[1] -= 2 * mean_t * s
    return val, grad


def combined_var_theta(parts, theta):
    """Var(S_theta) of the union and its standard error (delta method)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    vals = np.zeros(len(theta))
    errs2 = np.zeros(len(theta))
    for p in parts:
        for k, th in enumerate(theta):
            val, grad = _var_grad(p.mean, th)
            vals[k] += val
            errs2[k] += max(grad @ p.cov_of_mean @ grad, 0.0)
    return vals, np.sqrt(errs2)


def combined_min_variance(parts):
    """Minimal Var(S_theta) of the union, its standard error and the angle."""
    vmin, th = combine_moments(parts).min_variance()
    _, err = combined_var_theta(parts, th)
    return vmin, float(err[0]), th


def tree_reduce(items, merge):
    """Pairwise reduction in a fixed order (independent of worker count)."""
    items = list(items)
    if not items:
        raise ValueError("nothing to reduce")
    while len(items) > 1:
        nxt = [merge(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]
