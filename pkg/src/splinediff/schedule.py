"""Noise schedule of the forward Ornstein-Uhlenbeck process.

The forward process is dX_t = -beta_t X_t dt + sqrt(2 beta_t) dB_t, so

    m_t     = exp(-int_0^t beta_s ds)
    sigma_t = sqrt(1 - exp(-2 int_0^t beta_s ds))

and X_t | X_0 ~ N(m_t X_0, sigma_t^2 I_d).  This module owns beta_t, the
derived (m_t, sigma_t) pair, and the time grids used by training and
sampling.  Everything is immutable after construction and safe for
concurrent reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BetaSchedule",
    "NoiseState",
    "TimeGrid",
    "noise_state",
    "geometric_grid",
    "uniform_grid",
    "hybrid_grid",
]


@dataclass(frozen=True)
class BetaSchedule:
    """Weighting function beta_t, either constant or polynomial in t.

    ``coefficients`` are the polynomial coefficients (c_0, c_1, ...) of
    beta_t = sum_i c_i t^i; the constant kind is the single-coefficient
    special case.  beta must stay inside [beta_lo, beta_hi] on [0, horizon],
    which is checked on a dense grid at construction.
    """

    kind: str = "constant"
    coefficients: tuple[float, ...] = (1.0,)
    beta_lo: float = 1.0
    beta_hi: float = 1.0
    horizon: float = 50.0

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant" and len(self.coefficients) != 1:
            raise ValueError("constant schedule takes exactly one coefficient")
        if not (0.0 < self.beta_lo <= self.beta_hi):
            raise ValueError("need 0 < beta_lo <= beta_hi")
        ts = np.linspace(0.0, self.horizon, 2001)
        vals = self.beta(ts)
        tol = 1e-9 * max(1.0, self.beta_hi)
        if vals.min() < self.beta_lo - tol or vals.max() > self.beta_hi + tol:
            raise ValueError(
                f"beta_t leaves [{self.beta_lo}, {self.beta_hi}] on [0, {self.horizon}]"
            )

    def beta(self, t):
        """beta_t, vectorized over t."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for i, c in enumerate(self.coefficients):
            out = out + c * t**i
        return out

    def beta_integral(self, t):
        """int_0^t beta_s ds, evaluated analytically from the coefficients."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for i, c in enumerate(self.coefficients):
            out = out + c * t ** (i + 1) / (i + 1)
        return out


@dataclass(frozen=True)
class NoiseState:
    """(m_t, sigma_t) at one time; m^2 + sigma^2 = 1 by construction."""

    t: float
    m: float
    sigma: float

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("t must be nonnegative")
        # m underflows to 0.0 for extreme t; that is the only exception to m > 0.
        if not (0.0 <= self.m <= 1.0 and 0.0 <= self.sigma < 1.0 + 1e-15):
            raise ValueError(f"invalid noise state m={self.m}, sigma={self.sigma}")


def noise_state(schedule: BetaSchedule, t: float) -> NoiseState:
    """Exact (m_t, sigma_t) of the OU transition kernel at time t."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    b = float(schedule.beta_integral(t))
    m = math.exp(-b)
    # -expm1 keeps sigma accurate for small t where 1 - e^{-2b} cancels.
    sigma = math.sqrt(-math.expm1(-2.0 * b))
    return NoiseState(t=float(t), m=m, sigma=sigma)


def m_sigma(schedule: BetaSchedule, t):
    """Vectorized (m_t, sigma_t) for an array of times."""
    b = schedule.beta_integral(np.asarray(t, dtype=float))
    m = np.exp(-b)
    sigma = np.sqrt(-np.expm1(-2.0 * b))
    return m, sigma


@dataclass(frozen=True)
class TimeGrid:
    """Ascending time knots on [t_lo, t_hi].

    kind is "uniform", "geometric", or "hybrid" (uniform bulk plus geometric
    refinement near t_lo; the sampler default).  Geometric grids keep the
    interior knot ratio in (1, 2].
    """

    t_lo: float
    t_hi: float
    knots: tuple[float, ...]
    kind: str = "uniform"
    ratio: float | None = None
    eta: float | None = None

    def __post_init__(self):
        if not (0 < self.t_lo < self.t_hi):
            raise ValueError("need 0 < t_lo < t_hi")
        k = np.asarray(self.knots, dtype=float)
        if k[0] != self.t_lo or k[-1] != self.t_hi:
            raise ValueError("knots must start at t_lo and end at t_hi")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        if self.kind == "geometric" and len(k) > 3:
            ratios = k[2:-1] / k[1:-2]
            if np.any(ratios <= 1.0) or np.any(ratios > 2.0 + 1e-12):
                raise ValueError("geometric grid needs interior ratios in (1, 2]")

    def __len__(self) -> int:
        return len(self.knots)

    def cells(self):
        """(t_k, t_{k+1}) pairs, ascending."""
        return list(zip(self.knots[:-1], self.knots[1:]))


def geometric_grid(t_lo: float, t_hi: float, t_first: float, ratio: float) -> TimeGrid:
    """Knots {t_lo, t_first, t_first*ratio, ...} capped exactly at t_hi.

    The knot count is 2 + ceil(log_ratio(t_hi / t_first)); interval counts
    therefore grow only logarithmically in t_hi / t_first.
    """
    if not (0 < t_lo < t_first < t_hi):
        raise ValueError("need 0 < t_lo < t_first < t_hi")
    if not (1.0 < ratio <= 2.0):
        raise ValueError("ratio must lie in (1, 2]")
    knots = [float(t_lo)]
    t = float(t_first)
    while t < t_hi:
        knots.append(t)
        t *= ratio
    knots.append(float(t_hi))
    # drop a penultimate knot that landed exactly on (or within float dust of) t_hi
    if len(knots) >= 3 and knots[-2] >= t_hi * (1 - 1e-12):
        del knots[-2]
    return TimeGrid(t_lo=float(t_lo), t_hi=float(t_hi), knots=tuple(knots),
                    kind="geometric", ratio=float(ratio))


def uniform_grid(t_lo: float, t_hi: float, n_steps: int) -> TimeGrid:
    """n_steps equal cells on [t_lo, t_hi]."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    knots = np.linspace(t_lo, t_hi, n_steps + 1)
    knots[0], knots[-1] = t_lo, t_hi
    return TimeGrid(t_lo=float(t_lo), t_hi=float(t_hi), knots=tuple(knots),
                    kind="uniform", eta=(t_hi - t_lo) / n_steps)


def hybrid_grid(t_lo: float, t_hi: float, n_uniform: int, t_split: float,
                ratio: float = 2.0) -> TimeGrid:
    """Uniform cells on [t_split, t_hi] plus geometric refinement on [t_lo, t_split].

    Score stiffness concentrates at small t, so the sampler defaults to this
    union of the two plain kinds.
    """
    if not (t_lo < t_split < t_hi):
        raise ValueError("need t_lo < t_split < t_hi")
    geo = geometric_grid(t_lo, t_split, t_lo * ratio, ratio)
    uni = np.linspace(t_split, t_hi, n_uniform + 1)
    knots = tuple(geo.knots) + tuple(uni[1:])
    return TimeGrid(t_lo=float(t_lo), t_hi=float(t_hi), knots=knots, kind="hybrid",
                    ratio=float(ratio), eta=(t_hi - t_split) / n_uniform)
