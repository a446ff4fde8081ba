"""Waiting-time distributions and renewal-process sampling.

A waiting time is a probability density f on the positive reals with
survival probability ``g(t) = 1 - int_0^t f``.  Three kinds are supported:
exponential, Erlang, and a tabulated density on a uniform grid.  Built-in
kinds carry closed-form Laplace transforms; tabulated ones fall back to
quadrature.  Deterministic (Dirac) waiting times are deliberately excluded,
the integral-equation solvers need f as a function.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

TABULATED_NORM_TOL = 1e-6


@dataclass(frozen=True)
class Trajectory:
    """Ordered jump times inside a finite horizon."""

    horizon: float
    jump_times: tuple[float, ...] = ()

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon < 0:
            raise ValueError("horizon must be a finite non-negative real")
        times = tuple(float(t) for t in self.jump_times)
        for a, b in zip(times, times[1:]):
            if not a < b:
                raise ValueError("jump times must be strictly increasing")
        if times and not (0.0 < times[0] and times[-1] < self.horizon):
            raise ValueError("jump times must lie strictly inside (0, horizon)")
        object.__setattr__(self, "jump_times", times)

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)


class WaitingTime:
    """Base interface: pdf, survival, Laplace transform of the pdf, sampling."""

    def pdf(self, t: float) -> float:
        raise NotImplementedError

    def survival(self, t: float) -> float:
        raise NotImplementedError

    def laplace_pdf(self, u: complex) -> complex:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> float:
        raise NotImplementedError

    @property
    def density_at_zero(self) -> float:
        return self.pdf(0.0)

    def _check_time(self, t: float) -> float:
        t = float(t)
        if not np.isfinite(t) or t < 0:
            raise ValueError("time must be a finite non-negative real")
        return t


class Exponential(WaitingTime):
    def __init__(self, rate: float):
        if not rate > 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)

    def pdf(self, t):
        t = self._check_time(t)
        return self.rate * math.exp(-self.rate * t)

    def survival(self, t):
        t = self._check_time(t)
        return math.exp(-self.rate * t)

    def laplace_pdf(self, u):
        u = complex(u)
        if u.real <= -self.rate:
            raise ValueError("Laplace transform diverges for Re(u) <= -rate")
        return self.rate / (u + self.rate)

    def sample(self, rng):
        return float(rng.exponential(1.0 / self.rate))

    def __repr__(self):
        return f"Exponential(rate={self.rate})"


class Erlang(WaitingTime):
    def __init__(self, shape: int, rate: float):
        if int(shape) != shape or shape < 1:
            raise ValueError("shape must be a positive integer")
        if not rate > 0:
            raise ValueError("rate must be positive")
        self.shape = int(shape)
        self.rate = float(rate)

    def pdf(self, t):
        t = self._check_time(t)
        k, lam = self.shape, self.rate
        return lam**k * t ** (k - 1) * math.exp(-lam * t) / math.factorial(k - 1)

    def survival(self, t):
        t = self._check_time(t)
        lam_t = self.rate * t
        acc = 0.0
        term = 1.0
        for j in range(self.shape):
            if j > 0:
                term *= lam_t / j
            acc += term
        return acc * math.exp(-lam_t)

    def laplace_pdf(self, u):
        u = complex(u)
        if u.real <= -self.rate:
            raise ValueError("Laplace transform diverges for Re(u) <= -rate")
        return (self.rate / (u + self.rate)) ** self.shape

    def sample(self, rng):
        return float(rng.gamma(self.shape, 1.0 / self.rate))

    def __repr__(self):
        return f"Erlang(shape={self.shape}, rate={self.rate})"


class Tabulated(WaitingTime):
    """Density sampled on a uniform grid starting at zero.

    f is linearly interpolated between nodes and zero beyond the last node;
    the survival is the exact integral of that interpolant.  The tabulated
    density must integrate to one within 1e-6 (trapezoid rule) or the
    constructor rejects it; ``check_normalization=False`` skips that gate so
    diagnostic tooling can inspect bad tables.
    """

    def __init__(self, times, density, check_normalization: bool = True):
        times = np.asarray(times, dtype=float)
        density = np.asarray(density, dtype=float)
        if times.ndim != 1 or times.shape != density.shape or times.size < 2:
            raise ValueError("times and density must be equal-length 1-D arrays with >= 2 nodes")
        if times[0] != 0.0:
            raise ValueError("tabulated grid must start at t = 0")
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise ValueError("tabulated grid must be strictly increasing")
        if np.max(np.abs(steps - steps[0])) > 1e-9 * steps[0]:
            raise ValueError("tabulated grid must be uniformly spaced")
        if np.any(density < -1e-12):
            raise ValueError("tabulated density must be non-negative")
        density = np.clip(density, 0.0, None)
        total = float(np.trapezoid(density, times))
        if check_normalization and abs(total - 1.0) > TABULATED_NORM_TOL:
            raise ValueError(f"tabulated density integrates to {total:.8f}, not 1")
        self.times = times
        self.density = density
        self.step = float(steps[0])
        # cumulative trapezoid of f gives the exact survival at the nodes
        cum = np.concatenate([[0.0], np.cumsum((density[1:] + density[:-1]) / 2.0 * self.step)])
        self._survival_nodes = np.clip(1.0 - cum, 0.0, 1.0)

    @classmethod
    def from_csv(cls, path, **kwargs) -> "Tabulated":
        """Load a two-column CSV of (t, f) rows; a non-numeric header row is skipped."""
        times = []
        density = []
        with open(path, newline="") as handle:
            for row in csv.reader(handle):
                if not row or not row[0].strip():
                    continue
                try:
                    t, f = float(row[0]), float(row[1])
                except (ValueError, IndexError):
                    if not times:
                        continue
                    raise ValueError(f"malformed CSV row in {path}: {row!r}")
                times.append(t)
                density.append(f)
        return cls(times, density, **kwargs)

    def pdf(self, t):
        t = self._check_time(t)
        if t >= self.times[-1]:
            return 0.0
        return float(np.interp(t, self.times, self.density))

    def survival(self, t):
        t = self._check_time(t)
        if t >= self.times[-1]:
            return float(self._survival_nodes[-1])
        idx = int(t / self.step)
        idx = min(idx, self.times.size - 2)
        delta = t - self.times[idx]
        f0 = self.density[idx]
        slope = (self.density[idx + 1] - f0) / self.step
        cell = f0 * delta + 0.5 * slope * delta * delta
        return float(min(max(self._survival_nodes[idx] - cell, 0.0), 1.0))

    def laplace_pdf(self, u):
        u = complex(u)
        return complex(np.trapezoid(np.exp(-u * self.times) * self.density, self.times))

    def sample(self, rng):
        u = rng.random()
        tail = float(self._survival_nodes[-1])
        if u <= tail:
            return math.inf  # residual mass beyond the table: no event in any finite horizon
        lo, hi = 0.0, float(self.times[-1])
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.survival(mid) > u:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-13 * max(1.0, self.times[-1]):
                break
        return 0.5 * (lo + hi)

    @property
    def density_at_zero(self) -> float:
        return float(self.density[0])

    def __repr__(self):
        return f"Tabulated(nodes={self.times.size}, t_max={self.times[-1]})"


def sample_renewal(wait: WaitingTime, horizon: float, rng: np.random.Generator,
                   direction: str = "forward") -> Trajectory:
    """Sample a renewal trajectory on [0, horizon].

    ``forward`` accumulates i.i.d. waits from time zero (conventional renewal
    ordering, survival weight on the last interval).  ``reverse`` accumulates
    the waits backward from the horizon, so the survival weight sits on the
    first interval; this is the ordering under which the trajectory-series
    solvers weight their chains.
    """
    horizon = float(horizon)
    if not np.isfinite(horizon) or horizon < 0:
        raise ValueError("horizon must be a finite non-negative real")
    if direction not in ("forward", "reverse"):
        raise ValueError("direction must be 'forward' or 'reverse'")
    times: list[float] = []
    if direction == "forward":
        pos = 0.0
        while True:
            pos += wait.sample(rng)
            if pos >= horizon:
                break
            times.append(pos)
    else:
        pos = horizon
        while True:
            pos -= wait.sample(rng)
            if pos <= 0.0:
                break
            times.append(pos)
        times.reverse()
    return Trajectory(horizon, tuple(times))


def trajectory_density(wait: WaitingTime, traj: Trajectory) -> float:
    """Joint density of a reverse-ordered renewal trajectory.

    The survival factor sits on the first interval and pdf factors on every
    later interval including the last:
    ``f(t - t_n) ... f(t_2 - t_1) g(t_1)``, with the no-jump value ``g(t)``.
    """
    times = traj.jump_times
    if not times:
        return wait.survival(traj.horizon)
    value = wait.survival(times[0])
    for a, b in zip(times, times[1:]):
        value *= wait.pdf(b - a)
    value *= wait.pdf(traj.horizon - times[-1])
    return value
