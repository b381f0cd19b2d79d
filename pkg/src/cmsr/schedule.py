"""Discrete variance-preserving noise schedule and consistency-model scalings.

Timesteps are 1-based: ``t = 1 .. T`` index ``betas[t - 1]``. Index 0 is
clean data, where ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SIGMA_DATA = 0.5
TIMESTEP_SCALING = 10.0


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t):
        """Cumulative signal fraction at timestep(s) ``t``; ``t = 0`` gives 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ConfigError(f"timestep out of range [0, {self.T}]: {t}")
        padded = np.concatenate(([1.0], self.alpha_bars))
        out = padded[t]
        return float(out) if out.ndim == 0 else out

    def alpha(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep out of range [1, {self.T}]: {t}")
        return float(self.alphas[t - 1])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep out of range [1, {self.T}]: {t}")
        return float(self.betas[t - 1])


def linear_beta_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    betas = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    betas.setflags(write=False)
    alphas = 1.0 - betas
    alphas.setflags(write=False)
    alpha_bars = np.cumprod(alphas)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


@dataclass(frozen=True)
class TimestepMap:
    """Sub-sampled boundaries ``t_1 < ... < t_N`` with ``t_N == T``."""

    N: int
    boundaries: tuple[int, ...]

    def __getitem__(self, n: int) -> int:
        """1-based access: ``map[n]`` is ``t_n``."""
        if not 1 <= n <= self.N:
            raise IndexError(f"sub-sample index {n} outside [1, {self.N}]")
        return self.boundaries[n - 1]


def cd_timesteps(schedule: NoiseSchedule, N: int) -> TimestepMap:
    """Evenly spaced (half-up rounded) timesteps over [1, T], ending at T."""
    T = schedule.T
    if not 2 <= N <= T:
        raise ConfigError(f"need 2 <= N <= T, got N={N}, T={T}")
    raw = 1.0 + (T - 1) * np.arange(N, dtype=np.float64) / (N - 1)
    idx = _round_half_up(raw)
    idx[-1] = T
    if np.any(np.diff(idx) <= 0):
        raise ConfigError(f"N={N} produces duplicate timesteps over T={T}; choose a smaller N")
    return TimestepMap(N=N, boundaries=tuple(int(i) for i in idx))


def strided_timesteps(schedule: NoiseSchedule, stride: int) -> TimestepMap:
    """Every ``stride``-th timestep ending at T: ``[T - k*stride, ..., T]``."""
    if stride < 1 or stride > schedule.T:
        raise ConfigError(f"stride must be in [1, {schedule.T}], got {stride}")
    idx = list(range(schedule.T, 0, -stride))[::-1]
    return TimestepMap(N=len(idx), boundaries=tuple(idx))


@dataclass(frozen=True)
class BoundaryScalings:
    sigma_data: float = SIGMA_DATA
    timestep_scaling: float = TIMESTEP_SCALING


def cm_scalings(t, s: BoundaryScalings) -> tuple:
    """Skip/output weights for a consistency function at time ``t``.

    ``t`` is the continuous time (normalized timestep ``t/T`` in this
    package). Vectorizes over arrays. ``c_skip(0) == 1`` and
    ``c_out(0) == 0`` exactly.
    """
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < 0):
        raise ConfigError(f"time must be >= 0, got {t}")
    ts = tt * s.timestep_scaling
    sd2 = s.sigma_data * s.sigma_data
    c_skip = sd2 / (ts * ts + sd2)
    c_out = s.sigma_data * ts / np.sqrt(ts * ts + sd2)
    if tt.ndim == 0:
        return float(c_skip), float(c_out)
    return c_skip, c_out


def default_cm_step_times(T: int) -> list[int]:
    """``[T, T/2, T/5, T/20]`` rounded to valid, strictly decreasing indices."""
    times: list[int] = []
    for div in (1, 2, 5, 20):
        t = max(1, int(math.floor(T / div + 0.5)))
        if not times or t < times[-1]:
            times.append(t)
    return times
