"""Interpolated time for the 1/(k+1) step-size schedule.

Step k of the chain sits at time ``t_k = sum_{j=1}^k 1/(j+1)``, so ``t_k`` is
``H_{k+1} - 1`` with ``H`` the harmonic numbers. The helpers here convert
between steps and interpolated time and measure how fast the weight
``psi_e(t_n - s) / n`` approaches the discount ``exp(-s)``.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ValidationError

EULER_GAMMA = 0.57721566490153286060651209008240243


@lru_cache(maxsize=4)
def _harmonic_block(n: int) -> np.ndarray:
    """``H_0 .. H_n`` with compensated summation (read-only array)."""
    out = np.empty(n + 1)
    out[0] = 0.0
    total = 0.0
    comp = 0.0
    for j in range(1, n + 1):
        y = 1.0 / j - comp
        t = total + y
        comp = (t - total) - y
        total = t
        out[j] = total
    out.setflags(write=False)
    return out


def harmonic_numbers(n: int) -> np.ndarray:
    """Harmonic numbers ``H_0 .. H_n`` accurate to a few ulps."""
    if n < 0:
        raise ValidationError("n is nonnegative", f"got {n}")
    return _harmonic_block(int(n))


@dataclass(frozen=True)
class TimeGrid:
    """Cached interpolated times ``t_0 .. t_n``."""

    n: int
    times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("grid size n is a positive integer", f"got {self.n}")
        # Extra room so that t_{n+1} is available for the interval searches.
        h = harmonic_numbers(self.n + 2)
        times = h[1 : self.n + 3] - 1.0
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def horizon(self) -> float:
        return float(self.times[self.n])


def t_of(grid: TimeGrid, k: int) -> float:
    if not 0 <= k <= grid.n:
        raise ValidationError("step index lies in [0, n]", f"got {k} for n={grid.n}")
    return float(grid.times[k])


def m_of(grid: TimeGrid, s: float) -> int:
    """Largest k with ``t_k <= s``."""
    if s < 0 or s > grid.times[grid.n]:
        raise ValidationError("time lies in [0, t_n]", f"got {s} for t_n={grid.times[grid.n]}")
    return bisect.bisect_right(grid.times[: grid.n + 1], s) - 1


def a_of(grid: TimeGrid, s: float) -> float:
    return float(grid.times[m_of(grid, s)])


def psi_e(grid: TimeGrid, t: float) -> int:
    """Weight ``k + 2`` on ``[t_k, t_{k+1})``."""
    return m_of(grid, t) + 2


def psi_limit_gap(n: int, t: float) -> float:
    """``sup_{s in [0, t]} |psi_e(t_n - s) / n - exp(-s)|``, computed exactly.

    For ``s`` in ``(t_n - t_{k+1}, t_n - t_k]`` the weight is the constant
    ``k + 2`` while ``exp(-s)`` is monotone, so the supremum over each piece
    is reached at (or approached towards) one of its two ends.
    """
    grid = TimeGrid(n)
    tn = grid.horizon
    if t < 0 or t >= tn:
        raise ValidationError("gap horizon lies in [0, t_n)", f"got t={t}, t_n={tn}")
    times = grid.times
    k_lo = m_of(grid, tn - t)
    ks = np.arange(k_lo, n)
    # piece k covers s in (tn - t_{k+1}, tn - t_k], clipped to [0, t]
    s_hi = np.minimum(tn - times[ks], t)
    s_lo = np.maximum(tn - times[ks + 1], 0.0)
    weight = (ks + 2) / n
    gaps = np.maximum(np.abs(weight - np.exp(-s_hi)), np.abs(weight - np.exp(-s_lo)))
    at_zero = abs((n + 2) / n - 1.0)
    return float(max(at_zero, gaps.max(initial=0.0)))


def euler_mascheroni_brackets(n: int) -> np.ndarray:
    """Boolean array over k = 2..n: does ``H_k - log k`` sit in its bracket?"""
    h = harmonic_numbers(n)
    k = np.arange(2, n + 1, dtype=float)
    diff = h[2:] - np.log(k)
    return (EULER_GAMMA + 1 / (2 * (k + 1)) < diff) & (diff < EULER_GAMMA + 1 / (2 * (k - 1)))


def psi_normalization(n: int) -> float:
    """``n^{-1} sum_{k<n} (k + 2)(t_{k+1} - t_k)``, which equals one."""
    grid = TimeGrid(n)
    ks = np.arange(n)
    return float(np.sum((ks + 2) * np.diff(grid.times[: n + 1])) / n)
