"""From an optimized control to a phase schedule for the controlled simulator.

The pipeline regularizes a forward control path in four steps:

1. :func:`mix_with_fixed_point` blends it with the stationary control at
   the fixed point, which bounds every pair control away from zero;
2. :func:`time_reverse` runs it backwards from its end point;
3. :func:`mollify` replaces it by a moving average;
4. :func:`piecewise_const` holds it constant on blocks of length ``c``.

:func:`build_schedule` then compiles the result into a
:class:`ControlSchedule`: the phase parameters, the calibrated ergodic
thresholds and the error constants, ready for
:func:`~selfinteract.simulate.run_controlled`.

The smoothing parameters can be chosen by :func:`choose_kappas`, which solves
the scalar inequalities that make each step cost at most a prescribed
``epsilon``. Those values are typically far below any practical grid step,
so :func:`approximate_control` reports them and uses the grid step as the
floor for the block length.
"""

from __future__ import annotations

import bisect
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConvergenceError, InfeasibleError, ValidationError
from .measures import disintegrate, l1, prob_vec
from .model import ModelSpec, eval_kernel, fixed_point_residual, is_irreducible
from .rate import ControlPath, _affine_kernel, discretized_cost, ipf_project
from .rng import UniformStream
from .simulate import run_chain
from .timescale import harmonic_numbers

FIXED_POINT_TOL = 1e-8
STATIONARITY_TOL = 1e-10

# substream tags for calibration pre-runs, far from those of controlled runs
_TAG_CAL_Q = 1 << 20
_TAG_CAL_BLOCK = 1 << 21
_TAG_CAL_BLOCK_FROM = 1 << 22
_STREAM_CAL_WARMUP = 1 << 40


# ---------------------------------------------------------------------------
# path transformations


def fixed_point_pair(model: ModelSpec, pistar) -> np.ndarray:
    """The stationary pair control ``pi*(x) G(pi*)(x, y)``; ``pi*`` must be a fixed point."""
    pistar = prob_vec(pistar, model.d, name="pistar")
    residual = fixed_point_residual(model, pistar)
    if residual > FIXED_POINT_TOL:
        raise ValidationError("pistar is a fixed point within 1e-8", f"residual {residual:.3e}")
    return pistar[:, None] * eval_kernel(model, pistar)


def fixed_point_floor(model: ModelSpec, pistar) -> float:
    """Smallest entry of the fixed-point pair control on the adjacency support."""
    pair = fixed_point_pair(model, pistar)
    return float(pair[model.adjacency.mask].min())


def _from_pairs(T: float, pairs: np.ndarray, start, direction: str) -> ControlPath:
    kernels = np.empty_like(pairs)
    stationary = np.empty(pairs.shape[:2])
    for j, eta in enumerate(pairs):
        stationary[j], kernels[j] = disintegrate(eta)
    return ControlPath(T, kernels, stationary, start, direction)


def mix_with_fixed_point(path: ControlPath, pistar, model: ModelSpec, kappa: float) -> ControlPath:
    """Convex combination ``(1 - kappa) path + kappa * (constant control at pi*)``.

    The dynamics are affine in the control and in the start point, so the
    mixed trajectory is exactly ``(1 - kappa) M + kappa pi*``.
    """
    if not 0 < kappa <= 1:
        raise ValidationError("mixing weight kappa lies in (0, 1]", f"got {kappa}")
    star = fixed_point_pair(model, pistar)
    pistar = star.sum(axis=1)
    pairs = (1 - kappa) * path.pair_controls + kappa * star[None]
    start = (1 - kappa) * path.start + kappa * pistar
    return _from_pairs(path.T, pairs, start, path.direction)


def time_reverse(path: ControlPath, endpoint=None) -> ControlPath:
    """Reverse the order of the controls and run the other dynamics from ``endpoint``.

    ``endpoint`` defaults to the path's end. Reversing twice restores the
    original controls and direction; threading the end point through, the
    reversed trajectory is the original one read backwards.
    """
    if endpoint is None:
        endpoint = path.end
        if endpoint.min() < 0:
            endpoint = np.maximum(endpoint, 0.0)
            endpoint = endpoint / endpoint.sum()
    else:
        endpoint = prob_vec(endpoint, path.d, name="endpoint")
    direction = "reversed" if path.direction == "forward" else "forward"
    return ControlPath(path.T, path.kernels[::-1].copy(), path.stationary[::-1].copy(), endpoint, direction)


def _overlap_integral(a: float, b: float, lo: float, hi: float, width: float) -> float:
    """``int_a^b |[lo, hi] cap [u - width, u]| du``, exact (the integrand is piecewise linear)."""

    def overlap(u: float) -> float:
        return max(0.0, min(hi, u) - max(lo, u - width))

    points = sorted({a, b} | {p for p in (lo, hi, lo + width, hi + width) if a < p < b})
    return sum(0.5 * (q - p) * (overlap(p) + overlap(q)) for p, q in zip(points, points[1:]))


def mollifier_weights(N: int, h: float, kappa: float) -> np.ndarray:
    """Matrix ``W`` with ``W[j, i]`` the weight of step ``i`` in the cell average of step ``j``.

    Row ``j`` averages the moving mean ``kappa^{-1} int_s^{s+kappa}`` over
    ``s`` in cell ``j``; values past the horizon repeat the last step.
    """
    weights = np.zeros((N, N))
    if kappa <= h:
        # closed form; the general quadrature cancels catastrophically for kappa << h
        tail = kappa / (2 * h)
        idx = np.arange(N - 1)
        weights[idx, idx] = 1 - tail
        weights[idx, idx + 1] = tail
        weights[N - 1, N - 1] = 1.0
        return weights
    for j in range(N):
        lo, hi = j * h, (j + 1) * h
        i = j
        while i * h < hi + kappa:
            w = _overlap_integral(i * h, (i + 1) * h, lo, hi, kappa) / (h * kappa)
            weights[j, min(i, N - 1)] += w
            i += 1
    return weights


def mollify(path: ControlPath, kappa: float) -> ControlPath:
    """Moving-average smoothing over a window ``kappa``, stored as exact cell averages."""
    if not 0 < kappa < path.T:
        raise ValidationError("mollifier width kappa lies in (0, T)", f"got {kappa}")
    weights = mollifier_weights(path.N, path.h, kappa)
    pairs = np.einsum("ji,ixy->jxy", weights, path.pair_controls)
    return _from_pairs(path.T, pairs, path.start, path.direction)


def moving_average_at(path: ControlPath, kappa: float, s: float) -> np.ndarray:
    """Pointwise ``kappa^{-1} int_s^{s+kappa} eta(u) du`` with the last control held past ``T``."""
    pairs = path.pair_controls
    h = path.h
    total = np.zeros_like(pairs[0])
    i = int(math.floor(s / h))
    while i * h < s + kappa:
        overlap = min((i + 1) * h, s + kappa) - max(i * h, s)
        if overlap > 0:
            total += overlap * pairs[min(i, path.N - 1)]
        i += 1
    return total / kappa


def _steps_per_block(path: ControlPath, c: float) -> int:
    ratio = c / path.h
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > 1e-6 * max(1.0, ratio):
        raise ValidationError("block length c is a positive multiple of the grid step", f"c={c}, h={path.h}")
    return steps


def piecewise_const(path: ControlPath, c: float) -> ControlPath:
    """Hold the control at its value at each block start ``j c``.

    The last block covers ``[floor(T/c) c, T]``. The block length must be a
    multiple of the path's grid step.
    """
    steps = _steps_per_block(path, c)
    sample = (np.arange(path.N) // steps) * steps
    return ControlPath(path.T, path.kernels[sample], path.stationary[sample], path.start, path.direction)


def time_lipschitz(path: ControlPath) -> float:
    """Largest l1 change of the pair control per unit time between consecutive steps."""
    if path.N < 2:
        return 0.0
    pairs = path.pair_controls
    return float(np.abs(np.diff(pairs, axis=0)).sum(axis=(1, 2)).max() / path.h)


def trajectory_deviation(a: ControlPath, b: ControlPath) -> float:
    """``max_j ||M_a(t_j) - M_b(t_j)||_1`` on a common grid."""
    if a.trajectory.shape != b.trajectory.shape:
        raise ValidationError("paths share a grid")
    return float(np.abs(a.trajectory - b.trajectory).sum(axis=1).max())


# ---------------------------------------------------------------------------
# smoothing parameters


def _largest_true(pred: Callable[[float], bool], upper: float) -> float:
    """Largest ``kappa`` in ``(0, upper]`` (to bisection accuracy) with ``pred`` true below it."""
    if pred(upper):
        return upper
    lo = upper
    while not pred(lo):
        lo *= 0.5
        if lo < 1e-300:
            raise InfeasibleError("a positive kappa satisfies the smoothing inequalities")
    hi = 2 * lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def solve_kappa_mix(epsilon: float, d: int, start_gap: float, floor_star: float, f_lip: float = 1.0) -> float:
    """Mixing weight keeping both the start shift and the extra cost within ``epsilon / 2``."""
    shift_cap = min(1.0 / f_lip, 1.0) * epsilon / 2

    def ok(k: float) -> bool:
        extra = (2 * k * (1 - k) + k * k) * d * (abs(math.log(k / 2)) + abs(math.log(floor_star)))
        return k * start_gap <= shift_cap and extra <= epsilon / 2

    return _largest_true(ok, 0.5 * (1 - 1e-12))


def solve_kappa_mollify(epsilon: float, T: float, delta: float, c1: float, lipschitz: float,
                        floor_m1: float, f_lip: float = 1.0) -> float:
    cap = min(epsilon / 2 * min(1.0, 1.0 / f_lip), epsilon / (2 * c1), delta / 2)

    def ok(k: float) -> bool:
        slack = 2 * c1 * lipschitz * k + k * (math.exp(1 - T) + 1) * abs(math.log(floor_m1))
        return 3 * k * math.exp(T) <= cap and slack < epsilon / 2

    return _largest_true(ok, T * (1 - 1e-12))


def solve_kappa_block(epsilon: float, T: float, delta: float, c1: float, lipschitz: float,
                      time_lip: float, f_lip: float = 1.0) -> float:
    cap = min(epsilon / 2 * min(1.0, 1.0 / f_lip), epsilon / (4 * c1), delta / 4)

    def ok(k: float) -> bool:
        slack = 2 * k * (2 * lipschitz + time_lip) * (2 * abs(math.log(c1)) + c1) + 4 * k * c1 * lipschitz
        return time_lip * k * T * math.exp(T) <= cap and slack <= epsilon

    return _largest_true(ok, T)


def horizon_for(epsilon: float, delta: float, delta0A: float, floor_m1: float) -> float:
    """Smallest ``T`` with ``exp(1 - T) max(|log(delta delta0A / 8)|, |log floor_m1|) <= epsilon``."""
    worst = max(abs(math.log(delta * delta0A / 8)), abs(math.log(floor_m1)))
    return 1.0 + math.log(worst / epsilon)


@dataclass(frozen=True)
class KappaChoice:
    kappa_mix: float
    kappa_mollify: float
    kappa_block: float | None
    delta: float
    floor_star: float
    floor_m1: float
    c1: float
    horizon_needed: float

    def as_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def choose_kappas(path: ControlPath, model: ModelSpec, pistar, epsilon: float = 0.05, f_lip: float = 1.0,
                  time_lip: float | None = None) -> KappaChoice:
    """Solve the smoothing inequalities for a forward path.

    ``time_lip`` is the time-Lipschitz constant of the mollified path; the
    block length is solved only when it is supplied.
    """
    if epsilon <= 0:
        raise ValidationError("epsilon is positive", f"got {epsilon}")
    floor_star = fixed_point_floor(model, pistar)
    pistar = prob_vec(pistar, model.d)
    k1 = solve_kappa_mix(epsilon, model.d, l1(path.start, pistar), floor_star, f_lip)
    delta = k1 * floor_star
    floor_m1 = k1 * k1 * floor_star
    c1 = 2.0 / (delta * delta * model.delta0A)
    k2 = solve_kappa_mollify(epsilon, path.T, delta, c1, model.lipschitz_bound, floor_m1, f_lip)
    k3 = None
    if time_lip is not None:
        k3 = solve_kappa_block(epsilon, path.T, delta, c1, model.lipschitz_bound, max(time_lip, 1e-300), f_lip)
    return KappaChoice(k1, k2, k3, delta, floor_star, floor_m1, c1, horizon_for(epsilon, delta, model.delta0A, floor_m1))


@dataclass(frozen=True)
class Approximation:
    """Every stage of the pipeline with its cost and the diagnostics of each step."""

    original: ControlPath
    mixed: ControlPath
    reversed: ControlPath
    mollified: ControlPath
    blocked: ControlPath
    kappa_mix: float
    kappa_mollify: float
    block_length: float
    theory: KappaChoice
    costs: dict[str, float]
    diagnostics: dict[str, Any] = field(default_factory=dict)


def approximate_control(path: ControlPath, model: ModelSpec, pistar, epsilon: float = 0.05, *,
                        f_lip: float = 1.0, kappa_mix: float | None = None,
                        kappa_mollify: float | None = None, block_length: float | None = None) -> Approximation:
    """Run mix, reverse, mollify and blocking on a forward path.

    Unset parameters come from :func:`choose_kappas`; the block length is then
    rounded down to a multiple of the grid step, but never below one step.
    """
    if path.direction != "forward":
        raise ValidationError("pipeline input runs forward in time")
    theory = choose_kappas(path, model, pistar, epsilon, f_lip)
    k1 = theory.kappa_mix if kappa_mix is None else kappa_mix
    mixed = mix_with_fixed_point(path, pistar, model, k1)
    backwards = time_reverse(mixed)
    k2 = min(theory.kappa_mollify, path.T / 2) if kappa_mollify is None else kappa_mollify
    smooth = mollify(backwards, k2)
    time_lip = time_lipschitz(smooth)
    theory = choose_kappas(path, model, pistar, epsilon, f_lip, time_lip=time_lip)
    if block_length is None:
        block_length = path.h * max(1, math.floor((theory.kappa_block or 0.0) / path.h))
    blocked = piecewise_const(smooth, block_length)

    def cost(p: ControlPath) -> float:
        return discretized_cost(p, p.trajectory, model)

    costs = {
        "original": cost(path),
        "mixed": cost(mixed),
        "reversed": cost(backwards),
        "mollified": cost(smooth),
        "blocked": cost(blocked),
    }
    lg = model.lipschitz_bound
    T = path.T
    diagnostics = {
        "mix_cost_bound": (1 - k1) ** 2 * costs["original"]
        + (2 * k1 * (1 - k1) + k1 * k1) * model.d * (abs(math.log(k1 / 2)) + abs(math.log(theory.floor_star))),
        "mix_within_epsilon": costs["mixed"] <= costs["original"] + epsilon,
        "mollify_within_slack": costs["mollified"] <= costs["reversed"] + (4 + lg) * epsilon,
        "block_within_slack": costs["blocked"] <= costs["mollified"] + (2 + 2 * lg) * epsilon,
        "mollify_deviation": trajectory_deviation(smooth, backwards),
        "mollify_deviation_bound": 3 * k2 * math.exp(T),
        "time_lipschitz": time_lip,
        "block_deviation": trajectory_deviation(blocked, smooth),
        "block_deviation_bound": time_lip * block_length * T * math.exp(T),
        "min_pair_on_support": float(blocked.pair_controls[:, model.adjacency.mask].min()),
        "min_trajectory": float(blocked.trajectory.min()),
    }
    return Approximation(path, mixed, backwards, smooth, blocked, k1, k2, block_length, theory, costs, diagnostics)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScheduleConfig:
    """User choices for :func:`build_schedule`; unset values get documented defaults.

    ``r1`` defaults to ``10 d`` and ``a_star`` to ``1 / (2 d r1)``; ``k1`` to
    ``k0 + floor(4 (r1 + 1) / eps0) + 1``; ``block_length`` to the path's
    grid step.
    """

    eps0: float = 0.05
    eps1: float = 0.05
    epsilon: float = 0.05
    f_lip: float = 1.0
    r1: int | None = None
    a_star: float | None = None
    k1: int | None = None
    block_length: float | None = None
    x0: int = 0
    calibration_reps: int = 400
    calibration_steps: int = 20_000
    max_calibration_steps: int = 320_000
    calibration_seed: int = 0

    def __post_init__(self):
        for name in ("eps0", "eps1", "epsilon", "f_lip"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} is positive", f"got {getattr(self, name)}")
        if self.eps1 >= 1:
            raise ValidationError("eps1 lies in (0, 1)", f"got {self.eps1}")
        if self.calibration_reps < 1 or self.calibration_steps < 2:
            raise ValidationError("calibration sizes are positive")


@dataclass(frozen=True)
class ControlSchedule:
    """Phase parameters of a controlled run.

    ``controlled=False`` marks the schedule that never intervenes; all other
    fields are then placeholders.
    """

    controlled: bool
    d: int
    T: float = 0.0
    c: float = 1.0
    l0: int = 0
    Q: np.ndarray | None = None
    q: np.ndarray | None = None
    betas: np.ndarray | None = None
    first_marginals: np.ndarray | None = None
    conditionals: np.ndarray | None = None
    eps0: float = 0.05
    eps1: float = 0.05
    r1: int = 0
    a_star: float = 0.0
    k0: int = 0
    k1: int = 0
    k_star: int = 0
    delta: float = 0.0
    minimum_n: int = 1
    target: np.ndarray | None = None
    planned_cost: float = 0.0
    constants: dict[str, float] = field(default_factory=dict)
    conditions: dict[str, Any] = field(default_factory=dict)
    calibration: dict[str, Any] = field(default_factory=dict)
    path: ControlPath | None = field(default=None, repr=False)

    @classmethod
    def never(cls, d: int) -> ControlSchedule:
        return cls(controlled=False, d=d)

    def as_dict(self) -> dict[str, Any]:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "controlled": self.controlled,
            "d": self.d,
            "T": self.T,
            "c": self.c,
            "l0": self.l0,
            "Q": arr(self.Q),
            "q": arr(self.q),
            "betas": arr(self.betas),
            "eps0": self.eps0,
            "eps1": self.eps1,
            "r1": self.r1,
            "a_star": self.a_star,
            "k0": self.k0,
            "k1": self.k1,
            "k_star": self.k_star,
            "delta": self.delta,
            "minimum_n": self.minimum_n,
            "target": arr(self.target),
            "planned_cost": self.planned_cost,
            "constants": dict(self.constants),
            "conditions": dict(self.conditions),
            "calibration": dict(self.calibration),
        }

    def beta_rows(self) -> list[tuple[int, int, int, float, float]]:
        """``(j, x, y, beta_j(x, y), beta_j(y | x))`` for every block and pair."""
        rows = []
        if self.betas is None:
            return rows
        for j, beta in enumerate(self.betas):
            for x in range(self.d):
                for y in range(self.d):
                    rows.append((j, x, y, float(beta[x, y]), float(self.conditionals[j][x, y])))
        return rows


def error_constants(c: float, l0: int, delta: float, delta0A: float) -> dict[str, float]:
    """Constants that scale the tracking error and cost slack of a schedule."""
    b1 = 4 + c
    d1 = math.exp(c) * (12 + c)
    d2 = 6.0
    d3 = d1 + l0 * b1 * math.exp(c)
    d4 = 2.0**l0 * (3 + d2)
    delta1 = delta * delta0A / 8
    log_d1 = abs(math.log(delta1))
    return {
        "b1": b1,
        "d1": d1,
        "d2": d2,
        "d3": d3,
        "d4": d4,
        "delta1": delta1,
        "A1": log_d1 + (2 + d3) / delta1,
        "B1": 2 * d4 / delta1,
        "C1": log_d1 * (l0 + 3) ** 2,
    }


def schedule_conditions(consts: dict[str, float], c: float, l0: int, delta: float, eps0: float, eps1: float,
                        epsilon: float, f_lip: float) -> dict[str, Any]:
    """Whether ``eps0`` and ``eps1`` are small enough for the error bounds to reach ``epsilon``."""
    tracking = f_lip * (consts["d3"] * eps0 + 2 * consts["d4"] * eps1)
    cost = consts["C1"] * eps1 + (l0 + 1) * (consts["A1"] * eps0 + consts["B1"] * eps1)
    return {
        "eps0_small": eps0 < min(c, delta / 16),
        "tracking_bound": tracking,
        "tracking_ok": tracking <= epsilon,
        "cost_slack": cost,
        "cost_ok": cost <= epsilon,
        "all_hold": eps0 < min(c, delta / 16) and tracking <= epsilon and cost <= epsilon,
    }


def first_block_step(n: int, T: float) -> int:
    """``m(t_n - T)``, the step at which the last ``T`` units of time begin."""
    h = harmonic_numbers(n + 1)
    times = h[1 : n + 2] - 1.0
    tn = times[n]
    if tn <= T:
        return -1
    return bisect.bisect_right(times[: n + 1], tn - T) - 1


def minimum_n(T: float, c: float, k0: int, k_star: int, r1: int, eps0: float, limit: int = 10**9) -> int:
    """Smallest ``n`` whose first block step ``m_0`` leaves room for every earlier phase."""

    def ok(n: int) -> bool:
        m0 = first_block_step(n, T)
        return (
            m0 > k0 + r1 + math.floor(4 * (r1 + 1) / eps0) + 1
            and 2 / (m0 + 2) <= eps0
            and m0 * c > k_star
        )

    hi = 2
    while not ok(hi):
        hi *= 2
        if hi > limit:
            raise InfeasibleError("minimum n is below the search limit", f"limit {limit}")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _chain_deviations(kernels: np.ndarray, laws: np.ndarray, starts, start_laws, reps: int, steps: int,
                      radius: float, seed: int, tag0: int) -> tuple[np.ndarray, np.ndarray]:
    """Occupation deviations of ``G`` groups of ``reps`` independent Markov chains.

    Group ``g`` runs ``kernels[g]`` from state ``starts[g]`` (or from a draw
    of ``start_laws[g]``). With ``D_k`` the l1 distance between the average of
    the first ``k`` states and ``laws[g]``, returns the last ``k <= steps``
    with ``D_k >= radius`` per chain (0 if none) and the group means of
    ``D_k`` for ``k = 1..steps``.
    """
    groups, d = laws.shape
    cum = np.cumsum(kernels, axis=2)
    last_pos = np.array([[np.nonzero(row > 0)[0][-1] for row in k] for k in kernels])
    readers = [[UniformStream(seed, r, tag0 + g, chunk=8192) for r in range(reps)] for g in range(groups)]
    g_idx = np.arange(groups)[:, None]
    block = 1024
    buffer = np.empty((groups, reps, 0))
    pos = 0

    def draw() -> np.ndarray:
        nonlocal buffer, pos
        if pos >= buffer.shape[2]:
            buffer = np.stack([np.stack([reader.take(block) for reader in row]) for row in readers])
            pos = 0
        u = buffer[:, :, pos]
        pos += 1
        return u

    if starts is None:
        start_cum = np.cumsum(start_laws, axis=1)
        u = draw()
        state = (start_cum[:, None, :] <= u[:, :, None] * start_cum[:, -1:, None]).sum(axis=2)
        state = np.minimum(state, d - 1)
    else:
        state = np.repeat(np.asarray(starts, dtype=np.int64)[:, None], reps, axis=1)
    counts = np.zeros((groups, reps, d))
    last = np.zeros((groups, reps), dtype=np.int64)
    means = np.empty((groups, steps))
    rows_r = np.arange(reps)[None, :]
    for k in range(1, steps + 1):
        counts[g_idx, rows_r, state] += 1
        dev = np.abs(counts / k - laws[:, None, :]).sum(axis=2)
        last[dev >= radius] = k
        means[:, k - 1] = dev.mean(axis=1)
        if k == steps:
            break
        u = draw()
        rows = cum[g_idx, state]
        nxt = (rows <= u[:, :, None] * rows[:, :, -1:]).sum(axis=2)
        state = np.minimum(nxt, last_pos[g_idx, state])
    return last, means


def _tolerated_quantile(values: np.ndarray, fraction: float) -> int:
    """The ``(floor(fraction * n) + 1)``-th largest value: at most ``fraction * n`` values exceed it."""
    ordered = np.sort(values)[::-1]
    allowed = int(math.floor(fraction * ordered.size))
    return int(ordered[min(allowed, ordered.size - 1)])


def _calibrate_warmup(model: ModelSpec, cfg: ScheduleConfig) -> tuple[int, float, float]:
    """Choose ``r1`` (doubling from the default) so the charging time exceeds it with frequency <= eps1."""
    d = model.d
    r1 = cfg.r1 or 10 * d
    for _ in range(20):
        a_star = cfg.a_star if cfg.a_star is not None else 1.0 / (2 * d * r1)
        late = 0
        for rep in range(cfg.calibration_reps):
            states = run_chain(model, cfg.x0, r1, cfg.calibration_seed, thinning=r1, stream=_STREAM_CAL_WARMUP + rep).states
            counts = np.cumsum(np.eye(d)[states[:-1]], axis=0)
            ks = np.arange(1, r1 + 1)
            charged = np.all(counts > a_star * ks[:, None], axis=1)
            if not charged.any():
                late += 1
        freq = late / cfg.calibration_reps
        if freq <= cfg.eps1 or cfg.r1 is not None:
            return r1, a_star, freq
        r1 *= 2
    raise ConvergenceError("warm-up charging time is below r1 with frequency 1 - eps1", freq)


def _calibrate_ergodic(Q, q, first_marginals, conditionals, cfg: ScheduleConfig) -> dict[str, Any]:
    """Pre-simulate the auxiliary chains and pick ``k0`` and ``k*``."""
    d = q.size
    n_blocks = len(first_marginals)
    eps0, eps1, reps = cfg.eps0, cfg.eps1, cfg.calibration_reps
    steps = cfg.calibration_steps
    while True:
        # chains driven by Q from every start state, all tracking q
        last_q, _ = _chain_deviations(
            np.repeat(Q[None], d, axis=0), np.repeat(q[None], d, axis=0), np.arange(d), None,
            reps, steps, eps0, cfg.calibration_seed, _TAG_CAL_Q,
        )
        k0 = max(_tolerated_quantile(last_q.max(axis=0), eps1) + 1, math.floor(4 / eps0) + 1)
        # block chains started from their stationary laws
        last_b, _ = _chain_deviations(
            np.asarray(conditionals), np.asarray(first_marginals), None, np.asarray(first_marginals),
            reps, steps, eps0, cfg.calibration_seed, _TAG_CAL_BLOCK,
        )
        k_star = max(_tolerated_quantile(last_b.max(axis=0), eps1), 1)
        # block chains from each fixed state, for the conditional mean deviation
        kernels = np.repeat(np.asarray(conditionals), d, axis=0)
        laws = np.repeat(np.asarray(first_marginals), d, axis=0)
        starts = np.tile(np.arange(d), n_blocks)
        _, means = _chain_deviations(kernels, laws, starts, None, reps, steps, eps0,
                                     cfg.calibration_seed, _TAG_CAL_BLOCK_FROM)
        # means[:, k] is the mean deviation after k + 1 states, i.e. at m = k
        good = np.nonzero(np.all(means[:, k_star:] <= eps0, axis=0))[0]
        truncated = max(k0, k_star) > steps // 2 or good.size == 0
        if not truncated:
            k_star += int(good[0])
            truncated = k_star > steps // 2
        if not truncated:
            return {
                "k0": int(k0),
                "k_star": int(k_star),
                "steps": steps,
                "reps": reps,
                "q_exceed_frequency": float(np.mean(last_q.max(axis=0) >= k0)),
                "block_exceed_frequency": float(np.mean(last_b.max(axis=0) > k_star)),
                "conditional_mean_deviation": float(means[:, k_star].max()),
            }
        if steps * 2 > cfg.max_calibration_steps:
            raise ConvergenceError("ergodic averages settle within the calibration horizon",
                                   float(max(k0, k_star)), f"horizon {steps} steps")
        steps *= 2


def stationary_residual(first: np.ndarray, kernel: np.ndarray) -> float:
    return float(np.abs(first @ kernel - first).sum())


def build_schedule(path: ControlPath, model: ModelSpec, pistar=None, config: ScheduleConfig | None = None) -> ControlSchedule:
    """Compile a reversed, blockwise-constant control path into a :class:`ControlSchedule`.

    ``q`` is the path's start and ``Q`` the conditional kernel of the
    relative-entropy projection of ``q (x) G(q)`` onto pair measures with
    both marginals ``q``, which has ``q`` as its stationary law and full
    support on the adjacency. ``beta_j`` is the pair control at time ``j c``.
    """
    cfg = config or ScheduleConfig()
    if path.direction != "reversed":
        raise ValidationError("schedule path runs in reversed time")
    mask = model.adjacency.mask
    d = model.d
    c = path.h if cfg.block_length is None else float(cfg.block_length)
    per_block = _steps_per_block(path, c)
    sample = (np.arange(path.N) // per_block) * per_block
    if not np.allclose(path.kernels, path.kernels[sample], atol=1e-12, rtol=0):
        raise ValidationError("schedule path is constant on blocks of length c")
    l0 = int(math.floor(path.T / c + 1e-9))
    pairs = path.pair_controls
    betas = np.stack([pairs[min(j * per_block, path.N - 1)] for j in range(l0 + 1)])
    first_marginals = np.empty((l0 + 1, d))
    conditionals = np.empty((l0 + 1, d, d))
    for j, beta in enumerate(betas):
        if np.any(beta[~mask] > 1e-15):
            raise ValidationError("beta_j is supported in the adjacency", f"block {j}")
        if not is_irreducible(beta > 0):
            raise ValidationError("beta_j is irreducible on its support", f"block {j}")
        first_marginals[j], conditionals[j] = disintegrate(beta)
        residual = stationary_residual(first_marginals[j], conditionals[j])
        if residual > STATIONARITY_TOL:
            raise ValidationError("beta_j first marginal is stationary for its kernel", f"block {j}: {residual:.3e}")

    q = prob_vec(path.start, d, name="schedule start q")
    gamma = ipf_project(q[:, None] * _affine_kernel(model, q) * mask, q)
    _, Q = disintegrate(gamma)
    if np.any(Q[~mask] > 0) or not is_irreducible(Q > 0):
        raise ValidationError("Q is irreducible with support in the adjacency")
    if stationary_residual(q, Q) > STATIONARITY_TOL:
        raise ValidationError("q is stationary for Q", f"residual {stationary_residual(q, Q):.3e}")

    delta = float(min(betas[:, mask].min(), 4 * path.trajectory.min()))
    if not delta > 0:
        raise ValidationError("schedule floor delta is positive", f"got {delta}")
    consts = error_constants(c, l0, delta, model.delta0A)
    conditions = schedule_conditions(consts, c, l0, delta, cfg.eps0, cfg.eps1, cfg.epsilon, cfg.f_lip)

    r1, a_star, warm_freq = _calibrate_warmup(model, cfg)
    cal = _calibrate_ergodic(Q, q, first_marginals, conditionals, cfg)
    cal["warmup_late_frequency"] = warm_freq
    k0, k_star = cal["k0"], cal["k_star"]
    k1 = cfg.k1 if cfg.k1 is not None else k0 + math.floor(4 * (r1 + 1) / cfg.eps0) + 1
    n_min = minimum_n(path.T, c, k0, k_star, r1, cfg.eps0)

    q_cost = float(np.sum(np.where(gamma > 0, gamma * np.log(np.where(gamma > 0, gamma, 1.0)
                                                               / np.where(gamma > 0, q[:, None] * _affine_kernel(model, q), 1.0)), 0.0)))
    planned = discretized_cost(path, path.trajectory, model)
    consts = dict(consts, q_phase_cost=q_cost)
    if pistar is not None:
        consts["fixed_point_floor"] = fixed_point_floor(model, pistar)
    return ControlSchedule(
        controlled=True,
        d=d,
        T=float(path.T),
        c=c,
        l0=l0,
        Q=Q,
        q=q,
        betas=betas,
        first_marginals=first_marginals,
        conditionals=conditionals,
        eps0=cfg.eps0,
        eps1=cfg.eps1,
        r1=int(r1),
        a_star=float(a_star),
        k0=int(k0),
        k1=int(k1),
        k_star=int(k_star),
        delta=delta,
        minimum_n=int(n_min),
        target=path.end.copy(),
        planned_cost=planned,
        constants=consts,
        conditions=conditions,
        calibration=cal,
        path=path,
    )
