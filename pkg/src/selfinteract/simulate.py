"""Forward simulation of self-interacting chains.

Three engines share one sampling rule (inverse CDF over the row in index
order, one uniform per step):

- :func:`run_chain` follows a single chain with scalar Python arithmetic,
  which is fastest for the small state spaces of interest.
- :func:`run_controlled` executes the phase machine of a
  :class:`~selfinteract.construct.ControlSchedule` and accounts for the
  relative-entropy cost of every controlled step.
- :func:`mc_hit_probability` advances many independent replications at once
  with numpy, one counter-based stream per replication.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.stats import norm

from .errors import ValidationError
from .measures import prob_vec
from .model import ModelSpec
from .rng import (
    TAG_AUX,
    TAG_MAIN,
    UniformStream,
    block_uniforms_across_streams,
    tag_block,
)
from .timescale import TimeGrid, m_of

# phase tags recorded per step by run_controlled
PHASE_UNCONTROLLED = 0
PHASE_Q = 1
PHASE_BLOCK0 = 2


def default_thinning(n: int) -> int:
    return max(1, math.ceil(n / 1000))


def draw_index(row, u: float) -> int:
    """Inverse-CDF draw: the number of cumulative sums not exceeding ``u * total``."""
    target = u * sum(row)
    acc = 0.0
    last = 0
    for y, p in enumerate(row):
        if p > 0:
            last = y
        acc += p
        if target < acc:
            return y
    return last


class _AffineRows:
    """Running ``sum_z counts(z) T(z, x, :)`` so rows of ``G(L)`` cost O(d)."""

    def __init__(self, model: ModelSpec):
        self.d = model.d
        self.base = model.base.tolist()
        self.tensor = model.tensor.tolist()
        self.constant = not np.any(model.tensor)
        self.acc = [[0.0] * self.d for _ in range(self.d)]

    def add(self, z: int) -> None:
        if self.constant:
            return
        tz = self.tensor[z]
        for x in range(self.d):
            ax, tzx = self.acc[x], tz[x]
            for y in range(self.d):
                ax[y] += tzx[y]

    def row(self, x: int, total: int) -> list[float]:
        if self.constant:
            return self.base[x]
        inv = 1.0 / total
        return [b + s * inv for b, s in zip(self.base[x], self.acc[x])]


# ---------------------------------------------------------------------------
# plain chain


@dataclass(frozen=True)
class ChainRun:
    states: np.ndarray
    empirical_path: np.ndarray
    path_steps: np.ndarray
    seed: int
    n: int
    x0: int
    thinning: int

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.states, minlength=self.empirical_path.shape[1])

    @property
    def final_empirical(self) -> np.ndarray:
        """``L^{n+1}``: the average of ``X_0 .. X_n``."""
        return self.counts / (self.n + 1)


def _check_start(model: ModelSpec, x0: int, n: int) -> None:
    if not 0 <= x0 < model.d:
        raise ValidationError("initial state lies in the state space", f"got {x0}, d={model.d}")
    if n < 1:
        raise ValidationError("step count n is at least 1", f"got {n}")


def _thinned(states: np.ndarray, d: int, thinning: int) -> tuple[np.ndarray, np.ndarray]:
    """Empirical measures ``L^{k+1}`` at steps ``k = 0, thinning, 2 thinning, ...`` and ``k = n``."""
    n = states.size - 1
    steps = np.arange(0, n + 1, thinning)
    if steps[-1] != n:
        steps = np.append(steps, n)
    onehot_counts = np.zeros((steps.size, d))
    counts = np.zeros(d)
    prev = 0
    for i, k in enumerate(steps):
        counts += np.bincount(states[prev : k + 1], minlength=d)
        prev = k + 1
        onehot_counts[i] = counts
    return steps, onehot_counts / (steps + 1)[:, None]


def run_chain(
    model: ModelSpec,
    x0: int,
    n: int,
    seed: int,
    thinning: int | None = None,
    *,
    stream: int = 0,
) -> ChainRun:
    """Simulate ``X_0 = x0, ..., X_n`` with ``X_{k+1} ~ G(L^{k+1})(X_k, .)``.

    Step ``k + 1`` consumes uniform ``k`` of the ``(seed, stream)`` main
    sequence, so runs are reproducible bit for bit.
    """
    _check_start(model, x0, n)
    thinning = default_thinning(n) if thinning is None else int(thinning)
    if thinning < 1:
        raise ValidationError("thinning is a positive integer", f"got {thinning}")
    us = UniformStream(seed, stream, TAG_MAIN).take(n).tolist()
    rows = _AffineRows(model)
    states = np.empty(n + 1, dtype=np.int64)
    x = int(x0)
    states[0] = x
    rows.add(x)
    for k in range(n):
        # k + 1 states seen so far, so the kernel is G(L^{k+1})
        x = draw_index(rows.row(x, k + 1), us[k])
        states[k + 1] = x
        rows.add(x)
    steps, path = _thinned(states, model.d, thinning)
    return ChainRun(states, path, steps, int(seed), int(n), int(x0), thinning)


def pair_empirical(states) -> np.ndarray:
    """Average of the point masses at the transitions ``(X_k, X_{k+1})``.

    Accepts a :class:`ChainRun`, a :class:`ControlledRun` or a state array.
    The two marginals differ only through the first and last state, so their
    l1 distance is at most ``2 / n`` for ``n`` transitions.
    """
    arr = np.asarray(getattr(states, "states", states), dtype=np.int64)
    if arr.size < 2:
        raise ValidationError("run has at least two states", f"got {arr.size}")
    d = int(getattr(states, "empirical_path", np.zeros((0, arr.max() + 1))).shape[1])
    d = max(d, int(arr.max()) + 1)
    flat = np.bincount(arr[:-1] * d + arr[1:], minlength=d * d)
    return flat.reshape(d, d) / (arr.size - 1)


# ---------------------------------------------------------------------------
# Monte Carlo hitting probability


@dataclass(frozen=True)
class HitEstimate:
    p_hat: float
    ci95: tuple[float, float]
    slope: float | None
    hits: int
    reps: int
    n: int

    def as_dict(self) -> dict[str, Any]:
        return {
            "p_hat": self.p_hat,
            "ci95": list(self.ci95),
            "slope": self.slope,
            "hits": self.hits,
            "reps": self.reps,
            "n": self.n,
        }


def wilson_interval(hits: int, reps: int, level: float = 0.95) -> tuple[float, float]:
    z = float(norm.ppf(0.5 + level / 2))
    p = hits / reps
    denom = 1 + z * z / reps
    centre = (p + z * z / (2 * reps)) / denom
    half = z * math.sqrt(p * (1 - p) / reps + z * z / (4 * reps * reps)) / denom
    # the bounds are exactly 0 and 1 at the extremes; avoid rounding residue there
    lo = 0.0 if hits == 0 else max(0.0, centre - half)
    hi = 1.0 if hits == reps else min(1.0, centre + half)
    return lo, hi


def simulate_final_counts(
    model: ModelSpec,
    x0: int,
    n: int,
    seed: int,
    streams: np.ndarray,
) -> np.ndarray:
    """Final visit counts of ``X_0 .. X_n`` for one replication per stream id."""
    _check_start(model, x0, n)
    streams = np.asarray(streams, dtype=np.int64)
    reps, d = streams.size, model.d
    counts = np.zeros((reps, d))
    counts[:, x0] = 1.0
    x = np.full(reps, x0, dtype=np.int64)
    constant = not np.any(model.tensor)
    tensor_by_row = np.transpose(model.tensor, (1, 0, 2))  # (x, z, y)
    base = model.base
    idx = np.arange(reps)
    block = None
    for k in range(n):
        if k % 4 == 0:
            block = block_uniforms_across_streams(seed, streams, TAG_MAIN, k // 4)
        u = block[:, k % 4]
        if constant:
            rows = base[x]
        else:
            rows = base[x] + np.einsum("rz,rzy->ry", counts, tensor_by_row[x]) / (k + 1)
        cdf = np.cumsum(rows, axis=1)
        target = u * cdf[:, -1]
        x = (cdf <= target[:, None]).sum(axis=1)
        np.minimum(x, d - 1, out=x)
        counts[idx, x] += 1.0
    return counts


def mc_hit_probability(
    model: ModelSpec,
    target,
    radius: float,
    n: int,
    reps: int,
    seed: int,
    *,
    x0: int = 0,
    chunk: int = 100_000,
) -> HitEstimate:
    """Fraction of replications whose ``L^{n+1}`` lies within ``radius`` of ``target`` (l1)."""
    target = prob_vec(target, model.d, name="target")
    if reps < 1:
        raise ValidationError("reps is at least 1", f"got {reps}")
    if radius < 0:
        raise ValidationError("radius is nonnegative", f"got {radius}")
    hits = 0
    for start in range(0, reps, chunk):
        streams = np.arange(start, min(reps, start + chunk))
        counts = simulate_final_counts(model, x0, n, seed, streams)
        dist = np.abs(counts / (n + 1) - target).sum(axis=1)
        hits += int(np.count_nonzero(dist <= radius + 1e-12))
    p_hat = hits / reps
    slope = -math.log(p_hat) / n + 0.0 if p_hat > 0 else None
    return HitEstimate(p_hat, wilson_interval(hits, reps), slope, hits, reps, n)


# ---------------------------------------------------------------------------
# controlled runs


@dataclass(frozen=True)
class ControlledRun:
    states: np.ndarray
    empirical_path: np.ndarray
    path_steps: np.ndarray
    seed: int
    n: int
    x0: int
    thinning: int
    phase_log: np.ndarray
    n1: int | None
    n1_exceeded: bool
    aborts: tuple[bool, ...]
    realized_cost: float
    support_violation: bool
    block_starts: tuple[int, ...] = ()
    k2: int | None = None
    k3: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.states, minlength=self.empirical_path.shape[1])

    @property
    def final_empirical(self) -> np.ndarray:
        return self.counts / (self.n + 1)


def _markov_path(start_law, kernel_rows: list[list[float]], us: list[float], start_state: int | None):
    """Sample a Markov chain; if ``start_state`` is None the first uniform draws it from ``start_law``."""
    out = []
    i = 0
    if start_state is None:
        x = draw_index(start_law, us[0])
        out.append(x)
        i = 1
    else:
        x = start_state
    for u in us[i:]:
        x = draw_index(kernel_rows[x], u)
        out.append(x)
    return out


def block_boundaries(n: int, horizon: float, block_length: float, n_blocks: int) -> list[int]:
    """Steps ``m_j = m(t_n - T + j c)`` for ``j = 0..l_0``, plus ``n + 1`` as the final cap."""
    grid = TimeGrid(n)
    tn = grid.horizon
    if horizon >= tn:
        raise ValidationError("control horizon T is below t_n", f"T={horizon}, t_n={tn}")
    starts = [m_of(grid, min(tn, tn - horizon + j * block_length)) for j in range(n_blocks)]
    return starts + [n + 1]


def first_exit_time(path: np.ndarray, d: int, law: np.ndarray, radius: float, start: int) -> int | None:
    """First ``m >= start`` with ``|| (1/(m+1)) sum_{i<=m} delta_{path_i} - law || > radius``."""
    if path.size == 0:
        return None
    running = np.cumsum(np.eye(d)[path], axis=0) / np.arange(1, path.size + 1)[:, None]
    dist = np.abs(running - law).sum(axis=1)
    hit = np.nonzero(dist[start:] > radius)[0]
    return int(start + hit[0]) if hit.size else None


def run_controlled(model: ModelSpec, schedule, n: int, seed: int, *, x0: int = 0, thinning: int | None = None,
                   stream: int = 0, strict: bool = True) -> ControlledRun:
    """Run the phase machine described by ``schedule`` for ``n`` steps.

    Phases (tags in ``phase_log``): uncontrolled warm-up until every state is
    charged above ``a_star`` (or ``r_1`` steps), the kernel ``Q`` until the
    first block or an early abort, then one block per control value using the
    pre-generated block chains. Any abort hands the rest of the run to the
    uncontrolled dynamics, which cost nothing.
    """
    _check_start(model, x0, n)
    thinning = default_thinning(n) if thinning is None else int(thinning)
    d = model.d
    if strict and getattr(schedule, "controlled", False) and n < schedule.minimum_n:
        raise ValidationError("n is at least the schedule's minimum_n", f"n={n}, minimum_n={schedule.minimum_n}")

    # uniform k - 1 of the main stream drives uncontrolled step k, exactly as in run_chain
    main_us = UniformStream(seed, stream, TAG_MAIN).take(n).tolist()
    rows = _AffineRows(model)
    states = np.empty(n + 1, dtype=np.int64)
    phase = np.zeros(n + 1, dtype=np.int16)
    counts = [0] * d
    x = int(x0)
    states[0] = x
    counts[x] += 1
    rows.add(x)

    def advance_uncontrolled(k: int) -> int:
        nonlocal x
        x = draw_index(rows.row(x, k), main_us[k - 1])
        return x

    def record(k: int, y: int, tag: int) -> None:
        states[k] = y
        phase[k] = tag
        counts[y] += 1
        rows.add(y)

    controlled = getattr(schedule, "controlled", False)
    k = 1
    n1 = None
    n1_exceeded = False
    aborts: list[bool] = []
    k2 = k3 = None
    starts: list[int] = []
    if controlled:
        a_star, r1 = schedule.a_star, schedule.r1
        # (i) uncontrolled until every state is charged above a_star
        while k <= n:
            if n1 is None and min(counts) > a_star * k:
                n1 = k
            if (n1 is not None and k > n1) or k > r1:
                break
            record(k, advance_uncontrolled(k), PHASE_UNCONTROLLED)
            k += 1
        if n1 is None and k <= n and min(counts) > a_star * k and k <= r1:
            n1 = k
        n1_exceeded = n1 is None or n1 > r1
    if controlled and not n1_exceeded and k <= n:
        starts = block_boundaries(n, schedule.T, schedule.c, schedule.l0 + 1)
        m0 = starts[0]
        q_rows = schedule.Q.tolist()
        aux = UniformStream(seed, stream, TAG_AUX)
        k2 = n1 + schedule.k1
        q_target = schedule.q
        eps0 = schedule.eps0
        # (ii) kernel Q for k1 steps, (iii) Q until the first block or an exit of the 2 eps0 tube
        tau = None
        while k <= m0 - 1:
            if k > k2:
                dist = sum(abs(counts[y] / k - q_target[y]) for y in range(d))
                if dist > 2 * eps0:
                    tau = k - 1
                    break
            x = draw_index(q_rows[x], aux.next())
            record(k, x, PHASE_Q)
            k += 1
        if tau is None and k == m0 and k - 1 >= k2:
            dist = sum(abs(counts[y] / k - q_target[y]) for y in range(d))
            if dist > 2 * eps0:
                tau = k - 1
        k3 = tau if tau is not None else m0 - 1
        aborts.append(tau is not None)
        # (iv) blocks
        if tau is None:
            for j in range(schedule.l0 + 1):
                mj, mnext = starts[j], starts[j + 1]
                length = mnext - mj - 1  # size of the interior of block j
                if length < 0:
                    raise ValidationError("block boundaries are strictly increasing", f"m_{j}={mj}, m_{j+1}={mnext}")
                us = UniformStream(seed, stream, tag_block(j)).take(length + 1).tolist()
                path = np.array(
                    _markov_path(schedule.first_marginals[j].tolist(), schedule.conditionals[j].tolist(), us, None),
                    dtype=np.int64,
                )
                tau_j = first_exit_time(path, d, schedule.first_marginals[j], eps0, schedule.k_star)
                stop = length if tau_j is None or tau_j > length else tau_j
                for i in range(stop + 1):
                    if mj + i > n:
                        break
                    x = int(path[i])
                    record(mj + i, x, PHASE_BLOCK0 + j)
                k = min(mj + stop + 1, n + 1)
                aborted = tau_j is not None and tau_j <= length
                aborts.append(aborted)
                if aborted:
                    break
        # remaining flags stay False when an earlier abort ended the controlled part
        aborts.extend([False] * (schedule.l0 + 2 - len(aborts)))
    # anything left is uncontrolled
    while k <= n:
        record(k, advance_uncontrolled(k), PHASE_UNCONTROLLED)
        k += 1

    cost, violation = (0.0, False)
    if controlled:
        cost, violation = realized_cost(model, states, phase, schedule, starts)
    steps, path = _thinned(states, d, thinning)
    return ControlledRun(
        states=states,
        empirical_path=path,
        path_steps=steps,
        seed=int(seed),
        n=int(n),
        x0=int(x0),
        thinning=thinning,
        phase_log=phase,
        n1=n1,
        n1_exceeded=n1_exceeded,
        aborts=tuple(aborts),
        realized_cost=cost,
        support_violation=violation,
        block_starts=tuple(starts[:-1]) if starts else (),
        k2=k2,
        k3=k3,
    )


def controlled_laws(states: np.ndarray, phase: np.ndarray, schedule, block_starts) -> np.ndarray:
    """Per-step control law ``mu^k`` (rows for steps 1..n); NaN rows mark uncontrolled steps."""
    n = states.size - 1
    d = schedule.Q.shape[0]
    laws = np.full((n, d), np.nan)
    prev = states[:-1]
    tags = phase[1:]
    q_steps = tags == PHASE_Q
    laws[q_steps] = schedule.Q[prev[q_steps]]
    for j in range(schedule.l0 + 1):
        in_block = tags == PHASE_BLOCK0 + j
        if not in_block.any():
            continue
        laws[in_block] = schedule.conditionals[j][prev[in_block]]
        mj = block_starts[j]
        # the first step of a block is drawn from the block's first marginal
        if 1 <= mj <= n and phase[mj] == PHASE_BLOCK0 + j:
            laws[mj - 1] = schedule.first_marginals[j]
    return laws


def realized_cost(model: ModelSpec, states, phase, schedule, block_starts, chunk: int = 100_000) -> tuple[float, bool]:
    """``n^{-1} sum_k R(mu^k || G(L^k)(X_{k-1}, .))``; uncontrolled steps contribute zero."""
    n = states.size - 1
    d = model.d
    laws = controlled_laws(states, phase, schedule, block_starts)
    active = ~np.isnan(laws[:, 0])
    if not active.any():
        return 0.0, False
    cum = np.cumsum(np.eye(d)[states[:-1]], axis=0)  # row k-1 holds counts of X_0..X_{k-1}
    total = 0.0
    violation = False
    idx = np.nonzero(active)[0]
    for start in range(0, idx.size, chunk):
        sel = idx[start : start + chunk]
        k = sel + 1
        emp = cum[sel] / k[:, None]
        prev = states[sel]
        g = model.base[prev] + np.einsum("rz,zry->ry", emp, model.tensor[:, prev, :])
        mu = laws[sel]
        pos = mu > 0
        if np.any(pos & (g <= 0)):
            violation = True
            continue
        ratio = np.where(pos, mu / np.where(pos, g, 1.0), 1.0)
        total += float(np.sum(np.where(pos, mu * np.log(ratio), 0.0)))
    if violation:
        return float("inf"), True
    return total / n, False


# ---------------------------------------------------------------------------
# serialization


def run_to_dict(run) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "n": run.n,
        "seed": run.seed,
        "x0": run.x0,
        "thinning": run.thinning,
        "final_empirical": run.final_empirical.tolist(),
    }
    if isinstance(run, ControlledRun):
        doc.update(
            {
                "realized_cost": run.realized_cost,
                "support_violation": run.support_violation,
                "n1": run.n1,
                "n1_exceeded": run.n1_exceeded,
                "aborts": list(run.aborts),
                "block_starts": list(run.block_starts),
                "k2": run.k2,
                "k3": run.k3,
                "phase_counts": np.bincount(run.phase_log, minlength=2).tolist(),
            }
        )
    return doc
