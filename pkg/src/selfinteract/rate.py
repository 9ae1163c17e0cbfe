"""Rate-function machinery.

- :func:`pstar_feasible` decides whether a probability vector is the common
  marginal of some pair measure supported on the adjacency template
  (a bipartite max-flow problem).
- :func:`ipf_project` computes the KL projection of a reference pair measure
  onto the pair measures with two prescribed marginals.
- :func:`dv_rate` is the Donsker-Varadhan functional
  ``min R(gamma || m (x) G(m))`` over pair measures with both marginals ``m``.
- :func:`rate_upper` bounds the discounted control rate from above by
  optimizing piecewise-constant kernel controls.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from .errors import ConvergenceError, InfeasibleError, ValidationError
from .measures import disintegrate, prob_vec
from .model import AdjacencySpec, ModelSpec, is_irreducible

FLOW_TOL = 1e-10


# ---------------------------------------------------------------------------
# feasibility by maximum flow


def _max_flow(capacity: np.ndarray, source: int, sink: int) -> tuple[float, np.ndarray]:
    """Edmonds-Karp on a dense float capacity matrix; returns (value, flow)."""
    n = capacity.shape[0]
    flow = np.zeros_like(capacity)
    total = 0.0
    while True:
        residual = capacity - flow
        parent = [-1] * n
        parent[source] = source
        queue = deque([source])
        while queue and parent[sink] < 0:
            u = queue.popleft()
            for w in np.nonzero(residual[u] > 1e-15)[0]:
                if parent[w] < 0:
                    parent[w] = u
                    queue.append(int(w))
        if parent[sink] < 0:
            return total, flow
        push = math.inf
        w = sink
        while w != source:
            u = parent[w]
            push = min(push, residual[u, w])
            w = u
        w = sink
        while w != source:
            u = parent[w]
            flow[u, w] += push
            flow[w, u] -= push
            w = u
        total += push


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    witness: np.ndarray | None
    flow: float

    def as_dict(self) -> dict[str, Any]:
        return {
            "feasible": self.feasible,
            "flow": self.flow,
            "witness": None if self.witness is None else self.witness.tolist(),
        }


def _transport_flow(m: np.ndarray, allowed: np.ndarray) -> tuple[float, np.ndarray]:
    d = m.size
    size = 2 * d + 2
    source, sink = 0, 2 * d + 1
    cap = np.zeros((size, size))
    cap[source, 1 : d + 1] = m
    cap[d + 1 : 2 * d + 1, sink] = m
    cap[1 : d + 1, d + 1 : 2 * d + 1] = np.where(allowed, 1.0, 0.0)
    value, flow = _max_flow(cap, source, sink)
    middle = np.clip(flow[1 : d + 1, d + 1 : 2 * d + 1], 0.0, None)
    return value, middle


def pstar_feasible(m, adjacency) -> Feasibility:
    """Is there a pair measure on the adjacency support with both marginals ``m``?"""
    m = prob_vec(m, name="m")
    allowed = _as_mask(adjacency, m.size)
    if allowed.all():
        return Feasibility(True, np.outer(m, m), 1.0)
    value, middle = _transport_flow(m, allowed)
    if abs(value - 1.0) > FLOW_TOL:
        return Feasibility(False, None, value)
    witness = middle * allowed
    return Feasibility(True, witness / witness.sum(), value)


def _as_mask(adjacency, d: int) -> np.ndarray:
    if isinstance(adjacency, AdjacencySpec):
        mask = adjacency.mask
    else:
        mask = np.asarray(adjacency) > 0
    if mask.shape != (d, d):
        raise ValidationError("adjacency has dimension d", f"got {mask.shape}, d={d}")
    return mask


def essential_support(witness: np.ndarray, allowed: np.ndarray, tol: float = 1e-14) -> np.ndarray:
    """Entries of ``allowed`` that are positive for some pair measure with the witness's marginals.

    An entry (x, y) with zero witness mass can be made positive exactly when
    the residual graph (rows to columns along allowed entries, columns back
    to rows along positive witness entries) has a path from column y back to
    row x.
    """
    d = allowed.shape[0]
    # nodes 0..d-1 rows, d..2d-1 columns
    adj = [[] for _ in range(2 * d)]
    for x in range(d):
        for y in range(d):
            if allowed[x, y]:
                adj[x].append(d + y)
            if witness[x, y] > tol:
                adj[d + y].append(x)
    reach = np.zeros((2 * d, 2 * d), dtype=bool)
    for s in range(2 * d):
        seen = {s}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        reach[s, list(seen)] = True
    ess = witness > tol
    for x, y in zip(*np.nonzero(allowed & ~ess)):
        if reach[d + y, x]:
            ess[x, y] = True
    return ess


# ---------------------------------------------------------------------------
# KL projection


@dataclass(frozen=True)
class Projection:
    gamma: np.ndarray
    row_scale: np.ndarray
    col_scale: np.ndarray
    iterations: int
    gap: float


_IPF_STALL_GAP = 1e-11


def _ipf(reference: np.ndarray, marg: np.ndarray, tol: float, max_iter: int) -> Projection:
    allowed = reference > 0
    feas = pstar_feasible(marg, allowed)
    if not feas.feasible:
        raise InfeasibleError("marginal is feasible on the reference support", f"max flow {feas.flow:.12g}")
    ess = essential_support(feas.witness, allowed)
    gamma = np.where(ess, reference, 0.0)
    u = np.ones(marg.size)
    v = np.ones(marg.size)
    gap = math.inf
    for it in range(1, max_iter + 1):
        rows = gamma.sum(axis=1)
        a = np.divide(marg, rows, out=np.zeros_like(marg), where=rows > 0)
        gamma *= a[:, None]
        u *= a
        cols = gamma.sum(axis=0)
        b = np.divide(marg, cols, out=np.zeros_like(marg), where=cols > 0)
        gamma *= b[None, :]
        v *= b
        prev, gap = gap, float(np.abs(gamma.sum(axis=1) - marg).sum())
        if gap <= tol:
            return Projection(gamma, u, v, it, gap)
        # A marginal off the support's balance manifold by rounding leaves a
        # residual that no further sweep reduces.
        if gap <= _IPF_STALL_GAP and gap >= prev:
            return Projection(gamma, u, v, it, gap)
    raise ConvergenceError("IPF reaches the marginal tolerance within max_iter", gap)


def ipf_project(reference, marg, tol: float = 1e-13, max_iter: int = 200_000) -> np.ndarray:
    """KL projection of ``reference`` onto pair measures with both marginals ``marg``.

    Alternately rescales rows and columns. Before iterating, the support is
    reduced to the entries that some feasible pair measure can charge, which
    keeps the iteration geometric even when the projection sits on a face.
    """
    ref = np.array(reference, dtype=float)
    if ref.ndim != 2 or ref.shape[0] != ref.shape[1] or ref.min() < 0:
        raise ValidationError("reference is a nonnegative square matrix")
    marg = prob_vec(marg, ref.shape[0], name="marginal")
    return _ipf(ref, marg, tol, max_iter).gamma


# ---------------------------------------------------------------------------
# Donsker-Varadhan functional


def _affine_kernel(model: ModelSpec, m: np.ndarray) -> np.ndarray:
    """``G(m)`` without simplex validation (used on slightly perturbed points)."""
    return model.base + np.tensordot(m, model.tensor, axes=([-1], [0]))


def kl_pairs(eta: np.ndarray, ref: np.ndarray) -> float:
    mask = eta > 0
    if np.any(ref[mask] <= 0):
        return math.inf
    return float(np.sum(eta[mask] * np.log(eta[mask] / ref[mask])))


@dataclass(frozen=True)
class DVResult:
    value: float
    gamma: np.ndarray | None
    gradient: np.ndarray | None


def dv_evaluate(m: np.ndarray, model: ModelSpec, support=None, *, gradient: bool = False,
                tol: float = 1e-14, max_iter: int = 200_000) -> DVResult:
    """Value, minimizer and (optionally) gradient of the DV functional at ``m``."""
    kernel = _affine_kernel(model, m)
    mask = model.adjacency.mask if support is None else _as_mask(support, model.d)
    reference = np.where(mask & (kernel > 0), m[:, None] * kernel, 0.0)
    try:
        proj = _ipf(reference, m, tol, max_iter)
    except InfeasibleError:
        return DVResult(math.inf, None, None)
    gamma = proj.gamma
    value = kl_pairs(gamma, m[:, None] * kernel)
    grad = None
    if gradient:
        with np.errstate(divide="ignore"):
            log_scale = np.log(proj.row_scale) + np.log(proj.col_scale)
        log_scale = np.where(np.isfinite(log_scale), log_scale, -700.0)
        ratio = np.divide(gamma, kernel, out=np.zeros_like(gamma), where=gamma > 0)
        grad = log_scale - np.einsum("xy,zxy->z", ratio, model.tensor)
    return DVResult(max(value, 0.0), gamma, grad)


def dv_rate(m, model: ModelSpec, support=None) -> float:
    """``min R(gamma || m (x) G(m))`` over pair measures with both marginals ``m``; ``inf`` if none."""
    m = prob_vec(m, model.d, name="m")
    return dv_evaluate(m, model, support).value


# ---------------------------------------------------------------------------
# kernels and control paths


def _stationary_solve(kernels: np.ndarray) -> np.ndarray:
    """Stationary laws of a stack of irreducible kernels via ``mu (I - K + 1 1^T) = 1``."""
    d = kernels.shape[-1]
    system = np.eye(d) - kernels + 1.0
    rhs = np.ones(kernels.shape[:-2] + (d, 1))
    mu = np.linalg.solve(np.swapaxes(system, -1, -2), rhs)[..., 0]
    mu = np.maximum(mu, 0.0)
    return mu / mu.sum(axis=-1, keepdims=True)


def stationary_of_kernel(kernel, tol: float = 1e-13, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary law of an irreducible kernel by power iteration on ``(K + I) / 2``.

    The lazy chain has the same stationary law and is aperiodic, so the
    iteration converges for periodic kernels too.
    """
    k = np.array(kernel, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValidationError("kernel is a square matrix")
    if not is_irreducible(k > 0):
        raise ValidationError("kernel is irreducible on its support")
    d = k.shape[0]
    lazy = 0.5 * (k + np.eye(d))
    mu = np.full(d, 1.0 / d)
    residual = math.inf
    for _ in range(max_iter):
        nxt = mu @ lazy
        nxt /= nxt.sum()
        residual = float(np.abs(nxt @ k - nxt).sum())
        mu = nxt
        if residual <= tol:
            return mu
    raise ConvergenceError("power iteration reaches tolerance", residual)


Direction = Literal["forward", "reversed"]


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant control on ``N`` equal steps of ``[0, T]``.

    ``kernels[j]`` is the transition kernel used on step ``j`` and
    ``stationary[j]`` its stationary law, so the pair control
    ``stationary[j](x) * kernels[j](x, y)`` has equal marginals. ``start`` is
    the initial value of the trajectory, which follows

    - forward:  ``M' = M - mu``, exactly ``M_{j+1} = e^h M_j - (e^h - 1) mu_j``
    - reversed: ``M' = mu - M``, exactly ``M_{j+1} = e^{-h} M_j + (1 - e^{-h}) mu_j``.
    """

    T: float
    kernels: np.ndarray
    stationary: np.ndarray
    start: np.ndarray
    direction: Direction = "forward"
    trajectory: np.ndarray = field(init=False, repr=False)
    penalty: float = field(init=False)

    def __post_init__(self):
        kernels = np.array(self.kernels, dtype=float)
        stationary = np.array(self.stationary, dtype=float)
        if kernels.ndim != 3 or stationary.shape != kernels.shape[:2]:
            raise ValidationError("control path has kernels (N, d, d) and stationary laws (N, d)")
        if self.T <= 0 and kernels.shape[0] > 0:
            raise ValidationError("horizon T is positive", f"got {self.T}")
        if self.direction not in ("forward", "reversed"):
            raise ValidationError("direction is forward or reversed", f"got {self.direction!r}")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "stationary", stationary)
        object.__setattr__(self, "start", np.array(self.start, dtype=float))
        traj, pen = _propagate(self.start, stationary, self.h, self.direction)
        object.__setattr__(self, "trajectory", traj)
        object.__setattr__(self, "penalty", pen)

    @property
    def N(self) -> int:
        return self.kernels.shape[0]

    @property
    def d(self) -> int:
        return self.start.size

    @property
    def h(self) -> float:
        return self.T / self.N if self.N else 0.0

    @property
    def pair_controls(self) -> np.ndarray:
        return self.stationary[:, :, None] * self.kernels

    @property
    def end(self) -> np.ndarray:
        return self.trajectory[-1]

    @classmethod
    def from_kernels(cls, T: float, kernels, start, direction: Direction = "forward") -> ControlPath:
        kernels = np.asarray(kernels, dtype=float)
        return cls(T, kernels, _stationary_solve(kernels), start, direction)

    @classmethod
    def from_pairs(cls, T: float, pairs, start, direction: Direction = "forward") -> ControlPath:
        """Build from equal-marginal pair controls by disintegration."""
        pairs = np.asarray(pairs, dtype=float)
        kernels = np.empty_like(pairs)
        stationary = np.empty(pairs.shape[:2])
        for j, eta in enumerate(pairs):
            first, kernel = disintegrate(eta)
            stationary[j] = first
            kernels[j] = kernel
        return cls(T, kernels, stationary, start, direction)

    @classmethod
    def constant(cls, T: float, N: int, kernel, stationary, start, direction: Direction = "forward") -> ControlPath:
        kernels = np.repeat(np.asarray(kernel, dtype=float)[None], N, axis=0)
        stat = np.repeat(np.asarray(stationary, dtype=float)[None], N, axis=0)
        return cls(T, kernels, stat, start, direction)


def _propagate(start: np.ndarray, stationary: np.ndarray, h: float, direction: str) -> tuple[np.ndarray, float]:
    n_steps, d = stationary.shape
    traj = np.empty((n_steps + 1, d))
    traj[0] = start
    if direction == "forward":
        grow, mix = math.exp(h), math.expm1(h)
        for j in range(n_steps):
            traj[j + 1] = grow * traj[j] - mix * stationary[j]
    else:
        decay, mix = math.exp(-h), -math.expm1(-h)
        for j in range(n_steps):
            traj[j + 1] = decay * traj[j] + mix * stationary[j]
    penalty = float(np.sum(np.minimum(traj, 0.0) ** 2))
    return traj, penalty


def propagate(m, path: ControlPath) -> tuple[np.ndarray, float]:
    """Trajectory ``M_0 .. M_N`` from ``m`` under the path's controls, and its negativity penalty."""
    m = np.asarray(m, dtype=float)
    return _propagate(m, path.stationary, path.h, path.direction)


def discount_weights(T: float, N: int) -> np.ndarray:
    """``exp(-j h) - exp(-(j + 1) h)`` for ``j = 0 .. N-1``."""
    if N == 0:
        return np.zeros(0)
    h = T / N
    j = np.arange(N)
    return np.exp(-j * h) * (-math.expm1(-h))


def step_costs(path: ControlPath, trajectory: np.ndarray, model: ModelSpec) -> np.ndarray:
    """Undiscounted ``R(eta_j || mu_j (x) G(M_j))`` for each step.

    The model is evaluated at the step's earlier end in forward time: the
    left end of a forward step and the right end of a reversed one. Hence
    reversing a path reverses its step costs exactly.
    """
    eta = path.pair_controls
    out = np.empty(path.N)
    shift = 1 if path.direction == "reversed" else 0
    for j in range(path.N):
        ref = path.stationary[j][:, None] * _affine_kernel(model, trajectory[j + shift])
        out[j] = kl_pairs(eta[j], ref) if np.all(ref >= -1e-15) else math.inf
    return out


def discretized_cost(path: ControlPath, trajectory: np.ndarray, model: ModelSpec) -> float:
    """Discounted sum of the step costs.

    Forward steps are weighted by ``exp(-s)`` at forward time ``s``; reversed
    steps by ``exp(s - T)``, the same weights in reverse order.
    """
    if path.N == 0:
        return 0.0
    costs = step_costs(path, trajectory, model)
    if not np.all(np.isfinite(costs)):
        return math.inf
    weights = discount_weights(path.T, path.N)
    if path.direction == "reversed":
        weights = weights[::-1]
    return float(weights @ costs)


def terminal_tail_report(T: float, floor: float) -> float:
    """Coarse a-priori tail scale ``exp(1 - T) |log floor|`` used to choose ``T``."""
    if T <= 0:
        raise ValidationError("horizon T is positive", f"got {T}")
    if not 0 < floor < 1:
        raise ValidationError("floor lies in (0, 1)", f"got {floor}")
    return math.exp(1.0 - T) * abs(math.log(floor))


# ---------------------------------------------------------------------------
# control optimization


@dataclass(frozen=True)
class RateOptions:
    floor: float = 1e-6
    penalty: float = 1e4
    max_iter: int = 2000
    grad_tol: float = 1e-10
    initial_step: float = 1.0
    feasibility_tol: float = 1e-8
    ipf_tol: float = 1e-14
    memory: int = 10
    penalty_rounds: int = 4


class RateObjective:
    """Discounted control cost as a smooth function of per-row kernel logits.

    The parameters are logits on the adjacency entries of each row of each
    step kernel; rows are mapped to kernels by a softmax lifted above
    ``floor``. :meth:`evaluate` returns the penalized objective and, on
    request, its gradient by an adjoint sweep.
    """

    def __init__(self, m, model: ModelSpec, T: float, N: int, options: RateOptions | None = None,
                 support=None):
        self.model = model
        self.m = np.asarray(m, dtype=float)
        self.T, self.N = float(T), int(N)
        self.h = self.T / self.N
        self.opts = options or RateOptions()
        self.penalty = self.opts.penalty
        self.mask = model.adjacency.mask if support is None else _as_mask(support, model.d)
        self.weights = discount_weights(self.T, self.N)
        self.row_count = self.mask.sum(axis=1)
        self.scale = 1.0 - self.opts.floor * self.row_count
        if np.any(self.scale <= 0):
            raise ValidationError("kernel floor times row support is below one")
        self.size = self.N * int(self.mask.sum())

    # parameter <-> kernel maps
    def kernels(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = self.model.d
        logits = np.full((self.N, d, d), -np.inf)
        logits[:, self.mask] = theta.reshape(self.N, -1)
        logits -= logits.max(axis=2, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=2, keepdims=True)
        kernels = np.where(self.mask, self.opts.floor + self.scale[None, :, None] * probs, 0.0)
        return kernels, probs

    def logits_for(self, kernels: np.ndarray) -> np.ndarray:
        """Inverse of the floored softmax (kernels below the floor are clipped)."""
        lifted = (kernels - self.opts.floor) / self.scale[None, :, None]
        lifted = np.where(self.mask, np.maximum(lifted, 1e-300), 1.0)
        return np.log(lifted)[:, self.mask].reshape(-1)

    def path(self, theta: np.ndarray) -> ControlPath:
        kernels, _ = self.kernels(theta)
        return ControlPath(self.T, kernels, _stationary_solve(kernels), self.m)

    def evaluate(self, theta: np.ndarray, gradient: bool = False):
        model, mask, h = self.model, self.mask, self.h
        kernels, probs = self.kernels(theta)
        mu = _stationary_solve(kernels)
        # closed-form trajectory: M_j = e^{jh} (m - (1 - e^{-h}) sum_{i<j} e^{-ih} mu_i)
        j = np.arange(self.N + 1)
        disc = np.exp(-np.arange(self.N) * h)[:, None] * mu
        partial = np.vstack([np.zeros(model.d), np.cumsum(disc, axis=0)])
        traj = np.exp(j * h)[:, None] * (self.m - (-math.expm1(-h)) * partial)
        G = model.base + np.tensordot(traj[:-1], model.tensor, axes=([1], [0]))
        if np.any(G[:, mask] <= 0):
            return (math.inf, None) if gradient else math.inf
        end = traj[-1]
        if end.min() < -1e-12:
            return (math.inf, None) if gradient else math.inf
        end_clean = np.maximum(end, 0.0)
        end_clean /= end_clean.sum()
        dv = dv_evaluate(end_clean, model, mask, gradient=gradient, tol=self.opts.ipf_tol)
        if not math.isfinite(dv.value):
            return (math.inf, None) if gradient else math.inf
        log_ratio = np.where(mask, np.log(np.where(mask, kernels, 1.0) / np.where(mask, G, 1.0)), 0.0)
        row_cost = np.sum(kernels * log_ratio, axis=2)  # r_j(x)
        step = np.sum(mu * row_cost, axis=1)
        neg = np.minimum(traj, 0.0)
        lam = self.penalty
        value = float(self.weights @ step + math.exp(-self.T) * dv.value + lam * np.sum(neg**2))
        if not gradient:
            return value
        # adjoint sweep
        eta = mu[:, :, None] * kernels
        ratio = np.where(mask, eta / np.where(mask, G, 1.0), 0.0)
        dcost_dM = -np.einsum("jxy,zxy->jz", ratio, model.tensor)
        local = self.weights[:, None] * dcost_dM + 2 * lam * neg[:-1]
        p = np.empty((self.N + 1, model.d))
        p[self.N] = math.exp(-self.T) * dv.gradient + 2 * lam * neg[-1]
        grow = math.exp(h)
        for jj in range(self.N - 1, -1, -1):
            p[jj] = local[jj] + grow * p[jj + 1]
        g_mu = self.weights[:, None] * row_cost - math.expm1(h) * p[1:]
        system = np.eye(model.d) - kernels + mu[:, None, :]
        v = np.linalg.solve(system, g_mu[..., None])[..., 0]
        g_k = self.weights[:, None, None] * mu[:, :, None] * (log_ratio + 1.0) + mu[:, :, None] * v[:, None, :]
        g_k = np.where(mask, g_k, 0.0)
        centred = g_k - np.sum(probs * g_k, axis=2, keepdims=True)
        g_theta = self.scale[None, :, None] * probs * centred
        return value, g_theta[:, mask].reshape(-1)

    def certificate_parts(self, path: ControlPath) -> tuple[float, float, float]:
        """(head cost, terminal DV, tail) for a path with the objective's horizon."""
        head = discretized_cost(path, path.trajectory, self.model)
        end = path.end
        if end.min() < -self.opts.feasibility_tol:
            return head, math.inf, math.inf
        end = np.maximum(end, 0.0)
        end /= end.sum()
        dv = dv_evaluate(end, self.model, self.mask, tol=self.opts.ipf_tol).value
        return head, dv, math.exp(-self.T) * dv


@dataclass(frozen=True)
class RateCertificate:
    value: float
    head_cost: float
    tail_bound: float
    terminal_dv: float
    path: ControlPath | None
    m: np.ndarray
    T: float
    N: int
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def trajectory(self) -> np.ndarray | None:
        return None if self.path is None else self.path.trajectory

    def as_dict(self) -> dict[str, Any]:
        return {
            "value": self.value,
            "head_cost": self.head_cost,
            "tail_bound": self.tail_bound,
            "terminal_dv": self.terminal_dv,
            "T": self.T,
            "N": self.N,
            "m": self.m.tolist(),
            "diagnostics": self.diagnostics,
        }


def _lbfgs_direction(grad, precond, s_hist, y_hist):
    """Two-loop recursion with the diagonal preconditioner as initial Hessian inverse."""
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        gamma = float(s @ y) / float(y @ (precond * y))
        r = gamma * precond * q
    else:
        r = precond * q
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * float(y @ r)
        r += (a - b) * s
    return r


def _gradient_descent(obj: RateObjective, theta: np.ndarray, opts: RateOptions):
    """Descent with limited-memory quasi-Newton directions and Armijo backtracking.

    Later steps are discounted by exp(-t); scaling each step's logits by the
    inverse of its discount weight serves as the initial inverse Hessian.
    Trial points with infinite objective (trajectory leaving the region where
    the kernels are positive) are simply rejected by the backtracking.
    """
    precond = np.repeat(obj.h / obj.weights, theta.size // obj.N)
    value, grad = obj.evaluate(theta, gradient=True)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    iterations = 0
    stalled = False
    for iterations in range(1, opts.max_iter + 1):
        if float(np.linalg.norm(grad)) <= opts.grad_tol:
            break
        direction = _lbfgs_direction(grad, precond, s_hist, y_hist)
        decrease = float(grad @ direction)
        if decrease <= 0:
            s_hist.clear()
            y_hist.clear()
            direction = precond * grad
            decrease = float(grad @ direction)
        step = opts.initial_step if s_hist else min(opts.initial_step, 1.0 / max(1.0, np.abs(direction).max()))
        accepted = False
        for _ in range(60):
            trial = theta - step * direction
            trial_value = obj.evaluate(trial)
            if trial_value <= value - 1e-4 * step * decrease:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if s_hist:
                s_hist.clear()
                y_hist.clear()
                continue
            stalled = True
            break
        new_value, new_grad = obj.evaluate(trial, gradient=True)
        s_vec, y_vec = trial - theta, new_grad - grad
        if float(s_vec @ y_vec) > 1e-12 * float(np.linalg.norm(s_vec) * np.linalg.norm(y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > opts.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        improvement = value - new_value
        theta, value, grad = trial, new_value, new_grad
        if improvement <= 1e-15 * max(1.0, abs(value)):
            break
    return theta, value, float(np.linalg.norm(grad)), iterations, stalled


def resample_path(warm: ControlPath, model: ModelSpec, T: float, N: int, mask=None,
                  tol: float = 1e-14) -> ControlPath | None:
    """Carry a forward control path onto the grid of ``(T, N)``.

    Step ``j`` reuses the warm control active at time ``j T / N``. Past the
    warm horizon the path holds the trajectory at the warm end point with its
    DV-optimal constant control, so extending ``T`` at fixed step length
    reproduces the warm certificate's value. Returns ``None`` when the warm
    end point has no finite DV cost.
    """
    if warm.direction != "forward":
        raise ValidationError("warm start path runs forward in time")
    mask = model.adjacency.mask if mask is None else mask
    h = T / N
    starts = np.arange(N) * h
    index = np.floor(starts / warm.h + 1e-9).astype(int)
    inside = index < warm.N
    kernels = np.empty((N, model.d, model.d))
    stationary = np.empty((N, model.d))
    kernels[inside] = warm.kernels[index[inside]]
    stationary[inside] = warm.stationary[index[inside]]
    if not np.all(inside):
        end = np.maximum(warm.end, 0.0)
        end /= end.sum()
        dv = dv_evaluate(end, model, mask, tol=tol)
        if not math.isfinite(dv.value):
            return None
        _, hold = disintegrate(dv.gamma, fill=_affine_kernel(model, end))
        kernels[~inside] = hold
        stationary[~inside] = end
    return ControlPath(T, kernels, stationary, warm.start)


def rate_upper(m, model: ModelSpec, adjacency=None, T: float = 8.0, N: int = 80,
               options: RateOptions | None = None, warm_start: ControlPath | None = None) -> RateCertificate:
    """Upper estimate of the discounted control rate at ``m``.

    Candidates are compared and the cheapest certificate is returned:

    - the constant control given by the DV minimizer at ``m``, which keeps the
      trajectory at ``m`` and costs exactly the DV value;
    - ``warm_start`` resampled onto the ``(T, N)`` grid, when given;
    - the result of quasi-Newton descent on floored kernel logits, started
      from the cheaper of the above.

    Passing the path of a coarser certificate as ``warm_start`` makes
    refinement studies start from the previous optimum instead of from
    scratch; without it the nonconvex objective may settle at different
    local optima for different grids.
    """
    opts = options or RateOptions()
    m = prob_vec(m, model.d, name="m")
    if T <= 0 or N < 1:
        raise ValidationError("horizon T > 0 and step count N >= 1", f"got T={T}, N={N}")
    mask = model.adjacency.mask if adjacency is None else _as_mask(adjacency, model.d)
    if not is_irreducible(mask):
        raise ValidationError("adjacency is irreducible")
    feas = pstar_feasible(m, mask)
    if not feas.feasible:
        return RateCertificate(math.inf, math.inf, math.inf, math.inf, None, m, T, N, {"feasible": False})
    obj = RateObjective(m, model, T, N, opts, mask)

    dv = dv_evaluate(m, model, mask, tol=opts.ipf_tol)
    candidates: list[tuple[float, float, float, float, ControlPath, dict]] = []
    starts: list[np.ndarray] = []
    if math.isfinite(dv.value):
        _, kernel = disintegrate(dv.gamma, fill=_affine_kernel(model, m))
        const = ControlPath.constant(T, N, kernel, m, m)
        head, term, tail = obj.certificate_parts(const)
        candidates.append((head + tail, head, tail, term, const, {"source": "constant"}))
        starts.append(obj.logits_for(const.kernels))
    else:
        uniform = np.where(mask, 1.0, 0.0) / mask.sum(axis=1)[:, None]
        starts.append(obj.logits_for(np.repeat(uniform[None], N, axis=0)))
    if warm_start is not None:
        if not np.allclose(warm_start.start, m, atol=1e-12):
            raise ValidationError("warm start path begins at m")
        warm = resample_path(warm_start, model, T, N, mask, tol=opts.ipf_tol)
        if warm is not None:
            head, term, tail = obj.certificate_parts(warm)
            if math.isfinite(head + tail):
                candidates.append((head + tail, head, tail, term, warm, {"source": "warm_start"}))
            starts.append(obj.logits_for(warm.kernels))

    start_values = [obj.evaluate(theta) for theta in starts]
    best = int(np.argmin(start_values))
    if math.isfinite(start_values[best]):
        theta, total_iters = starts[best], 0
        # exterior penalty continuation: stiffen the negativity penalty until
        # the optimized trajectory passes the feasibility check
        for _ in range(opts.penalty_rounds):
            theta, _, gnorm, iters, stalled = _gradient_descent(obj, theta, opts)
            total_iters += iters
            path = obj.path(theta)
            if path.trajectory.min() >= -opts.feasibility_tol:
                break
            obj.penalty *= 100.0
        if path.trajectory.min() >= -opts.feasibility_tol:
            head, term, tail = obj.certificate_parts(path)
            if math.isfinite(head + tail):
                candidates.append(
                    (head + tail, head, tail, term, path,
                     {"source": "optimized", "iterations": total_iters, "grad_norm": gnorm,
                      "stalled": stalled, "penalty": obj.penalty})
                )
    if not candidates:
        return RateCertificate(math.inf, math.inf, math.inf, math.inf, None, m, T, N, {"feasible": True})
    value, head, tail, term, path, diag = min(candidates, key=lambda c: c[0])
    diag = dict(diag, feasible=True, min_trajectory=float(path.trajectory.min()))
    # rounding in the KL sums can leave a value of order -1e-16 at the fixed point
    return RateCertificate(max(value, 0.0), head, tail, term, path, m, T, N, diag)
