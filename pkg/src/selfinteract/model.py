"""Affine kernel maps, example builders and assumption checks.

Every model is stored in the canonical affine form

    G(m)(x, y) = base(x, y) + sum_z m(z) * tensor(z, x, y),

together with a 0/1 adjacency matrix whose support contains the support of
every G(m). States are indexed ``0 .. d-1``.

Builders provided by :func:`build_example`:

- ``qsd``: the reinforced scheme for quasi-stationary distributions of a chain
  absorbed at state 0.
- ``polya``: mixture of per-colour kernels (generalized urn).
- ``row-independent``: every row equals ``m @ M``.
- ``pagerank``: personalized PageRank with history-dependent teleportation.
- ``edge-reinforced``: edge-reinforced walk lifted to directed edges.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.sparse import csgraph

from .errors import ConvergenceError, ValidationError
from .measures import SIMPLEX_TOL, prob_vec, stochastic_matrix

_STRUCT_TOL = 1e-12
# Vertex-tuple enumeration for the product positivity check is capped here.
MAX_POSITIVITY_DIM = 8


def is_irreducible(adjacency) -> bool:
    """Strong connectivity of the directed graph with the given 0/1 matrix."""
    a = np.asarray(adjacency) > 0
    n_comp, _ = csgraph.connected_components(a.astype(np.int8), directed=True, connection="strong")
    return n_comp == 1


@dataclass(frozen=True)
class AdjacencySpec:
    """0/1 support template for the kernels; ``a_plus`` lists its nonzero entries."""

    a: np.ndarray
    a_plus: tuple[tuple[int, int], ...] = field(init=False)
    irreducible: bool = field(init=False)

    def __post_init__(self):
        arr = np.array(self.a)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValidationError("adjacency is a square matrix", f"got shape {arr.shape}")
        if not np.all(np.isin(arr, (0, 1))):
            raise ValidationError("adjacency entries are 0 or 1")
        arr = arr.astype(np.int8)
        arr.setflags(write=False)
        object.__setattr__(self, "a", arr)
        pairs = tuple((int(x), int(y)) for x, y in zip(*np.nonzero(arr)))
        object.__setattr__(self, "a_plus", pairs)
        object.__setattr__(self, "irreducible", is_irreducible(arr))

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.a.astype(bool)

    @classmethod
    def full(cls, d: int) -> AdjacencySpec:
        return cls(np.ones((d, d), dtype=np.int8))


def lipschitz_constant(tensor: np.ndarray) -> float:
    """Half the largest l1 distance between two vertex slices of the tensor.

    For an affine map this is the smallest L with
    ``sum |G(m) - G(m')| <= L * ||m - m'||_1`` on the simplex.
    """
    d = tensor.shape[0]
    flat = tensor.reshape(d, -1)
    best = 0.0
    for z in range(d):
        best = max(best, float(np.abs(flat[z] - flat).sum(axis=1).max()))
    return 0.5 * best


def _vertex_kernels(base: np.ndarray, tensor: np.ndarray) -> np.ndarray:
    """``base + tensor[z]`` for every vertex measure ``e_z``; shape (d, d, d)."""
    return base[None, :, :] + tensor


@dataclass(frozen=True)
class ModelSpec:
    """An affine kernel map together with its adjacency template.

    Use :meth:`from_arrays` (or :func:`build_example`) rather than the raw
    constructor: it checks the structural invariants and fills in the derived
    constants ``lipschitz_bound`` and ``delta0A``.
    """

    base: np.ndarray
    tensor: np.ndarray
    adjacency: AdjacencySpec
    lipschitz_bound: float
    delta0A: float | None
    kind: str = "explicit"
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.base.shape[0]

    @classmethod
    def from_arrays(
        cls,
        base,
        tensor,
        adjacency=None,
        *,
        kind: str = "explicit",
        params: dict[str, Any] | None = None,
    ) -> ModelSpec:
        base = np.array(base, dtype=float)
        tensor = np.array(tensor, dtype=float)
        if base.ndim != 2 or base.shape[0] != base.shape[1]:
            raise ValidationError("base is a square matrix", f"got shape {base.shape}")
        d = base.shape[0]
        if d < 2:
            raise ValidationError("state space has at least two states")
        if tensor.shape != (d, d, d):
            raise ValidationError("tensor has shape (d, d, d)", f"got {tensor.shape} for d={d}")
        if not (np.all(np.isfinite(base)) and np.all(np.isfinite(tensor))):
            raise ValidationError("model arrays are finite")
        vertices = _vertex_kernels(base, tensor)
        if vertices.min() < -_STRUCT_TOL:
            raise ValidationError("vertex kernels are nonnegative", f"min entry {vertices.min():.3e}")
        rows = vertices.sum(axis=2)
        if np.abs(rows - 1.0).max() > 1e-10:
            raise ValidationError(
                "vertex kernels are row-stochastic", f"max row-sum error {np.abs(rows - 1.0).max():.3e}"
            )
        if adjacency is None:
            adjacency = AdjacencySpec((vertices.max(axis=0) > 0).astype(np.int8))
        elif not isinstance(adjacency, AdjacencySpec):
            adjacency = AdjacencySpec(np.asarray(adjacency))
        if adjacency.d != d:
            raise ValidationError("adjacency has dimension d", f"got {adjacency.d} for d={d}")
        off = ~adjacency.mask
        if np.abs(base[off]).max(initial=0.0) > _STRUCT_TOL or np.abs(tensor[:, off]).max(initial=0.0) > _STRUCT_TOL:
            raise ValidationError("kernel vanishes off the adjacency support")
        base = base.copy()
        tensor = tensor.copy()
        base[off] = 0.0
        tensor[:, off] = 0.0
        base.setflags(write=False)
        tensor.setflags(write=False)
        return cls(
            base=base,
            tensor=tensor,
            adjacency=adjacency,
            lipschitz_bound=lipschitz_constant(tensor),
            delta0A=_delta0A_tight(base, tensor, adjacency),
            kind=kind,
            params=dict(params or {}),
        )

    def vertex_kernel(self, z: int) -> np.ndarray:
        return self.base + self.tensor[z]


def _delta0A_vertex(base, tensor, adjacency: AdjacencySpec) -> float:
    vertices = _vertex_kernels(base, tensor)
    return float(vertices[:, adjacency.mask].min())


def _delta0A_tight(base, tensor, adjacency: AdjacencySpec) -> float:
    # G(m)(x,y) = sum_z m_z (B + T_z)(x,y) >= min_z m_z * sum_z (B + T_z)(x,y),
    # with equality at the uniform measure, so this is the largest valid constant.
    vertices = _vertex_kernels(base, tensor)
    return float(vertices.sum(axis=0)[adjacency.mask].min())


def eval_kernel(model: ModelSpec, m) -> np.ndarray:
    """The row-stochastic matrix ``G(m)``.

    ``m`` may also be a stack of measures with shape ``(..., d)``; the result
    then has shape ``(..., d, d)``.
    """
    arr = np.asarray(m, dtype=float)
    if arr.shape[-1] != model.d:
        raise ValidationError("measure dimension matches the model", f"got {arr.shape[-1]}, model d={model.d}")
    if arr.ndim == 1:
        arr = prob_vec(arr, model.d, name="m")
    k = model.base + np.tensordot(arr, model.tensor, axes=([-1], [0]))
    k[..., ~model.adjacency.mask] = 0.0
    np.maximum(k, 0.0, out=k)
    return k


def eval_row(model: ModelSpec, m: np.ndarray, x: int) -> np.ndarray:
    """Row ``x`` of ``G(m)`` without building the full matrix."""
    return model.base[x] + m @ model.tensor[:, x, :]


# ---------------------------------------------------------------------------
# example builders


def _require(params: dict, *keys: str, kind: str) -> None:
    missing = [k for k in keys if k not in params]
    if missing:
        raise ValidationError(f"{kind} parameters include {', '.join(missing)}")


def _build_qsd(params: dict) -> ModelSpec:
    _require(params, "P", kind="qsd")
    full = stochastic_matrix(params["P"], name="P (with absorbing state 0)")
    d = full.shape[0] - 1
    if d < 2:
        raise ValidationError("P has at least two transient states")
    p_abs = full[1:, 0]
    p_sub = full[1:, 1:]
    if not is_irreducible(p_sub > 0):
        raise ValidationError("P restricted to the transient states is irreducible")
    tensor = np.zeros((d, d, d))
    for z in range(d):
        tensor[z, :, z] = p_abs
    a = ((p_sub + p_abs[:, None]) > 0).astype(np.int8)
    return ModelSpec.from_arrays(p_sub, tensor, AdjacencySpec(a), kind="qsd", params={"P": full.tolist()})


def _build_polya(params: dict) -> ModelSpec:
    _require(params, "M", kind="polya")
    mats = np.array(params["M"], dtype=float)
    if mats.ndim != 3 or mats.shape[1] != mats.shape[2] or mats.shape[0] != mats.shape[1]:
        raise ValidationError("polya M is a list of d kernels of size d x d", f"got shape {mats.shape}")
    d = mats.shape[0]
    mats = np.stack([stochastic_matrix(mats[z], d, name=f"M[{z}]") for z in range(d)])
    supp = mats[0] > 0
    for z in range(1, d):
        if not np.array_equal(mats[z] > 0, supp):
            raise ValidationError("every polya kernel M[z] has the same support A_+")
    if not is_irreducible(supp):
        raise ValidationError("polya adjacency A is irreducible")
    return ModelSpec.from_arrays(
        np.zeros((d, d)), mats, AdjacencySpec(supp.astype(np.int8)), kind="polya", params={"M": mats.tolist()}
    )


def _build_row_independent(params: dict) -> ModelSpec:
    _require(params, "M", kind="row-independent")
    mat = stochastic_matrix(params["M"], name="M")
    if not is_irreducible(mat > 0):
        raise ValidationError("row-independent M is irreducible")
    d = mat.shape[0]
    tensor = np.repeat(mat[:, None, :], d, axis=1)
    return ModelSpec.from_arrays(
        np.zeros((d, d)), tensor, AdjacencySpec.full(d), kind="row-independent", params={"M": mat.tolist()}
    )


def _build_pagerank(params: dict) -> ModelSpec:
    _require(params, "Q", "alpha", "theta", "q", "M", kind="pagerank")
    link = stochastic_matrix(params["Q"], name="Q")
    d = link.shape[0]
    alpha = np.array(params["alpha"], dtype=float)
    if alpha.ndim == 0:
        alpha = np.full(d, float(alpha))
    if alpha.shape != (d,) or np.any(alpha <= 0) or np.any(alpha >= 1):
        raise ValidationError("damping factors alpha lie in (0, 1)")
    theta = float(params["theta"])
    if not 0 < theta <= 1:
        raise ValidationError("theta lies in (0, 1]")
    teleport = prob_vec(params["q"], d, name="q")
    if teleport.min() <= 0:
        raise ValidationError("teleport distribution q is strictly positive")
    mats = np.array(params["M"], dtype=float)
    if mats.shape != (d, d, d):
        raise ValidationError("pagerank M is a list of d kernels of size d x d", f"got shape {mats.shape}")
    mats = np.stack([stochastic_matrix(mats[x], d, name=f"M[{x}]") for x in range(d)])
    for x in range(d):
        if not is_irreducible(mats[x] > 0):
            raise ValidationError(f"pagerank kernel M[{x}] is irreducible")
    p_sub = (1 - alpha)[:, None] * link + theta * alpha[:, None] * teleport[None, :]
    p_abs = alpha * (1 - theta)
    # G(m)(x, y) = P(x, y) + P(x, 0) * (m M^x)(y)  =>  tensor(z, x, y) = P(x, 0) M^x(z, y)
    tensor = p_abs[None, :, None] * np.transpose(mats, (1, 0, 2))
    a = ((p_sub + p_abs[:, None]) > 0).astype(np.int8)
    clean = {"Q": link.tolist(), "alpha": alpha.tolist(), "theta": theta, "q": teleport.tolist(), "M": mats.tolist()}
    return ModelSpec.from_arrays(p_sub, tensor, AdjacencySpec(a), kind="pagerank", params=clean)


def edge_states(graph: np.ndarray) -> list[tuple[int, int]]:
    """Directed edges of an undirected graph in lexicographic order."""
    return [(int(u), int(v)) for u, v in zip(*np.nonzero(graph))]


def _build_edge_reinforced(params: dict) -> ModelSpec:
    _require(params, "delta", kind="edge-reinforced")
    if "graph" in params:
        graph = np.array(params["graph"], dtype=int)
    elif "edges" in params:
        edges = [tuple(int(v) for v in e) for e in params["edges"]]
        n_vert = int(params.get("vertices", 1 + max(max(e) for e in edges)))
        graph = np.zeros((n_vert, n_vert), dtype=int)
        for u, v in edges:
            graph[u, v] = graph[v, u] = 1
    else:
        raise ValidationError("edge-reinforced parameters include graph or edges")
    if graph.ndim != 2 or graph.shape[0] != graph.shape[1] or not np.all(np.isin(graph, (0, 1))):
        raise ValidationError("graph is a square 0/1 matrix")
    if not np.array_equal(graph, graph.T):
        raise ValidationError("graph is undirected (symmetric)")
    if np.any(np.diag(graph)):
        raise ValidationError("graph has no self-loops")
    if not is_irreducible(graph) or graph.shape[0] < 2:
        raise ValidationError("graph is connected")
    delta = float(params["delta"])
    if not 0 < delta < 1:
        raise ValidationError("reinforcement strength delta lies in (0, 1)")
    states = edge_states(graph)
    index = {s: i for i, s in enumerate(states)}
    d = len(states)
    degree = graph.sum(axis=1)
    a = np.zeros((d, d), dtype=np.int8)
    for i, (_, head) in enumerate(states):
        for j, (tail, _) in enumerate(states):
            a[i, j] = int(head == tail)
    base = a / degree[[s[1] for s in states]][:, None]
    # hat m(w) = (m(w) + m(w reversed)) / 2, so the coefficient of m(u) in hat m(w)
    # is half the indicator that w is u or its reverse.
    sym = np.zeros((d, d))
    for u, (p, q) in enumerate(states):
        sym[u, u] += 0.5
        sym[u, index[(q, p)]] += 0.5
    tensor = np.zeros((d, d, d))
    for u in range(d):
        reach = a @ sym[u]  # sum over neighbours of hat-coefficients, per row z
        inv_deg = 1.0 / degree[[s[1] for s in states]]
        tensor[u] = delta * a * (sym[u][None, :] - (inv_deg * reach)[:, None])
    clean = {"graph": graph.tolist(), "delta": delta, "states": [list(s) for s in states]}
    return ModelSpec.from_arrays(base, tensor, AdjacencySpec(a), kind="edge-reinforced", params=clean)


_BUILDERS = {
    "qsd": _build_qsd,
    "polya": _build_polya,
    "row-independent": _build_row_independent,
    "pagerank": _build_pagerank,
    "edge-reinforced": _build_edge_reinforced,
}

EXAMPLE_KINDS = tuple(_BUILDERS)


def build_example(kind: str, params: dict[str, Any]) -> ModelSpec:
    """Compile one of the named example families into a :class:`ModelSpec`."""
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ValidationError("model kind is one of " + ", ".join(EXAMPLE_KINDS), f"got {kind!r}") from None
    return builder(dict(params))


def constant_model(kernel, adjacency=None) -> ModelSpec:
    """An m-independent model ``G(m) = kernel`` (zero tensor)."""
    kernel = stochastic_matrix(kernel)
    d = kernel.shape[0]
    if adjacency is None:
        adjacency = AdjacencySpec((kernel > 0).astype(np.int8))
    return ModelSpec.from_arrays(kernel, np.zeros((d, d, d)), adjacency, kind="constant", params={"kernel": kernel.tolist()})


# ---------------------------------------------------------------------------
# fixed point


@dataclass(frozen=True)
class FixedPoint:
    point: np.ndarray
    residual: float
    iterations: int
    positive: bool
    history: tuple[float, ...] = ()


def fixed_point_residual(model: ModelSpec, m: np.ndarray) -> float:
    return float(np.abs(m @ eval_kernel(model, m) - m).sum())


def fixed_point(
    model: ModelSpec,
    damping: float = 0.5,
    tol: float = 1e-12,
    max_iter: int = 200_000,
    *,
    record_history: bool = False,
) -> FixedPoint:
    """Solve ``pi G(pi) = pi`` by damped iteration from the uniform measure."""
    if not 0 < damping <= 1:
        raise ValidationError("damping lies in (0, 1]", f"got {damping}")
    d = model.d
    m = np.full(d, 1.0 / d)
    history: list[float] = []
    residual = np.inf
    for it in range(max_iter + 1):
        image = m @ eval_kernel(model, m)
        residual = float(np.abs(image - m).sum())
        if record_history:
            history.append(residual)
        if residual <= tol:
            return FixedPoint(m, residual, it, bool(m.min() > 0), tuple(history))
        m = (1 - damping) * m + damping * image
        m = np.maximum(m, 0.0)
        m /= m.sum()
    raise ConvergenceError("fixed-point iteration converges within max_iter", residual)


# ---------------------------------------------------------------------------
# assumption checks


@dataclass(frozen=True)
class AssumptionReport:
    lipschitz: float
    delta0A_vertex: float
    delta0A: float
    delta0A_holds: bool
    delta0A_random_ok: bool
    positivity_attempted: bool
    positivity_holds: bool | None
    positivity_K: int | None
    irreducible: bool

    def as_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def _bool_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a.astype(np.int32) @ b.astype(np.int32)) > 0


def product_positivity(model: ModelSpec, max_k: int | None = None) -> int | None:
    """Smallest K such that every prefix-sum of K vertex-kernel products is positive.

    Entry (x, y) of ``sum_{j<=K} G(m_1)...G(m_j)`` is multilinear with
    nonnegative coefficients, so positivity for all measures reduces to
    positivity at all vertex tuples, and then only supports matter. Returns
    ``None`` when no K up to ``max_k`` (default d) works.
    """
    d = model.d
    max_k = d if max_k is None else max_k
    supports = [model.vertex_kernel(z) > 0 for z in range(d)]
    full = np.ones((d, d), dtype=bool)
    # frontier of (current product support, accumulated union) pairs that are not yet full
    frontier = {(np.eye(d, dtype=bool).tobytes(), np.zeros((d, d), dtype=bool).tobytes())}
    for k in range(1, max_k + 1):
        nxt = set()
        for prod_bytes, union_bytes in frontier:
            prod = np.frombuffer(prod_bytes, dtype=bool).reshape(d, d)
            union = np.frombuffer(union_bytes, dtype=bool).reshape(d, d)
            for s in supports:
                new_prod = _bool_matmul(prod, s)
                new_union = union | new_prod
                if not np.array_equal(new_union, full):
                    nxt.add((new_prod.tobytes(), new_union.tobytes()))
        if not nxt:
            return k
        frontier = nxt
    return None


def check_assumptions(model: ModelSpec, *, n_random: int = 1000, seed: int = 0) -> AssumptionReport:
    """Numerical check of the structural assumptions the theory relies on."""
    vertex = _delta0A_vertex(model.base, model.tensor, model.adjacency)
    tight = model.delta0A if model.delta0A is not None else 0.0
    rng = np.random.default_rng(seed)
    sample = rng.dirichlet(np.ones(model.d), size=n_random)
    kernels = eval_kernel(model, sample)
    mask = model.adjacency.mask
    lower = tight * sample.min(axis=1)
    random_ok = bool(np.all(kernels[:, mask] >= lower[:, None] - SIMPLEX_TOL))
    if model.d <= MAX_POSITIVITY_DIM:
        k_min = product_positivity(model)
        attempted, holds = True, k_min is not None
    else:
        k_min, attempted, holds = None, False, None
    return AssumptionReport(
        lipschitz=model.lipschitz_bound,
        delta0A_vertex=vertex,
        delta0A=tight,
        delta0A_holds=bool(tight > 0),
        delta0A_random_ok=random_ok,
        positivity_attempted=attempted,
        positivity_holds=holds,
        positivity_K=k_min,
        irreducible=model.adjacency.irreducible,
    )


# ---------------------------------------------------------------------------
# serialization


def model_to_dict(model: ModelSpec) -> dict[str, Any]:
    return {
        "d": model.d,
        "base": model.base.tolist(),
        "tensor": model.tensor.tolist(),
        "adjacency": model.adjacency.a.tolist(),
        "kind": model.kind,
        "params": model.params,
    }


_MODEL_KEYS = {"d", "base", "tensor", "adjacency", "kind", "params"}


def model_from_dict(doc: dict[str, Any]) -> ModelSpec:
    """Rebuild a model from explicit arrays, or from ``kind`` plus ``params``."""
    unknown = set(doc) - _MODEL_KEYS
    if unknown:
        raise ValidationError("model section has only known keys", f"unexpected {sorted(unknown)}")
    if "base" in doc or "tensor" in doc:
        if "base" not in doc or "tensor" not in doc:
            raise ValidationError("explicit model gives both base and tensor")
        model = ModelSpec.from_arrays(
            doc["base"], doc["tensor"], doc.get("adjacency"), kind=doc.get("kind", "explicit"), params=doc.get("params")
        )
    elif "kind" in doc:
        if doc["kind"] == "constant":
            model = constant_model(doc.get("params", {}).get("kernel"), doc.get("adjacency"))
        else:
            model = build_example(doc["kind"], doc.get("params", {}))
    else:
        raise ValidationError("model section gives kind or explicit arrays")
    if "d" in doc and int(doc["d"]) != model.d:
        raise ValidationError("declared d matches the arrays", f"declared {doc['d']}, actual {model.d}")
    return model


def vertex_tuples(d: int, k: int):
    """All length-k tuples of vertex indices (for brute-force oracles)."""
    return itertools.product(range(d), repeat=k)
