"""Probability vectors, pair measures and relative entropy on a finite state space.

Probability vectors and pair measures are plain numpy arrays; the helpers here
validate them, clean up rounding noise and compute the handful of derived
quantities every other module needs.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

SIMPLEX_TOL = 1e-12
# Inputs whose total mass is off by more than this are rejected rather than renormalized.
_MASS_SLACK = 1e-9


def prob_vec(p, d: int | None = None, *, name: str = "probability vector") -> np.ndarray:
    """Validate ``p`` as a point of the simplex and return a clean float copy.

    Entries in ``[-1e-12, 0)`` are clamped to zero and the vector is
    renormalized so that its mass is one to machine precision.
    """
    arr = np.array(p, dtype=float)
    if arr.ndim != 1:
        raise ValidationError(f"{name} is one-dimensional", f"got shape {arr.shape}")
    if arr.size < 2:
        raise ValidationError(f"{name} has at least two states", f"got {arr.size}")
    if d is not None and arr.size != d:
        raise ValidationError(f"{name} has dimension {d}", f"got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} is finite")
    if arr.min() < -SIMPLEX_TOL:
        raise ValidationError(f"{name} is nonnegative", f"min entry {arr.min():.3e}")
    arr[arr < 0] = 0.0
    total = arr.sum()
    if abs(total - 1.0) > _MASS_SLACK:
        raise ValidationError(f"{name} sums to one", f"sum {total!r}")
    return arr / total


def pair_measure(q, d: int | None = None, *, name: str = "pair measure") -> np.ndarray:
    """Validate ``q`` as a probability measure on the product space."""
    arr = np.array(q, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"{name} is a square matrix", f"got shape {arr.shape}")
    if d is not None and arr.shape[0] != d:
        raise ValidationError(f"{name} has dimension {d}", f"got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} is finite")
    if arr.min() < -SIMPLEX_TOL:
        raise ValidationError(f"{name} is nonnegative", f"min entry {arr.min():.3e}")
    arr[arr < 0] = 0.0
    total = arr.sum()
    if abs(total - 1.0) > _MASS_SLACK:
        raise ValidationError(f"{name} has total mass one", f"sum {total!r}")
    return arr / total


def stochastic_matrix(k, d: int | None = None, *, name: str = "kernel", tol: float = 1e-9) -> np.ndarray:
    """Validate a row-stochastic matrix and renormalize its rows."""
    arr = np.array(k, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"{name} is a square matrix", f"got shape {arr.shape}")
    if d is not None and arr.shape[0] != d:
        raise ValidationError(f"{name} has dimension {d}", f"got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)) or arr.min() < -SIMPLEX_TOL:
        raise ValidationError(f"{name} has nonnegative finite entries")
    arr[arr < 0] = 0.0
    rows = arr.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > tol):
        raise ValidationError(f"{name} is row-stochastic", f"row sums {rows.tolist()}")
    return arr / rows[:, None]


def marginals(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First (row) and second (column) marginals of a pair measure."""
    return q.sum(axis=1), q.sum(axis=0)


def support(q: np.ndarray) -> np.ndarray:
    """Boolean mask of strictly positive entries."""
    return np.asarray(q) > 0


def disintegrate(q: np.ndarray, fill: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split a pair measure into its first marginal and the conditional kernel.

    Rows with zero marginal mass get the corresponding row of ``fill`` (or the
    uniform row when ``fill`` is omitted) so the kernel stays stochastic.
    """
    first = q.sum(axis=1)
    d = q.shape[0]
    kernel = np.empty_like(q, dtype=float)
    for x in range(d):
        if first[x] > 0:
            kernel[x] = q[x] / first[x]
        elif fill is not None:
            kernel[x] = fill[x]
        else:
            kernel[x] = 1.0 / d
    return first, kernel


def relative_entropy(p, q) -> float:
    """Kullback-Leibler divergence ``sum p log(p/q)`` in nats.

    Uses ``0 log 0 = 0`` and returns ``inf`` when ``p`` charges a point where
    ``q`` vanishes. Works for vectors and matrices alike.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def product_measure(m: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """The pair measure ``m(x) K(x, y)`` (written ``m (x) K`` in the docs)."""
    return m[:, None] * kernel


def l1(a, b) -> float:
    """The l1 distance used throughout for probability vectors."""
    return float(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)).sum())
