import numpy as np
import pytest

from selfinteract.model import build_example, constant_model

QSD_P = [[1.0, 0.0, 0.0], [0.1, 0.3, 0.6], [0.2, 0.6, 0.2]]
# the transient block from the kernel-evaluation example
QSD_P_SMALL = [[1.0, 0.0, 0.0], [0.2, 0.3, 0.5], [0.4, 0.6, 0.0]]

TRIANGLE = [[0, 1, 1], [1, 0, 1], [1, 1, 0]]

EXAMPLE_PARAMS = {
    "qsd": {"P": QSD_P},
    "polya": {
        "M": [
            [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4]],
            [[0.2, 0.5, 0.3], [0.4, 0.4, 0.2], [0.1, 0.6, 0.3]],
            [[0.3, 0.3, 0.4], [0.3, 0.2, 0.5], [0.5, 0.25, 0.25]],
        ]
    },
    "row-independent": {"M": [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.3, 0.3, 0.4]]},
    "pagerank": {
        "Q": [[0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]],
        "alpha": [0.3, 0.4, 0.2],
        "theta": 0.5,
        "q": [0.2, 0.3, 0.5],
        "M": [
            [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]],
            [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
            [[0.4, 0.3, 0.3], [0.3, 0.4, 0.3], [0.3, 0.3, 0.4]],
        ],
    },
    "edge-reinforced": {"graph": TRIANGLE, "delta": 0.3},
}


@pytest.fixture(scope="session")
def qsd():
    return build_example("qsd", {"P": QSD_P})


@pytest.fixture(scope="session")
def uniform2():
    return constant_model(np.full((2, 2), 0.5))


@pytest.fixture(scope="session")
def fixed_point_schedule(qsd):
    """Schedule for the constant control at the fixed point, with its fixed point."""
    from selfinteract.construct import ScheduleConfig, build_schedule, fixed_point_pair
    from selfinteract.model import fixed_point
    from selfinteract.rate import ControlPath

    pistar = fixed_point(qsd).point
    eta = fixed_point_pair(qsd, pistar)
    path = ControlPath.from_pairs(2.0, np.repeat(eta[None], 10, axis=0), pistar, "reversed")
    cfg = ScheduleConfig(block_length=1.0, calibration_reps=200)
    return build_schedule(path, qsd, pistar, cfg), pistar


@pytest.fixture(scope="session")
def examples():
    return {kind: build_example(kind, params) for kind, params in EXAMPLE_PARAMS.items()}


def random_affine_model(rng, d, *, full=True):
    """Affine model whose vertex kernels are random strictly positive kernels."""
    vertices = rng.dirichlet(np.ones(d), size=(d, d))
    base_share = rng.uniform(0.0, 0.5)
    base = base_share * rng.dirichlet(np.ones(d), size=d)
    tensor = (1 - base_share) * vertices
    from selfinteract.model import ModelSpec

    return ModelSpec.from_arrays(base, tensor)


def perron_left(matrix, iters=200_000, tol=1e-15):
    """Normalized left Perron vector of a nonnegative irreducible matrix by power iteration."""
    matrix = np.asarray(matrix, dtype=float)
    v = np.full(matrix.shape[0], 1.0 / matrix.shape[0])
    # a lazy version has the same Perron vector and no periodicity issues
    lazy = 0.5 * (matrix + np.eye(matrix.shape[0]) * matrix.sum(axis=1).max())
    for _ in range(iters):
        w = v @ lazy
        w /= w.sum()
        if np.abs(w - v).sum() < tol:
            return w
        v = w
    return v


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(label: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
