import json

import numpy as np
import pytest
from conftest import (
    EXAMPLE_PARAMS,
    QSD_P,
    QSD_P_SMALL,
    TRIANGLE,
    perron_left,
    random_affine_model,
)
from hypothesis import given, settings
from hypothesis import strategies as st

from selfinteract.errors import ConvergenceError, ValidationError
from selfinteract.measures import l1, pair_measure, prob_vec
from selfinteract.model import (
    AdjacencySpec,
    ModelSpec,
    build_example,
    check_assumptions,
    constant_model,
    eval_kernel,
    fixed_point,
    lipschitz_constant,
    model_from_dict,
    model_to_dict,
    product_positivity,
)


def simplex_points(rng, d, count):
    return rng.dirichlet(np.ones(d), size=count)


# -- measures ---------------------------------------------------------------


def test_prob_vec_clamps_and_rejects():
    p = prob_vec([0.5, 0.5 + 5e-13, -5e-13])
    assert p.min() == 0.0 and abs(p.sum() - 1) <= 1e-12
    with pytest.raises(ValidationError):
        prob_vec([0.5, 0.6])
    with pytest.raises(ValidationError):
        prob_vec([1.0])
    with pytest.raises(ValidationError):
        prob_vec([0.5, 0.5], d=3)


def test_pair_measure_validation():
    q = pair_measure([[0.25, 0.25], [0.25, 0.25]])
    assert q.shape == (2, 2)
    with pytest.raises(ValidationError):
        pair_measure([[0.5, 0.5], [0.5, 0.5]])


# -- adjacency --------------------------------------------------------------


def test_adjacency_support_and_irreducibility():
    cyc = AdjacencySpec(np.array([[0, 1], [1, 0]]))
    assert cyc.a_plus == ((0, 1), (1, 0))
    assert cyc.irreducible
    assert not AdjacencySpec(np.array([[1, 1], [0, 1]])).irreducible
    with pytest.raises(ValidationError):
        AdjacencySpec(np.array([[0, 2], [1, 0]]))


# -- eval_kernel ------------------------------------------------------------


def test_qsd_kernel_example():
    model = build_example("qsd", {"P": QSD_P_SMALL})
    np.testing.assert_allclose(eval_kernel(model, [0.5, 0.5]), [[0.4, 0.6], [0.8, 0.2]], atol=1e-15)


def test_qsd_affine_form():
    model = build_example("qsd", {"P": QSD_P})
    p = np.array(QSD_P)
    np.testing.assert_array_equal(model.base, p[1:, 1:])
    for z in range(2):
        expected = np.zeros((2, 2))
        expected[:, z] = p[1:, 0]
        np.testing.assert_array_equal(model.tensor[z], expected)


def test_constant_model_ignores_measure():
    k = np.array([[0.2, 0.8], [0.7, 0.3]])
    model = constant_model(k)
    np.testing.assert_array_equal(eval_kernel(model, [0.9, 0.1]), k)


def test_vertex_measure_gives_vertex_kernel(examples):
    for model in examples.values():
        for z in range(model.d):
            e = np.zeros(model.d)
            e[z] = 1.0
            np.testing.assert_allclose(eval_kernel(model, e), model.base + model.tensor[z], atol=1e-15)


def test_dimension_mismatch_raises(qsd):
    with pytest.raises(ValidationError):
        eval_kernel(qsd, [0.2, 0.3, 0.5])


def test_rows_stochastic_and_supported(examples):
    rng = np.random.default_rng(1)
    for model in examples.values():
        ks = eval_kernel(model, simplex_points(rng, model.d, 1000))
        assert np.abs(ks.sum(axis=2) - 1).max() <= 1e-12
        assert np.all(ks[:, ~model.adjacency.mask] == 0)
        assert ks.min() >= 0


def test_affinity(examples):
    rng = np.random.default_rng(2)
    for model in examples.values():
        a, b = simplex_points(rng, model.d, 2)
        for kappa in rng.uniform(size=20):
            lhs = eval_kernel(model, kappa * a + (1 - kappa) * b)
            rhs = kappa * eval_kernel(model, a) + (1 - kappa) * eval_kernel(model, b)
            assert np.abs(lhs - rhs).max() <= 1e-12


def test_lipschitz_bound(examples):
    rng = np.random.default_rng(3)
    for model in examples.values():
        a = simplex_points(rng, model.d, 1000)
        b = simplex_points(rng, model.d, 1000)
        lhs = np.abs(eval_kernel(model, a) - eval_kernel(model, b)).sum(axis=(1, 2))
        assert np.all(lhs <= model.lipschitz_bound * np.abs(a - b).sum(axis=1) + 1e-12)


def test_lipschitz_is_tight_on_vertices(qsd):
    # the bound is attained between two vertices
    e0, e1 = np.eye(2)
    gap = np.abs(eval_kernel(qsd, e0) - eval_kernel(qsd, e1)).sum()
    assert gap == pytest.approx(qsd.lipschitz_bound * 2)


# -- builders ---------------------------------------------------------------


def test_row_independent_swap():
    model = build_example("row-independent", {"M": [[0, 1], [1, 0]]})
    np.testing.assert_array_equal(model.base, np.zeros((2, 2)))
    for z in range(2):
        for x in range(2):
            np.testing.assert_array_equal(model.tensor[z, x], [[0, 1], [1, 0]][z])


def test_edge_reinforced_triangle():
    model = build_example("edge-reinforced", EXAMPLE_PARAMS["edge-reinforced"])
    states = [tuple(s) for s in model.params["states"]]
    assert model.d == 6 and len(set(states)) == 6
    for i, (_, head) in enumerate(states):
        for j, (tail, _) in enumerate(states):
            assert model.adjacency.a[i, j] == int(head == tail)


def test_edge_reinforced_uses_symmetrized_measure():
    model = build_example("edge-reinforced", EXAMPLE_PARAMS["edge-reinforced"])
    states = [tuple(s) for s in model.params["states"]]
    rng = np.random.default_rng(4)
    m = rng.dirichlet(np.ones(6))
    flipped = np.array([m[states.index((q, p))] for p, q in states])
    np.testing.assert_allclose(eval_kernel(model, m), eval_kernel(model, flipped), atol=1e-14)


@pytest.mark.parametrize(
    "kind, params",
    [
        ("qsd", {"P": [[1, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5]]}),
        ("row-independent", {"M": [[1, 0], [0, 1]]}),
        ("edge-reinforced", {"graph": [[0, 1, 0], [1, 0, 0], [0, 0, 0]], "delta": 0.3}),
        ("edge-reinforced", {"graph": [[1, 1], [1, 0]], "delta": 0.3}),
        ("edge-reinforced", {"graph": TRIANGLE, "delta": 1.5}),
        ("polya", {"M": [[[0.5, 0.5], [1, 0]], [[0.5, 0.5], [0.5, 0.5]]]}),
        ("nonsense", {}),
        ("qsd", {}),
    ],
)
def test_builder_rejections(kind, params):
    with pytest.raises(ValidationError):
        build_example(kind, params)


def test_from_arrays_rejects_off_support_mass():
    with pytest.raises(ValidationError):
        ModelSpec.from_arrays(np.full((2, 2), 0.5), np.zeros((2, 2, 2)), [[0, 1], [1, 0]])


def test_from_arrays_rejects_non_stochastic():
    with pytest.raises(ValidationError):
        ModelSpec.from_arrays(np.full((2, 2), 0.6), np.zeros((2, 2, 2)))


# -- fixed point ------------------------------------------------------------


@pytest.mark.parametrize("matrix", [QSD_P, QSD_P_SMALL])
def test_qsd_fixed_point_matches_perron(matrix):
    model = build_example("qsd", {"P": matrix})
    fp = fixed_point(model)
    oracle = perron_left(model.base)
    assert l1(fp.point, oracle) <= 1e-8
    assert fp.residual <= 1e-10 and fp.positive


def test_qsd_fixed_point_value():
    fp = fixed_point(build_example("qsd", {"P": QSD_P_SMALL}))
    np.testing.assert_allclose(fp.point, [0.590, 0.410], atol=1e-3)


def test_fixed_point_doubly_stochastic_is_uniform():
    model = constant_model([[0.2, 0.3, 0.5], [0.5, 0.2, 0.3], [0.3, 0.5, 0.2]])
    np.testing.assert_allclose(fixed_point(model).point, np.full(3, 1 / 3), atol=1e-12)


def test_fixed_point_row_independent_swap():
    model = build_example("row-independent", {"M": [[0, 1], [1, 0]]})
    np.testing.assert_allclose(fixed_point(model).point, [0.5, 0.5], atol=1e-12)


def test_fixed_point_damping_invariance(qsd):
    points = [fixed_point(qsd, damping=a).point for a in (0.3, 0.7, 1.0)]
    for p in points[1:]:
        assert l1(p, points[0]) <= 1e-8


def test_fixed_point_residual_monotone_after_burn_in(qsd):
    hist = np.array(fixed_point(qsd, record_history=True).history)
    tail = hist[5:]
    assert np.all(np.diff(tail) <= 1e-15)


def test_fixed_point_convergence_error(qsd):
    with pytest.raises(ConvergenceError) as info:
        fixed_point(qsd, tol=1e-300, max_iter=3)
    assert info.value.residual > 0


def test_fixed_point_all_examples(examples):
    for model in examples.values():
        fp = fixed_point(model)
        assert np.abs(fp.point @ eval_kernel(model, fp.point) - fp.point).sum() <= 1e-12


# -- assumptions ------------------------------------------------------------


def test_constant_model_lipschitz_zero():
    report = check_assumptions(constant_model(np.full((2, 2), 0.5)))
    assert report.lipschitz == 0.0


def test_qsd_positivity_with_two_products():
    model = build_example("qsd", {"P": QSD_P_SMALL})
    report = check_assumptions(model)
    assert report.positivity_holds and report.positivity_K == 2
    # independent oracle: boolean powers of the transient support
    s = model.base > 0
    assert not np.all(s)
    assert np.all(s | ((s.astype(int) @ s.astype(int)) > 0))


def test_two_cycle_delta0A_is_vertex_minimum():
    model = ModelSpec.from_arrays(
        np.zeros((2, 2)), [[[0, 1], [1, 0]], [[0, 1], [1, 0]]], [[0, 1], [1, 0]]
    )
    report = check_assumptions(model)
    vertex_min = min(model.vertex_kernel(z)[x, y] for z in range(2) for x, y in model.adjacency.a_plus)
    assert report.delta0A_vertex == vertex_min == 1.0
    assert report.delta0A_holds and report.delta0A_random_ok


def test_delta0A_holds_on_random_points(examples):
    for model in examples.values():
        report = check_assumptions(model, n_random=1000)
        assert report.delta0A_random_ok
        assert report.delta0A >= report.delta0A_vertex - 1e-15
        assert report.irreducible


def test_product_positivity_fails_for_periodic_chain():
    model = constant_model([[0, 1], [1, 0]])
    # the sums P + P^2 are positive, so K = 2 works
    assert product_positivity(model) == 2
    block = constant_model([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    assert product_positivity(block) == 3


def test_positivity_not_attempted_above_cap():
    model = constant_model(np.full((9, 9), 1 / 9))
    report = check_assumptions(model, n_random=10)
    assert not report.positivity_attempted and report.positivity_holds is None


# -- serialization ----------------------------------------------------------


def test_model_round_trip(examples):
    for model in examples.values():
        doc = json.loads(json.dumps(model_to_dict(model)))
        back = model_from_dict(doc)
        np.testing.assert_array_equal(back.base, model.base)
        np.testing.assert_array_equal(back.tensor, model.tensor)
        np.testing.assert_array_equal(back.adjacency.a, model.adjacency.a)


def test_model_from_dict_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        model_from_dict({"kind": "qsd", "params": {"P": QSD_P}, "colour": "red"})


def test_model_from_dict_by_kind():
    model = model_from_dict({"kind": "qsd", "params": {"P": QSD_P}})
    assert model.d == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_random_models_satisfy_invariants(d, seed):
    rng = np.random.default_rng(seed)
    model = random_affine_model(rng, d)
    pts = simplex_points(rng, d, 50)
    ks = eval_kernel(model, pts)
    assert np.abs(ks.sum(axis=2) - 1).max() <= 1e-12
    assert lipschitz_constant(model.tensor) == pytest.approx(model.lipschitz_bound)
    fp = fixed_point(model)
    assert fp.positive
