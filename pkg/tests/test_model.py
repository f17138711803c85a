import json

import numpy as np
import pytest

from mfmeta.fixtures import bistable_model, constant_rate_model, random_model
from mfmeta.model import (CENTRAL, PERIPHERAL, BlockModel, CallableRates, ColorGraph, ModelError,
                          RateFamily, RateTerm, check_vector, load_model, model_from_dict,
                          model_to_dict, product_metric, renormalize, save_model, validate_model)


def _random_vector(rng, shape):
    return rng.dirichlet(np.ones(shape[1]), size=shape[0])


def test_valid_constant_model_has_empty_report():
    assert validate_model(constant_rate_model(2, 1.0)) == []


def test_alpha_sum_violation_reported():
    m = constant_rate_model(2, 1.0, n_blocks=2)
    m.alpha = np.array([0.5, 0.4])
    rep = validate_model(m)
    assert any("alpha sum" in r for r in rep)


def test_reducible_graph_reported():
    g = ColorGraph(3, [(0, 1), (1, 0)])
    m = BlockModel([1.0], [0.5], [0.5], g, RateFamily(0.5, 1.0, {(c, e): 1.0 for c in (0, 1) for e in g.edges}))
    rep = validate_model(m)
    assert any("irreducib" in r for r in rep)
    with pytest.raises(ModelError):
        m.check()


def test_self_loop_and_proportions_reported():
    g = ColorGraph(2, [(0, 1), (1, 0), (1, 1)])
    assert any("self-loop" in p for p in g.problems())
    m = constant_rate_model(2, 1.0)
    m.p_peripheral = np.array([0.6])
    assert validate_model(m)


def test_ceiling_violation_reported():
    m = bistable_model()
    m.rates.ceiling = 0.5
    assert any("ceiling" in r for r in validate_model(m))


def test_product_metric_examples(rng):
    a = np.array([[1.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert product_metric(a, a) == 0.0
    assert product_metric(a, b) == 1.0
    for _ in range(100):
        x, y = _random_vector(rng, (4, 3)), _random_vector(rng, (4, 3))
        brute = max(abs(x[i, j] - y[i, j]) for i in range(4) for j in range(3))
        assert product_metric(x, y) == brute


def test_product_metric_axioms(rng):
    for _ in range(1000):
        x, y, z = (_random_vector(rng, (2, 3)) for _ in range(3))
        assert abs(product_metric(x, y) - product_metric(y, x)) <= 1e-12
        assert product_metric(x, z) <= product_metric(x, y) + product_metric(y, z) + 1e-12
        assert product_metric(x, x) == 0.0


def test_uniform_vector():
    assert np.array_equal(constant_rate_model(2).uniform(), np.full((2, 2), 0.5))
    u = constant_rate_model(4, n_blocks=2).uniform()
    assert u.shape == (4, 4) and np.all(u == 0.25)
    assert np.allclose(u.sum(axis=1), 1.0)


def test_renormalize_clamps_dust_only():
    x = renormalize([[1.0 + 1e-13, -1e-13]])
    assert x.min() == 0.0 and x.sum() == 1.0
    with pytest.raises(ModelError):
        renormalize([[1.1, -0.1]])
    with pytest.raises(ModelError):
        check_vector(np.ones((2, 2)), 2, 2)


def test_rate_bounds_on_random_arguments(rng):
    for m in (bistable_model(), bistable_model(0.2, 0.23, n_blocks=2), random_model(rng, 3, 2)):
        x = rng.dirichlet(np.ones(m.n_colors), size=(1000, m.n_components))
        lam = m.edge_rates(x)
        assert lam.min() >= m.floor
        assert lam.max() <= m.ceiling


def test_parametric_rates_match_direct_formula(rng):
    m = bistable_model(0.2, 0.25, b=1.5, n_blocks=2, p_central=0.3)
    x = rng.dirichlet(np.ones(2), size=(50, 4))
    lam = m.edge_rates(x)
    alpha = m.alpha
    for v, l in zip(x, lam):
        for j in range(2):
            mc = 0.3 * v[2 * j] + 0.7 * v[2 * j + 1]
            mp = 0.3 * v[2 * j] + 0.7 * (alpha[0] * v[1] + alpha[1] * v[3])
            for q, mm in ((2 * j, mc), (2 * j + 1, mp)):
                assert np.isclose(l[q, 0], 0.2 + 1.5 * mm[1] ** 2)
                assert np.isclose(l[q, 1], 0.25 + 1.5 * mm[0] ** 2)


def test_callable_rates_agree_with_parametric(rng):
    ref = bistable_model()

    def central(mc, mp):
        m = 0.5 * mc + 0.5 * mp
        return [0.24 + 1.5 * m[1] ** 2, 0.24 + 1.5 * m[0] ** 2]

    def peripheral(mc, mps):
        m = 0.5 * mc + 0.5 * mps[0]
        return [0.24 + 1.5 * m[1] ** 2, 0.24 + 1.5 * m[0] ** 2]

    m = BlockModel([1.0], [0.5], [0.5], ref.graph, CallableRates(central, peripheral, 1e-3, 1.74))
    x = rng.dirichlet(np.ones(2), size=(20, 2))
    assert np.allclose(m.edge_rates(x), ref.edge_rates(x))


def test_generator_rows_sum_to_zero(rng):
    m = random_model(rng, 3, 2)
    Q = m.generator(rng.dirichlet(np.ones(3), size=(10, 4)))
    assert np.allclose(Q.sum(axis=-1), 0.0)


def test_slot_errors():
    fam = RateFamily(0.1, 1.0, {}, [RateTerm(CENTRAL, (0, 1), 1.0, (("p3", 0),))])
    m = BlockModel([1.0], [0.5], [0.5], ColorGraph.complete(2), fam)
    with pytest.raises(ModelError):
        m.kernel_tables()
    fam = RateFamily(0.1, 1.0, {}, [RateTerm(PERIPHERAL, (0, 1), 1.0, (("p", 0),))])
    m = BlockModel([1.0], [0.5], [0.5], ColorGraph.complete(2), fam)
    with pytest.raises(ModelError):
        m.kernel_tables()


def test_serialization_round_trip(tmp_path, rng):
    for m in (bistable_model(0.2, 0.3, n_blocks=2), random_model(rng, 3, 2)):
        d = model_to_dict(m)
        m2 = model_from_dict(json.loads(json.dumps(d)))
        x = rng.dirichlet(np.ones(m.n_colors), size=(5, m.n_components))
        assert np.array_equal(m.edge_rates(x), m2.edge_rates(x))
        save_model(m, tmp_path / "m.json")
        m3 = load_model(tmp_path / "m.json")
        assert np.array_equal(m.edge_rates(x), m3.edge_rates(x))


def test_shipped_example_model_loads():
    from pathlib import Path
    m = load_model(Path(__file__).parents[1] / "configs" / "bistable_model.json")
    assert validate_model(m) == []
    ref = bistable_model()
    x = ref.uniform()
    assert np.allclose(m.edge_rates(x), ref.edge_rates(x))
