import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from designselect.ratios import (ClassifierRatio, ExactRatio, ProductCategorical, SmoothedRatio,
                                 UnnormalizedRatio, exact_ratio, fit_mdre, fit_smoothed,
                                 max_ratio, mdre_ratio)
from designselect.sim import SequenceSpace


def _random_dist(rng, L, A, conc=1.0):
    return ProductCategorical(rng.dirichlet(np.full(A, conc), size=L))


def test_identical_distributions_give_one():
    rng = np.random.default_rng(0)
    p = _random_dist(rng, 3, 4)
    x = SequenceSpace(3, 4).enumerate()
    assert np.all(exact_ratio(p, p, x) == 1.0)


def test_ratio_arithmetic():
    lab = ProductCategorical.uniform(2, 4)
    design = ProductCategorical(np.array([[0.5, 0.5 / 3, 0.5 / 3, 0.5 / 3], [0.25] * 4]))
    for b in range(4):
        assert exact_ratio(design, lab, np.array([0, b])) == pytest.approx(2.0, abs=1e-15)


def test_zero_labeled_density_is_an_error():
    lab = ProductCategorical(np.array([[0.0, 1.0], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        exact_ratio(ProductCategorical.uniform(2, 2), lab, np.array([0, 1]))


def test_probabilities_validated():
    with pytest.raises(ValueError):
        ProductCategorical(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        ProductCategorical(np.array([[1.5, -0.5]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 10_000))
def test_change_of_measure_identity(L, A, seed):
    rng = np.random.default_rng(seed)
    lab, design = _random_dist(rng, L, A, 3.0), _random_dist(rng, L, A, 0.7)
    x = SequenceSpace(L, A).enumerate()
    h = rng.normal(size=x.shape[0])
    lhs = np.sum(lab.all_probs() * exact_ratio(design, lab, x) * h)
    rhs = np.sum(design.all_probs() * h)
    assert abs(lhs - rhs) <= 1e-10


def test_all_probs_matches_prob():
    rng = np.random.default_rng(1)
    p = _random_dist(rng, 3, 3)
    x = SequenceSpace(3, 3).enumerate()
    assert np.allclose(p.all_probs(), p.prob(x), rtol=1e-14, atol=0)
    assert p.all_probs().sum() == pytest.approx(1.0, abs=1e-14)


def test_max_ratio_is_attained():
    rng = np.random.default_rng(2)
    lab, design = _random_dist(rng, 3, 4), _random_dist(rng, 3, 4, 0.5)
    x = SequenceSpace(3, 4).enumerate()
    assert max_ratio(design, lab) == pytest.approx(exact_ratio(design, lab, x).max(), rel=1e-12)


def test_text_round_trip():
    rng = np.random.default_rng(3)
    p = _random_dist(rng, 4, 5)
    q = ProductCategorical.from_text(p.to_text())
    assert np.array_equal(p.probs, q.probs)
    assert p.to_text().splitlines()[0] == "4 5"
    with pytest.raises(ValueError):
        ProductCategorical.from_text("2 2\n0.5 0.5\n")


def test_sample_frequencies():
    rng = np.random.default_rng(4)
    p = _random_dist(rng, 3, 4)
    n = 20_000
    x = p.sample(n, 5)
    for s in range(3):
        freq = np.bincount(x[:, s], minlength=4) / n
        sd = np.sqrt(p.probs[s] * (1 - p.probs[s]) / n)
        assert np.all(np.abs(freq - p.probs[s]) <= 4 * sd + 1e-12)


def test_fit_smoothed_examples():
    u = fit_smoothed([], 3, 4)
    assert np.all(u.probs == 0.25)
    p = fit_smoothed(np.array([[0, 1], [0, 2]]), 2, 4)
    assert p.probs[0, 0] == pytest.approx(0.5)
    assert p.probs[0, 1] == pytest.approx(1 / 6)
    with pytest.raises(ValueError):
        fit_smoothed(np.array([[0, 1, 2]]), 2, 4)


def test_fit_smoothed_consistency():
    rng = np.random.default_rng(6)
    truth = _random_dist(rng, 3, 4)
    n = 20_000
    fit = fit_smoothed(truth.sample(n, 7), 3, 4)
    sd = np.sqrt(truth.probs * (1 - truth.probs) / n)
    assert np.all(np.abs(fit.probs - truth.probs) <= 3 * sd + 1.0 / n)


def test_fit_smoothed_total_variation_shrinks():
    rng = np.random.default_rng(8)
    truth = _random_dist(rng, 4, 5)

    def tv(n, seed):
        fit = fit_smoothed(truth.sample(n, seed), 4, 5)
        return 0.5 * np.abs(fit.probs - truth.probs).sum(axis=1).max()

    small = np.mean([tv(100, s) for s in range(10)])
    large = np.mean([tv(10_000, s) for s in range(10)])
    assert large < small / 4
    assert large < 0.03


def test_ratio_providers():
    rng = np.random.default_rng(9)
    lab, design = _random_dist(rng, 3, 3), _random_dist(rng, 3, 3)
    x = lab.sample(50, 10)
    exact = ExactRatio(design, lab)
    assert np.array_equal(exact(x), exact_ratio(design, lab, x))
    assert exact.max_ratio == max_ratio(design, lab)
    unnorm = UnnormalizedRatio(lambda s: design.log_prob(s) + 2.0, lambda s: lab.log_prob(s) - 1.0)
    assert np.allclose(unnorm(x), exact(x) * math.exp(3.0), rtol=1e-12)
    sm = SmoothedRatio.from_samples(design.sample(100, 1), x, 3, 3)
    assert sm.max_ratio is None
    assert np.all(sm(x) > 0)


# --- classifier-based ratios ------------------------------------------------------

def test_mdre_same_distribution_gives_unit_ratio():
    rng = np.random.default_rng(11)
    p = _random_dist(rng, 3, 4, 2.0)
    model = fit_mdre([("a", p.sample(5000, 1)), ("b", p.sample(5000, 2))], 4)
    x = SequenceSpace(3, 4).enumerate()
    assert np.mean(np.abs(model.log_ratio(x, "a", "b"))) <= 0.1
    assert model.converged


def test_mdre_sign_matches_exact():
    rng = np.random.default_rng(12)
    p, q = _random_dist(rng, 3, 4, 0.8), _random_dist(rng, 3, 4, 0.8)
    model = fit_mdre([("p", p.sample(5000, 3)), ("q", q.sample(5000, 4))], 4)
    x = SequenceSpace(3, 4).enumerate()
    est = model.log_ratio(x, "p", "q")
    exact = np.log(exact_ratio(p, q, x))
    assert np.mean(np.sign(est) == np.sign(exact)) >= 0.95


def test_mdre_ratio_properties():
    rng = np.random.default_rng(13)
    dists = [_random_dist(rng, 2, 3) for _ in range(3)]
    model = fit_mdre([(k, d.sample(500, k)) for k, d in enumerate(dists)], 3)
    x = SequenceSpace(2, 3).enumerate()
    assert np.all(mdre_ratio(model, x, 1, 1) == 1.0)
    for i, j in itertools.permutations(range(3), 2):
        prod = mdre_ratio(model, x, i, j) * mdre_ratio(model, x, j, i)
        assert np.allclose(prod, 1.0, rtol=1e-12, atol=0)
        assert model.max_log_ratio(i, j) == pytest.approx(model.log_ratio(x, i, j).max())
    with pytest.raises(KeyError):
        mdre_ratio(model, x, 0, "missing")
    assert isinstance(mdre_ratio(model, x[0], 0, 1), float)


def test_mdre_ratio_cap():
    rng = np.random.default_rng(14)
    p = ProductCategorical(np.array([[0.98, 0.01, 0.01]] * 3))
    q = ProductCategorical(np.array([[0.01, 0.01, 0.98]] * 3))
    model = fit_mdre([("p", p.sample(2000, 1)), ("q", q.sample(2000, 2))], 3, l2=0.0)
    r = mdre_ratio(model, np.array([[0, 0, 0]]), "p", "q", ratio_cap=10.0)
    assert r[0] == 10.0
    prov = ClassifierRatio(model, "p", "q", ratio_cap=10.0)
    assert prov.max_ratio == 10.0


def test_mdre_input_checks():
    x = np.array([[0, 1], [1, 0]])
    with pytest.raises(ValueError):
        fit_mdre([("a", x)], 2)
    with pytest.raises(ValueError):
        fit_mdre([("a", x), ("a", x)], 2)
    with pytest.raises(ValueError):
        fit_mdre([("a", x), ("b", np.zeros((0, 2), dtype=int))], 2)
    with pytest.warns(UserWarning, match="identical"):
        fit_mdre([("a", x), ("b", x[::-1])], 2)


def test_mdre_is_deterministic():
    rng = np.random.default_rng(15)
    a, b = _random_dist(rng, 2, 3).sample(300, 1), _random_dist(rng, 2, 3).sample(300, 2)
    m1 = fit_mdre([("a", a), ("b", b)], 3)
    m2 = fit_mdre([("a", a), ("b", b)], 3)
    assert np.array_equal(m1.weights, m2.weights)
