import itertools

import numpy as np
import pytest

from homokin.errors import UnsupportedMeasure
from homokin.measure import EmpiricalMeasure, random_directions, w1_exact, w1_sliced


def _cloud(seed, n):
    return EmpiricalMeasure(np.random.default_rng(seed).normal(size=(n, 6)))


def test_weights_default_uniform():
    mu = _cloud(0, 5)
    assert mu.is_uniform()
    np.testing.assert_allclose(mu.weights, 0.2)


@pytest.mark.parametrize("weights", [[0.5, 0.6], [1.5, -0.5], [1.0]])
def test_bad_weights_rejected(weights):
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((2, 6)), weights)


def test_points_must_be_six_dimensional():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((3, 4)))


def test_split_accessors():
    x = np.arange(6.0).reshape(2, 3)
    w = -x
    mu = EmpiricalMeasure.from_arrays(x, w)
    np.testing.assert_array_equal(mu.x, x)
    np.testing.assert_array_equal(mu.w, w)


def test_w1_exact_identity_and_diracs():
    mu = _cloud(1, 10)
    assert w1_exact(mu, mu) == 0.0
    p, q = np.array([[1.0, 0, 0, 0, 0, 0]]), np.array([[0.0, 0, 0, 3.0, 4.0, 0]])
    assert w1_exact(EmpiricalMeasure(p), EmpiricalMeasure(q)) == pytest.approx(np.linalg.norm(p - q))


def test_w1_exact_matches_permutation_search():
    rng = np.random.default_rng(2)
    for trial in range(100):
        n = int(rng.integers(1, 7))
        mu = EmpiricalMeasure(rng.normal(size=(n, 6)))
        nu = EmpiricalMeasure(rng.normal(size=(n, 6)))
        best = min(
            np.mean(np.linalg.norm(mu.points - nu.points[list(perm)], axis=1))
            for perm in itertools.permutations(range(n))
        )
        assert w1_exact(mu, nu) == pytest.approx(best, rel=1e-12), f"trial {trial}, N={n}"


def test_w1_exact_metric_axioms():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        a, b, c = (EmpiricalMeasure(rng.normal(size=(n, 6))) for _ in range(3))
        ab, bc, ac = w1_exact(a, b), w1_exact(b, c), w1_exact(a, c)
        assert ac <= ab + bc + 1e-9
        assert abs(ab - w1_exact(b, a)) <= 1e-9
        assert w1_exact(a, a) == 0.0
        assert ab > 0


def test_w1_exact_is_symmetric_and_translation_covariant():
    mu, nu = _cloud(4, 6), _cloud(5, 6)
    assert w1_exact(mu, nu) == pytest.approx(w1_exact(nu, mu), rel=1e-12)
    c = np.array([1.0, 2.0, 0.0, 0.0, -1.0, 0.5])
    assert w1_exact(mu, mu.shifted(c)) == pytest.approx(np.linalg.norm(c), rel=1e-12)


@pytest.mark.parametrize("mu,nu", [
    (EmpiricalMeasure(np.zeros((2, 6))), EmpiricalMeasure(np.zeros((3, 6)))),
    (EmpiricalMeasure(np.zeros((2, 6)), [0.3, 0.7]), EmpiricalMeasure(np.zeros((2, 6)))),
])
def test_w1_exact_unsupported(mu, nu):
    with pytest.raises(UnsupportedMeasure):
        w1_exact(mu, nu)


def test_w1_sliced_identity():
    mu = _cloud(6, 20)
    assert w1_sliced(mu, mu) == 0.0


def test_w1_sliced_on_a_line_matches_sorting():
    rng = np.random.default_rng(7)
    direction = np.array([1.0, 2.0, 0.0, -1.0, 0.5, 0.0])
    direction /= np.linalg.norm(direction)
    a, b = rng.normal(size=50), rng.normal(loc=0.3, size=50)
    mu = EmpiricalMeasure(a[:, None] * direction)
    nu = EmpiricalMeasure(b[:, None] * direction)
    expected = np.mean(np.abs(np.sort(a) - np.sort(b)))
    assert w1_sliced(mu, nu, directions=direction) == pytest.approx(expected, abs=1e-9)


def test_w1_sliced_accepts_unequal_sizes_and_weights():
    mu = EmpiricalMeasure(np.random.default_rng(8).normal(size=(7, 6)), np.full(7, 1 / 7))
    nu = EmpiricalMeasure(np.random.default_rng(9).normal(size=(3, 6)), [0.2, 0.3, 0.5])
    value = w1_sliced(mu, nu, n_projections=16, seed=4)
    assert value > 0
    assert value == w1_sliced(mu, nu, n_projections=16, seed=4)


def test_w1_sliced_bounded_by_exact():
    mu, nu = _cloud(10, 30), _cloud(11, 30)
    assert w1_sliced(mu, nu, n_projections=128) <= w1_exact(mu, nu) + 1e-12


def test_projection_directions_are_reproducible_unit_vectors():
    u = random_directions(32, seed=5)
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0)
    np.testing.assert_array_equal(u, random_directions(32, seed=5))
    assert not np.array_equal(u, random_directions(32, seed=6))
