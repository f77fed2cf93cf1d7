import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvsde.errors import InvalidInputError, UsageError
from mmvsde.measure import (EmpiricalMeasure, coupling_upper_bound, entropic_w2, second_moment,
                            wasserstein2)


def brute_force_w2(x, y):
    n = x.shape[0]
    best = min(np.sum((x - y[list(p)]) ** 2) for p in itertools.permutations(range(n)))
    return np.sqrt(best / n)


def test_second_moment_examples():
    assert second_moment(EmpiricalMeasure(np.zeros((1, 2)))) == 0.0
    assert second_moment(EmpiricalMeasure([[3.0, 4.0]])) == 5.0
    assert abs(second_moment(EmpiricalMeasure([0.0, 2.0])) - np.sqrt(2)) < 1e-15


def test_w2_examples():
    mu = EmpiricalMeasure([0.0, 2.0])
    assert wasserstein2(mu, mu) == 0.0
    assert abs(wasserstein2(EmpiricalMeasure([[1.5, 0]]), EmpiricalMeasure([[-0.5, 0]])) - 2.0) < 1e-12
    nu = EmpiricalMeasure([1.0, 3.0])
    for method in ("exact_1d", "exact_assignment"):
        assert abs(wasserstein2(mu, nu, method) - 1.0) < 1e-12


def test_assignment_matches_permutation_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 4))
        x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        w = wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(y), "exact_assignment")
        assert abs(w - brute_force_w2(x, y)) < 1e-10
        if d == 1:
            assert abs(wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(y), "exact_1d") - w) < 1e-10


def test_exact_1d_weighted_quantile_coupling():
    # mu = 1/4 d0 + 3/4 d1, nu = 1/2 d0 + 1/2 d2: move 1/4 from 1 to 0 and 1/2 from 1 to 2
    mu = EmpiricalMeasure([0.0, 1.0], [0.25, 0.75])
    nu = EmpiricalMeasure([0.0, 2.0], [0.5, 0.5])
    assert abs(wasserstein2(mu, nu, "exact_1d") - np.sqrt(0.25 * 1 + 0.5 * 1)) < 1e-12


def test_coupling_bound_examples():
    assert coupling_upper_bound([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert coupling_upper_bound([0.0, 0.0], [1.0, -1.0]) == 1.0
    assert wasserstein2(EmpiricalMeasure([0.0, 0.0]), EmpiricalMeasure([1.0, -1.0])) == 1.0
    assert coupling_upper_bound([0.0, 2.0], [2.0, 0.0]) == 2.0
    assert wasserstein2(EmpiricalMeasure([0.0, 2.0]), EmpiricalMeasure([2.0, 0.0])) == 0.0
    with pytest.raises(UsageError):
        coupling_upper_bound([0.0], [1.0, 2.0])


def test_coupling_bound_dominates_w2():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        x, y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        assert coupling_upper_bound(x, y) >= wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(y)) - 1e-12
    x, y = np.sort(rng.normal(size=20)), np.sort(rng.normal(size=20))
    assert abs(coupling_upper_bound(x, y) - wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(y))) < 1e-12


def test_entropic_converges_on_n64():
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(64, 2)), rng.normal(loc=0.5, size=(64, 2))
    mu, nu = EmpiricalMeasure(x), EmpiricalMeasure(y)
    exact = wasserstein2(mu, nu, "exact_assignment")
    gaps = []
    for eps in (0.5, 0.125, 0.03125, 0.0078125, 1e-3):
        res = entropic_w2(mu, nu, eps_final=eps)
        assert res.lower - 1e-9 <= exact <= res.value + 1e-9
        gaps.append(abs(res.value - exact))
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_entropic_weighted_default_route():
    mu = EmpiricalMeasure([[0.0, 0.0], [1.0, 0.0]], [0.3, 0.7])
    nu = EmpiricalMeasure([[0.0, 1.0]])
    # single target point: W2^2 = sum w |x - y|^2
    assert abs(wasserstein2(mu, nu) - np.sqrt(0.3 * 1 + 0.7 * 2)) < 1e-3


def test_usage_errors():
    a, b = EmpiricalMeasure(np.zeros((3, 2))), EmpiricalMeasure(np.zeros((4, 2)))
    with pytest.raises(UsageError):
        wasserstein2(a, b, "exact_assignment")
    with pytest.raises(UsageError):
        wasserstein2(a, a, "exact_1d")
    with pytest.raises(UsageError):
        wasserstein2(a, EmpiricalMeasure([1.0]))
    with pytest.raises(InvalidInputError):
        EmpiricalMeasure([np.inf])
    with pytest.raises(InvalidInputError):
        EmpiricalMeasure([1.0, 2.0], [0.5, -0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8), st.floats(-5, 5))
def test_w2_translation_in_1d(xs, shift):
    x = np.array(xs)
    assert abs(wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(x + shift)) - abs(shift)) < 1e-9
