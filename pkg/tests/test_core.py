import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multivalid.core import (
    BucketGrid,
    ConfigurationError,
    DomainError,
    GroupSystem,
    K_epsilon_bracket,
    RateFunction,
    bucket_index,
    compute_eta,
    compute_K_epsilon,
    int_to_mask,
    mask_to_int,
    partial_sum,
    rate_f,
    tail_bound,
)

# sum_{n>=0} 1/((n+1) log2^2(n+2)), from the independent high-precision route below
K1_GOLDEN = 1.6276477466841209


def _K_mpmath(eps: float, N: int = 2000) -> mpmath.mpf:
    """Oracle: explicit sum to N plus an Euler-Maclaurin tail after x + 2 = e^t."""
    mpmath.mp.dps = 40
    eps = mpmath.mpf(eps)
    ln2 = mpmath.log(2)

    def g(x):
        return 1 / ((x + 1) * (mpmath.log(x + 2) / ln2) ** (1 + eps))

    head = mpmath.fsum(g(n) for n in range(N))
    # integral_N^inf g(x) dx with x + 2 = e^t: g(e^t - 2) e^t dt
    integral = mpmath.quad(lambda t: g(mpmath.e ** t - 2) * mpmath.e ** t,
                           [mpmath.log(N + 2), 20, 200, mpmath.inf])
    d1 = mpmath.diff(g, N)
    d3 = mpmath.diff(g, N, 3)
    # sum_{n>=N} g(n) = integral + g(N)/2 - g'(N)/12 + g'''(N)/720 - ...
    return head + integral + g(N) / 2 - d1 / 12 + d3 / 720


@pytest.mark.parametrize("q,expected", [(0.0, 1), (1.0, 40), (0.5, 21), (0.025, 2),
                                        (0.0249, 1), (0.975, 40), (0.9749, 39)])
def test_bucket_index_examples(q, expected):
    assert bucket_index(q, BucketGrid(40)) == expected


@pytest.mark.parametrize("q", [-1e-9, 1.000001, math.nan])
def test_bucket_index_rejects_outside_unit_interval(q):
    with pytest.raises(DomainError):
        bucket_index(q, BucketGrid(40))


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 200))
def test_buckets_partition_unit_interval(q, m):
    grid = BucketGrid(m)
    hits = [i for i in range(1, m + 1)
            if ((i - 1) / m <= q < i / m) or (i == m and (m - 1) / m <= q <= 1.0)]
    # float edges: allow the neighbour when q is within rounding of an edge
    i = bucket_index(q, grid)
    assert len(hits) == 1
    assert i == hits[0] or abs(q * m - round(q * m)) < 1e-9


def test_grid_has_rm_plus_one_points():
    grid = BucketGrid(4, 5)
    assert grid.grid().size == 21
    assert grid.grid()[0] == 0.0 and grid.grid()[-1] == 1.0
    assert grid.grid_index(0.35) == 7
    with pytest.raises(DomainError):
        grid.grid_index(0.333)


def test_bucket_of_grid_index_matches_bucket_index():
    grid = BucketGrid(40, 100)
    for k in range(grid.resolution + 1):
        assert grid.bucket_of_grid_index(k) == bucket_index(k / grid.resolution, grid)


@pytest.mark.parametrize("m,r", [(0, 1), (1, 0), (2.5, 1)])
def test_grid_validation(m, r):
    with pytest.raises(ConfigurationError):
        BucketGrid(m, r)


def test_rate_function_examples():
    assert rate_f(0) == 1.0
    assert rate_f(2) == pytest.approx(math.sqrt(12), rel=1e-12)
    assert RateFunction().alpha(2) == pytest.approx(1.7321, abs=5e-5)
    with pytest.raises(DomainError):
        RateFunction().alpha(0)
    with pytest.raises(DomainError):
        rate_f(-1)


def test_rate_function_monotone_and_at_least_one():
    f = rate_f(np.arange(0, 10**6 + 1))
    assert np.all(np.diff(f) >= 0)
    assert f.min() >= 1.0


def test_partial_sums_are_lower_bounds():
    assert partial_sum(1, 1.0) == 1.0
    three = 1 + 1 / (2 * math.log2(3) ** 2) + 1 / (3 * math.log2(4) ** 2)
    assert partial_sum(3, 1.0) == pytest.approx(three, rel=1e-14)
    assert three == pytest.approx(1.2824, abs=5e-5)
    assert compute_K_epsilon(1.0) > three


def test_K1_matches_high_precision_oracle():
    oracle = float(_K_mpmath(1.0))
    assert oracle == pytest.approx(K1_GOLDEN, abs=1e-12)
    assert compute_K_epsilon(1.0, tol=1e-6) == pytest.approx(oracle, abs=1e-6)


@pytest.mark.parametrize("eps", [0.5, 2.0])
def test_K_other_epsilon_matches_oracle(eps):
    assert compute_K_epsilon(eps, tol=1e-6) == pytest.approx(float(_K_mpmath(eps)), abs=1e-6)


@pytest.mark.parametrize("eps", [0.5, 1.0, 3.0])
def test_K_sandwich(eps):
    N, lower, estimate, upper = K_epsilon_bracket(eps)
    s = partial_sum(N, eps)
    assert s <= lower <= estimate <= upper <= s + tail_bound(N, eps) + 1e-12


@pytest.mark.parametrize("eps,tol", [(0.0, 1e-6), (-1.0, 1e-6), (1.0, 0.0)])
def test_K_domain_errors(eps, tol):
    with pytest.raises(DomainError):
        compute_K_epsilon(eps, tol)


def test_eta_examples():
    assert compute_eta(1, 2, 2.0) == pytest.approx(math.sqrt(math.log(2) / 8), rel=1e-14)
    assert compute_eta(1, 2, 2.0) == pytest.approx(0.2944, abs=5e-5)
    K = compute_K_epsilon(1.0)
    assert compute_eta(20, 40, K) == pytest.approx(math.sqrt(math.log(800) / (1600 * K)))
    with pytest.raises(ConfigurationError):
        compute_eta(1, 1, 2.0)
    with pytest.raises(DomainError):
        compute_eta(1, 40, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(1, 500), st.floats(1.0, 100.0))
def test_eta_in_open_half_interval(g, m, K):
    if g * m < 2:
        with pytest.raises(ConfigurationError):
            compute_eta(g, m, K)
        return
    assert 0.0 < compute_eta(g, m, K) < 0.5


def test_group_system_membership_and_masks():
    gs = GroupSystem([("pos", lambda x: x[0] > 0), ("even", lambda x: x[1] % 2 == 0)])
    assert gs.membership([1.0, 3]).tolist() == [True, False]
    assert gs.membership_matrix([[1.0, 2], [-1.0, 3]]).tolist() == [[True, True],
                                                                   [False, False]]
    assert mask_to_int([True, False, True]) == 5
    assert int_to_mask(5, 3).tolist() == [True, False, True]
    with pytest.raises(ConfigurationError):
        GroupSystem([])
    with pytest.raises(ConfigurationError):
        GroupSystem([("a", bool), ("a", bool)])
    assert len(GroupSystem.everything()) == 1
