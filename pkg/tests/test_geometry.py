import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialpop.errors import ParameterError
from spatialpop.geometry import (HierAddress, HierGeography, TorusGeography, ball_members,
                                 degree_geometric, green_at_zero, hier_distance, hier_distance_index,
                                 mean_field, recurrence_integral, sample_hier_jump)


def brute_distance(a, b):
    # smallest k such that all digits at positions >= k agree
    L = len(a)
    for k in range(L + 1):
        if a[k:] == b[k:]:
            return k
    return L


def test_hier_distance_matches_definition():
    N, L = 3, 3
    addrs = [HierAddress(d, N) for d in itertools.product(range(N), repeat=L)]
    for a in addrs:
        for b in addrs:
            assert hier_distance(a, b) == brute_distance(a.digits, b.digits)
            assert hier_distance_index(a.index, b.index, N, L) == hier_distance(a, b)


@given(st.integers(2, 4), st.integers(1, 4), st.data())
@settings(max_examples=50, deadline=None)
def test_ultrametric_and_roundtrip(N, L, data):
    idx = st.integers(0, N**L - 1)
    i, j, k = (HierAddress.from_index(data.draw(idx), N, L) for _ in range(3))
    assert HierAddress.from_index(i.index, N, L) == i
    assert hier_distance(i, j) == hier_distance(j, i)
    assert hier_distance(i, j) <= max(hier_distance(i, k), hier_distance(k, j))


def test_ball_members_size_and_radius():
    c = HierAddress((1, 0, 2), 3)
    for k in range(4):
        ball = ball_members(c, k)
        assert len(ball) == 3**k
        assert all(hier_distance(c, b) <= k for b in ball)
    with pytest.raises(ParameterError):
        ball_members(c, 4)


def test_address_validation():
    with pytest.raises(ParameterError):
        HierAddress((0, 3), 3)
    with pytest.raises(ParameterError):
        HierAddress((0,), 1)


@pytest.mark.parametrize("geo", [
    HierGeography(2, 3, (1.0, 0.5, 0.25)),
    HierGeography(3, 2, (2.0, 1.0)),
    TorusGeography.simple(1, 3),
    TorusGeography.simple(2, 2),
    TorusGeography(1, 2, (((1,), 0.7), ((-2,), 0.3))),
])
def test_generator_matches_kernel_matrix(geo):
    rng = np.random.default_rng(0)
    x = rng.random((4, geo.n_sites))
    A = geo.kernel_matrix()
    expected = x @ A.T - x * A.sum(axis=1)
    np.testing.assert_allclose(geo.migration_generator(x), expected, atol=1e-12)
    np.testing.assert_allclose(A.sum(axis=1), geo.total_rate, atol=1e-12)


def test_hier_kernel_symmetric_and_torus_wraps():
    A = HierGeography(2, 3, (1.0, 0.5, 0.25)).kernel_matrix()
    np.testing.assert_allclose(A, A.T)
    T = TorusGeography.simple(1, 2).kernel_matrix()
    # the box [-2, 2] has 5 sites; the rightmost site neighbours the leftmost
    assert T[4, 0] == pytest.approx(0.5)
    assert T[0, 4] == pytest.approx(0.5)


def test_hier_jump_levels_frequency():
    geo = HierGeography(2, 3, (1.0, 1.0, 1.0))
    rng = np.random.default_rng(1)
    dest = geo.sample_jumps(np.zeros(200_000, dtype=np.int64), rng)
    # level k+1 chosen with prob proportional to c_k / N^k, then a uniform point of the ball
    p_level = np.array([1.0, 0.5, 0.25]) / 1.75
    p_site = np.zeros(8)
    for k, p in enumerate(p_level):
        p_site[: 2 ** (k + 1)] += p / 2 ** (k + 1)
    freq = np.bincount(dest, minlength=8) / dest.size
    np.testing.assert_allclose(freq, p_site, atol=4e-3)
    a = sample_hier_jump(HierAddress((0, 0, 0), 2), geo, rng)
    assert isinstance(a, HierAddress)


def test_zero_rate_walks():
    with pytest.raises(ParameterError):
        HierGeography(2, 2, (0.0, 0.0))
    still = TorusGeography(1, 2, (((0,), 1.0),))
    assert still.total_rate == 0
    est = green_at_zero(still, 5.0, 10, 0)
    assert est.value == pytest.approx(5.0)


def test_torus_validation():
    with pytest.raises(ParameterError):
        TorusGeography(1, 2, (((1,), 0.5),))
    with pytest.raises(ParameterError):
        TorusGeography(2, 2, (((1,), 1.0),))
    assert TorusGeography.simple(2, 1).is_simple


def test_degree_geometric():
    assert degree_geometric(1.0, 2) == 0.0
    assert degree_geometric(2.0, 4) == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        degree_geometric(5.0, 4)


def test_green_mean_field_exact():
    # uniform jumps on N sites at rate c: P(X_t = 0) = 1/N + (1 - 1/N) e^{-ct}
    N, c, T = 4, 1.5, 6.0
    est = green_at_zero(mean_field(N, c), T, 4000, np.random.default_rng(2))
    exact = T / N + (1 - 1 / N) * (1 - math.exp(-c * T)) / c
    assert abs(est.value - exact) < 4 * est.stderr


def test_recurrence_integral_rate_zero():
    still = TorusGeography(1, 2, (((0,), 1.0),))
    est = recurrence_integral(still, 0.5, 10.0, 5, 0)
    assert est.value == pytest.approx(math.log(10.0))
    with pytest.raises(ParameterError):
        recurrence_integral(still, 1.5, 10.0, 5, 0)


def test_green_stderr_scales_with_replicas():
    # SE ~ R^-1/2: quadrupling R halves it (doubling only divides by sqrt 2)
    geo = mean_field(4, 1.0)
    se1 = green_at_zero(geo, 5.0, 2000, np.random.default_rng(3)).stderr
    se4 = green_at_zero(geo, 5.0, 8000, np.random.default_rng(4)).stderr
    assert se1 / se4 == pytest.approx(2.0, rel=0.2)
