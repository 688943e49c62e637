import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialpop.cannings import LambdaMeasure, ParticleSystem, run_cannings
from spatialpop.errors import IntegrityError, ParameterError
from spatialpop.genealogy import (NO_MRCA, GenealogySample, ball_decomposition, check_sample,
                                  distances_for, dumps_sample, extract_sample, loads_sample,
                                  pair_rate_mle, polynomial_statistic, tmrca, transform_distances,
                                  ultrametric_violation, validate_log)
from spatialpop.geometry import HierGeography


def hand_tree():
    # slot 1 copies slot 0 at t=1, slot 2 copies slot 1 at t=2, observed at t=3
    s = ParticleSystem(1, 3, [0, 1, 1])
    s._birth(1.0, 1, 0, 0, 0)
    s._birth(2.0, 2, 1, 0, 0)
    s.t = 3.0
    return s


def test_hand_built_distances():
    s = hand_tree()
    validate_log(s)
    sample = extract_sample(s, 3, sites=None, replace=False, rng=0)
    # by lineage id: distance 4 to the founder line, 2 between the two copies
    dist, cens = distances_for([0, 3, 4], s.parent, s.birth, s.t)
    np.testing.assert_array_equal(dist, [[0, 4, 4], [4, 0, 2], [4, 2, 0]])
    assert not cens.any()
    assert sorted(np.unique(sample.dist).tolist()) == [0.0, 2.0, 4.0]
    assert tmrca(sample) == 2.0


def test_censoring_and_no_mrca():
    s = ParticleSystem(1, 2)
    s.t = 1.5
    sample = extract_sample(s, 2, rng=0, replace=False)
    assert sample.censored[0, 1]
    assert sample.dist[0, 1] == 3.0
    assert tmrca(sample) is NO_MRCA
    assert repr(NO_MRCA)


def test_validate_log_detects_corruption():
    s = hand_tree()
    s.log.parent[1] = 7
    with pytest.raises(IntegrityError):
        validate_log(s)
    s = hand_tree()
    s.log.time[1] = 0.5
    with pytest.raises(IntegrityError):
        validate_log(s)


@pytest.fixture(scope="module")
def run_system():
    geo = HierGeography(2, 2, (1.0, 0.5))
    s = ParticleSystem.from_frequency(4, 6, 0.5)
    run_cannings(s, geo, d=1.0, lam0=LambdaMeasure.uniform(0.5),
                 blocks={1: (0.5, LambdaMeasure.point(0.4))}, c=1.0, T=3.0,
                 rng=np.random.default_rng(0))
    return s


def test_samples_are_ultrametric(run_system):
    rng = np.random.default_rng(1)
    for _ in range(20):
        sample = extract_sample(run_system, 12, rng)
        check_sample(sample)
        assert ultrametric_violation(sample.dist) <= 1e-9


def test_ball_refinement(run_system):
    sample = extract_sample(run_system, 15, np.random.default_rng(2))
    hs = [0.1, 0.5, 1.0, 2.0, 5.0]
    balls = [ball_decomposition(sample, h) for h in hs]
    for small, big in zip(balls, balls[1:]):
        assert small.refines(big)
    for b in balls:
        assert sum(b.masses) == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        ball_decomposition(sample, 0.0)


def test_polynomial_normalization(run_system):
    sample = extract_sample(run_system, 8, np.random.default_rng(3))
    one = polynomial_statistic(sample, lambda sub: np.ones(sub.shape[0]), m=1)
    assert one.value == 1.0 and one.exhaustive
    # degree 2, distance-based: mean pair distance over ordered pairs with repeats
    p = polynomial_statistic(sample, lambda sub: sub[:, 0, 1], m=2)
    assert p.value == pytest.approx(sample.dist.mean())
    mc = polynomial_statistic(sample, lambda sub: sub[:, 0, 1], m=2, R=20_000, rng=4)
    assert abs(mc.value - p.value) < 5 * mc.stderr


def test_transform_endpoints(run_system):
    sample = extract_sample(run_system, 10, np.random.default_rng(5))
    tr = transform_distances(sample)
    assert np.all(np.diag(tr.dist) == 0.0)
    assert np.all(tr.dist[sample.censored] == 1.0)
    assert np.all((tr.dist >= 0) & (tr.dist <= 1))


def test_sites_restriction(run_system):
    sample = extract_sample(run_system, 5, np.random.default_rng(6), sites=[2])
    assert set(sample.sites.tolist()) == {2}
    with pytest.raises(ParameterError):
        extract_sample(run_system, 7, 0, sites=[2], replace=False)


def test_pair_rate_mle_values():
    rate, se = pair_rate_mle([1.0, 2.0, 3.0], [False, False, True])
    assert rate == pytest.approx(2 / 6)
    assert se == pytest.approx(np.sqrt(2) / 6)


@st.composite
def ultrametric_samples(draw):
    # random ultrametric from merge heights of a random binary clustering
    n = draw(st.integers(1, 7))
    clusters = [[i] for i in range(n)]
    dist = np.zeros((n, n))
    h = 0.0
    while len(clusters) > 1:
        i = draw(st.integers(0, len(clusters) - 1))
        j = draw(st.integers(0, len(clusters) - 2))
        j = j + (j >= i)
        h += draw(st.floats(0.01, 3.0))
        for a in clusters[i]:
            for b in clusters[j]:
                dist[a, b] = dist[b, a] = h
        clusters[i] = clusters[i] + clusters[j]
        clusters.pop(j)
    sites = draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    types = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    return GenealogySample(dist, None, sites, types, draw(st.floats(0.0, 10.0)))


@given(ultrametric_samples())
@settings(max_examples=60, deadline=None)
def test_serialization_roundtrip(sample):
    back = loads_sample(dumps_sample(sample))
    assert back == sample
    assert dumps_sample(back) == dumps_sample(sample)
    check_sample(sample)


def test_loads_rejects_garbage():
    with pytest.raises(IntegrityError):
        loads_sample("nonsense")
