import math

import numpy as np
import pytest
from scipy import stats

from spatialpop.errors import ParameterError
from spatialpop.geometry import HierGeography, TorusGeography, mean_field
from spatialpop.renorm import (CLUSTERING, COEXISTENCE, INCONCLUSIVE, LOCAL_COEXISTENCE,
                               GeometricFamily, RenormParams, SeedbankColours, SeedbankTailParams,
                               beta_equilibrium, block_average, classify_dichotomy, dk_recursion,
                               dk_sequence, hill_estimator, interaction_chain_sample, m_sequence,
                               profile_times, sample_wakeup, seedbank_regime, seedbank_tail)


def test_dk_single_step_with_lambda():
    p = RenormParams((2.0,), (1.0,), 0.5)
    a = 0.5 + 0.5
    assert dk_recursion(p, 1) == pytest.approx(2.0 * a / (2.0 + a))
    assert dk_recursion(p, 0) == 0.5
    with pytest.raises(ParameterError):
        dk_sequence(p, 2)


def test_m_sequence_definition():
    p = RenormParams((1.0, 2.0, 4.0), (0.4, 0.2, 0.0), 1.0)
    d = dk_sequence(p)
    np.testing.assert_allclose(m_sequence(p), (np.array(p.mu) + d[:3]) / np.array(p.c))
    with pytest.raises(ParameterError):
        m_sequence(RenormParams((1.0, 0.0), (), 1.0))


def test_params_validation():
    with pytest.raises(ParameterError):
        RenormParams((1.0,), (1.0, 2.0))
    with pytest.raises(ParameterError):
        RenormParams((-1.0,))


@pytest.mark.parametrize("fam, expected", [
    (GeometricFamily(1.0, 0.0, 1.0, 1.0), CLUSTERING),
    (GeometricFamily(2.0, 0.0, 1.0, 1.0), LOCAL_COEXISTENCE),
    (GeometricFamily(0.5, 0.0, 1.0, 1.0), CLUSTERING),
    (GeometricFamily(2.0, 1.0, 2.0, 1.0), CLUSTERING),
    (GeometricFamily(3.0, 1.0, 2.0, 1.0), LOCAL_COEXISTENCE),
    (GeometricFamily(1.0, 0.0, 1.0, 0.0), LOCAL_COEXISTENCE),
])
def test_geometric_verdicts(fam, expected):
    v = classify_dichotomy(fam)
    assert v.verdict == expected and v.rule == "analytic"


def test_numeric_rule_on_arrays():
    K = 60
    k = np.arange(K)
    assert classify_dichotomy(RenormParams(tuple(2.0**k), (), 1.0)).verdict == LOCAL_COEXISTENCE
    assert classify_dichotomy(RenormParams((1.0,) * K, (), 1.0)).verdict == CLUSTERING
    assert classify_dichotomy(RenormParams((1.0,) * 4, (), 1.0)).verdict == INCONCLUSIVE


def test_block_average_and_profile_times():
    geo = HierGeography(2, 3, (1.0, 1.0, 1.0))
    x = np.arange(8.0)
    np.testing.assert_allclose(block_average(x, geo, 0, 1), [0.5])
    np.testing.assert_allclose(block_average(x, geo, 0, 3), [3.5])
    assert profile_times(2, 1, 1.0, [0.0, 1.0]) == [4.0, 2.0]
    with pytest.raises(ParameterError):
        profile_times(2, 1, 1.0, [0.0])


def test_beta_equilibrium_moments():
    rng = np.random.default_rng(0)
    theta, c, sigma = 0.3, 1.0, 0.5
    x = beta_equilibrium(theta, c, sigma, rng, size=200_000)
    assert abs(x.mean() - theta) < 4 * x.std() / math.sqrt(x.size)
    assert x.var() == pytest.approx(theta * (1 - theta) * sigma / (sigma + 2 * c), rel=0.02)
    np.testing.assert_array_equal(beta_equilibrium(np.array([0.0, 1.0]), c, sigma, rng), [0.0, 1.0])


def test_chain_engine_a_martingale():
    p = RenormParams((1.0, 2.0, 4.0), (), 0.5)
    path = interaction_chain_sample(0.4, p, 2, np.random.default_rng(1), R=50_000)
    assert path.levels == (-3, -2, -1, 0)
    for k in path.levels:
        col = path.marginal(k)
        assert abs(col.mean() - 0.4) < 4 * col.std() / math.sqrt(col.size) + 1e-15
    # variance of a single Beta layer
    d = dk_sequence(p)
    sigma = 2 * d[2]
    first = path.marginal(-2)
    assert first.var() == pytest.approx(0.24 * sigma / (sigma + 2 * 4.0), rel=0.03)
    with pytest.raises(ParameterError):
        interaction_chain_sample(0.4, p, 3, 0)
    with pytest.raises(ParameterError):
        interaction_chain_sample(0.4, p, 1, 0, engine="C")


def test_chain_engine_b_mean():
    p = RenormParams((1.0, 1.0), (), 0.5)
    path = interaction_chain_sample(0.5, p, 1, np.random.default_rng(2), R=2000, engine="B",
                                    T_eq=4.0, dt=1e-2)
    m0 = path.marginal(0)
    assert abs(m0.mean() - 0.5) < 4 * m0.std() / math.sqrt(m0.size)


def test_tail_params_constraints_and_gamma():
    with pytest.raises(ParameterError):
        SeedbankTailParams(1, 1, 0.6, 0.3)
    with pytest.raises(ParameterError):
        SeedbankTailParams(1, 1, 1.2, 1.0)
    p = SeedbankTailParams(1, 1, 0.5, 1.0)
    assert p.gamma == pytest.approx(0.5)
    assert p.C == pytest.approx(0.5 * math.gamma(0.5))


def test_tail_asymptotics():
    # sum_m K_m e_m exp(-e_m t) ~ (A / beta) B^(1-gamma) Gamma(gamma) t^-gamma = (C / gamma) t^-gamma
    p = SeedbankTailParams(1.0, 1.0, 0.5, 1.0, M_max=1_000_000)
    t = 100.0
    res = seedbank_tail(p, [0.0, t])
    assert res.survival[0] == pytest.approx(1.0)
    predicted = p.C / p.gamma * t ** -p.gamma / p.chi
    assert res.survival[1] == pytest.approx(predicted, rel=0.02)


def test_colours_sampling_matches_survival():
    col = SeedbankColours((1.0, 2.0), (1.0, 0.1))
    x = sample_wakeup(col, 50_000, np.random.default_rng(3))
    for t in (1.0, 10.0):
        emp = (x > t).mean()
        exact = col.survival(t)[0]
        assert abs(emp - exact) < 4 * math.sqrt(exact * (1 - exact) / x.size)


def test_hill_on_pareto():
    rng = np.random.default_rng(4)
    x = stats.pareto(0.5).rvs(200_000, random_state=rng)
    g, n = hill_estimator(x, 1.0)
    assert g == pytest.approx(0.5, rel=0.02) and n == x.size
    with pytest.raises(ParameterError):
        hill_estimator([1.0, 2.0], 10.0)


@pytest.mark.parametrize("walk, tail, verdict", [
    (TorusGeography.simple(1, 3), SeedbankColours((1.0,), (1.0,)), CLUSTERING),
    (TorusGeography.simple(3, 2), SeedbankColours((1.0,), (1.0,)), COEXISTENCE),
    (TorusGeography.simple(2, 2), SeedbankColours((1.0,), (1.0,)), CLUSTERING),
    # gamma = 1/2: weight t^-1 against t^-1/2 return probability, integrable
    (TorusGeography.simple(1, 3), SeedbankTailParams(1, 1, 0.5, 1.0), COEXISTENCE),
    (TorusGeography.simple(2, 2), SeedbankTailParams(1, 1, 0.5, 1.0), COEXISTENCE),
    # gamma = 3/4: weight t^-1/3, total exponent 5/6 < 1
    (TorusGeography.simple(1, 3), SeedbankTailParams(1, 1, 0.5, 2.0), CLUSTERING),
    (TorusGeography.simple(1, 3), SeedbankTailParams(1, 1, 0.2, 2.0), COEXISTENCE),
    (TorusGeography(1, 2, (((0,), 1.0),)), SeedbankColours((1.0,), (1.0,)), CLUSTERING),
    (mean_field(4), SeedbankColours((1.0,), (1.0,)), COEXISTENCE),
])
def test_regime_rules(walk, tail, verdict):
    v = seedbank_regime(walk, tail, 0)
    assert v.verdict == verdict and v.rule == "analytic"


def test_regime_inconclusive_reports_integral():
    walk = TorusGeography(1, 3, (((1,), 0.5), ((-2,), 0.5)))
    v = seedbank_regime(walk, SeedbankColours((1.0,), (1.0,)), np.random.default_rng(5), T=50.0, R=200)
    assert v.verdict == INCONCLUSIVE and v.value > 0 and v.stderr > 0
