import math

import numpy as np
import pytest

from spatialpop.errors import BudgetExceeded, DivergentSumWarning, ParameterError
from spatialpop.fss import (FSSExperiment, FSSReport, _fit_rate, compute_dstar, compute_kappa, dstar_sde,
                            genealogical_rescale, meanfield_het_factor, meanfield_moment_ode,
                            reference_for, run_fss, seedbank_het_factor)
from spatialpop.genealogy import GenealogySample


def test_dstar_values():
    assert compute_dstar(1.0, 1.0) == (0.5, 0.0)
    assert compute_dstar(1.0, math.inf) == (0.0, 0.0)
    assert dstar_sde(1.0, 1.0)[0] == pytest.approx(2 / 3)
    with pytest.raises(ParameterError):
        compute_dstar(-1.0, 1.0)


def test_meanfield_reference():
    ref = reference_for(FSSExperiment())
    assert ref.volatility == pytest.approx(2 / 3)
    assert ref.het_factor == pytest.approx(meanfield_het_factor(1.0, 1.0)) == pytest.approx(2 / 3)


def test_kappa():
    assert compute_kappa((1.0,)) == pytest.approx(0.25)
    assert compute_kappa(()) == 1.0
    with pytest.warns(DivergentSumWarning):
        compute_kappa((1.0,), tail_mass=1e-3)
    with pytest.raises(ParameterError):
        compute_kappa((-1.0,))


def test_seedbank_het_factor():
    assert seedbank_het_factor((1.0,), (1.0,), 1.0, 1.0) == pytest.approx(0.75)
    assert seedbank_het_factor((), (), 1.0, 1.0) == pytest.approx(meanfield_het_factor(1.0, 1.0))
    # a colour that never wakes up does not change the active equilibrium
    assert seedbank_het_factor((2.0,), (0.0,), 1.0, 1.0) == pytest.approx(2 / 3)


def test_moment_ode_single_site():
    t = np.array([0.0, 0.5, 2.0])
    got = meanfield_moment_ode(1, 1.0, 1.0, 0.3, t, init="constant")
    np.testing.assert_allclose(got, 0.21 * np.exp(-t), rtol=1e-12)
    got = meanfield_moment_ode(4, 1.0, 1.0, 0.5, [0.0], init="bernoulli")
    assert got[0] == pytest.approx(0.25 * 0.75)


def test_small_ladder_matches_exact_moments():
    times = tuple(np.linspace(0, 1, 5))
    exp = FSSExperiment(sizes=(4,), replicas=4000, dt=0.01, times=times, block=500)
    rep = run_fss(exp, seed=2)
    en = rep.entries[0]
    exact = meanfield_moment_ode(4, 1.0, 1.0, 0.5, times)
    assert en.init_het_exact == pytest.approx(exact[0])
    assert np.all(np.abs(en.het_mean - exact) < 4 * en.het_se + 1e-12)


def test_euler_scheme_runs_and_counts_clips():
    exp = FSSExperiment(sizes=(3,), replicas=20, dt=0.05, times=(0.0, 0.5), scheme="euler", block=10)
    rep = run_fss(exp, seed=0)
    assert rep.entries[0].clips >= 0
    assert len(rep.max_z) == 1 and not rep.z_shrinking()


def test_jobs_do_not_change_results():
    exp = FSSExperiment(sizes=(5,), replicas=30, dt=0.05, times=(0.0, 0.5, 1.0), block=10)
    a, b = run_fss(exp, seed=7, jobs=1), run_fss(exp, seed=7, jobs=3)
    np.testing.assert_array_equal(a.entries[0].het_mean, b.entries[0].het_mean)
    assert a.as_dict() == b.as_dict()


def test_experiment_validation_and_budget():
    with pytest.raises(ParameterError):
        FSSExperiment(model="lattice")
    with pytest.raises(ParameterError):
        FSSExperiment(scheme="rk4")
    with pytest.raises(ParameterError):
        FSSExperiment(qv_from=5.0)
    with pytest.raises(ParameterError):
        FSSExperiment(model="seedbank-meanfield", K=(1.0,), e=())
    with pytest.raises(ParameterError):
        FSSExperiment(times=(1.0, 0.5))
    with pytest.raises(BudgetExceeded):
        run_fss(FSSExperiment(budget=10.0))


def test_fit_rate():
    t = np.linspace(0, 2, 9)
    assert _fit_rate(t, 0.2 * np.exp(-0.7 * t)) == pytest.approx(0.7)
    assert _fit_rate(t, 0.2 * np.exp(-0.7 * t), np.full(t.size, 0.01)) == pytest.approx(0.7)
    assert math.isnan(_fit_rate(t[:1], np.array([0.1])))


@pytest.mark.parametrize("mz, ok", [([8.0, 5.0, 2.0], True), ([8.0, 2.0, 2.5], True),
                                     ([8.0, 5.0, 6.0], False), ([2.0, 2.5], False), ([1.0], False)])
def test_z_shrinking_rule(mz, ok):
    class Fixed(FSSReport):
        max_z = mz

    assert Fixed(FSSExperiment(), reference_for(FSSExperiment()), []).z_shrinking() == ok


def test_genealogical_rescale():
    s = GenealogySample(np.array([[0.0, 4.0], [4.0, 0.0]]), None, [0, 1], [0, 0], 8.0)
    r = genealogical_rescale(s, 4)
    np.testing.assert_allclose(r.dist, [[0, 1], [1, 0]])
    assert r.t == 2.0
    with pytest.raises(ParameterError):
        genealogical_rescale(s, 0)
