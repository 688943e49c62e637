import math

import numpy as np
import pytest
from scipy import integrate, stats

from spatialpop.cannings import (LambdaMeasure, ParticleSystem, apply_lambda_resampling,
                                 diffusion_moment_exact, moran_fv_consistency, moran_generator,
                                 moran_moment_exact, run_cannings, sample_lambda_event,
                                 simulate_moran_counts)
from spatialpop.errors import ConfigurationError, ParameterError
from spatialpop.genealogy import pair_coalescence_times, pair_rate_mle, validate_log
from spatialpop.geometry import HierGeography, mean_field


def test_lambda_masses():
    lam = LambdaMeasure(atoms=((0.5, 0.2),), continuous="uniform", cont_mass=1.0, kingman=0.3)
    assert lam.total_mass == pytest.approx(1.5)
    assert lam.mass_on(0.25, 0.75) == pytest.approx(0.7)
    assert lam.dropped_mass(0.1) == pytest.approx(0.1)
    assert lam.star_rate(0.1) == pytest.approx(0.2 / 0.25 + (10 - 1))


def test_beta_star_rate_by_quadrature():
    lam = LambdaMeasure.beta(2.0, 3.0, mass=0.5)
    exact, _ = integrate.quad(lambda r: stats.beta(2, 3).pdf(r) / r**2, 0.01, 1)
    assert lam.star_rate(0.01) == pytest.approx(0.5 * exact, rel=1e-8)


def test_lambda_validation():
    with pytest.raises(ParameterError):
        LambdaMeasure(atoms=((1.5, 1.0),))
    with pytest.raises(ParameterError):
        LambdaMeasure.beta(1.0, 0.5)
    with pytest.raises(ParameterError):
        LambdaMeasure.uniform().star_rate(0.0)
    assert sample_lambda_event(LambdaMeasure.kingman_only(1.0), 1e-3, 0) == (math.inf, None)


def test_sample_r_uniform_law():
    eps = 1e-3
    r = LambdaMeasure.uniform().sample_r(eps, np.random.default_rng(0), size=20_000)

    def cdf(x):
        return (1 / eps - 1 / np.clip(x, eps, 1)) / (1 / eps - 1)

    assert stats.kstest(r, cdf).pvalue > 0.01


def test_sample_r_beta_law():
    eps = 0.01
    lam = LambdaMeasure.beta(2.0, 2.0)
    r = lam.sample_r(eps, np.random.default_rng(1), size=20_000)
    dens = stats.beta(2, 2).pdf
    norm, _ = integrate.quad(lambda s: dens(s) / s**2, eps, 1)
    grid = np.linspace(eps, 1, 4001)
    vals = dens(grid) / grid**2 / norm
    cdf_grid = np.concatenate([[0], np.cumsum((vals[1:] + vals[:-1]) / 2 * np.diff(grid))])
    assert stats.kstest(r, lambda x: np.interp(x, grid, cdf_grid)).pvalue > 0.01


def test_apply_lambda_resampling():
    rng = np.random.default_rng(2)
    types, parent, children = apply_lambda_resampling([0, 1, 2, 3, 4], 1.0, rng)
    assert len(children) == 4 and parent not in children
    assert len(set(types)) == 1
    same, p, ch = apply_lambda_resampling([0, 1], 1e-12, rng)
    assert same == [0, 1] and p == -1 and ch == []


def test_moran_generator_rows():
    Q = moran_generator(6, 1.3)
    np.testing.assert_allclose(Q.sum(axis=1), 0.0, atol=1e-12)
    assert Q[0].max() == 0 and Q[-1].max() == 0


@pytest.mark.parametrize("M", [2, 5, 40])
def test_moran_het_decays_at_pair_rate(M):
    # L[k(M-k)] = -d k(M-k) for the pair-rate-d Moran chain, for every M
    times = [0.0, 0.3, 1.7]
    exact = moran_moment_exact(M, 0.8, 0.5, times)
    x0 = round(0.5 * M) / M
    np.testing.assert_allclose(exact, x0 * (1 - x0) * np.exp(-0.8 * np.array(times)), rtol=1e-10)


def test_diffusion_moments_and_het2_convergence():
    times = np.array([0.5, 1.0])
    np.testing.assert_allclose(diffusion_moment_exact(1.0, 0.3, times), 0.21 * np.exp(-times), rtol=1e-12)
    gaps = [np.max(np.abs(moran_moment_exact(M, 1.0, 0.5, times, "het2")
                          - diffusion_moment_exact(1.0, 0.5, times, "het2"))) for M in (10, 20, 40, 80)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < gaps[0] / 10


def test_simulate_moran_counts_matches_expm():
    times = [0.2, 1.0]
    x = simulate_moran_counts(10, 1.0, 0.5, times, 4000, np.random.default_rng(3))
    het = x * (1 - x)
    exact = moran_moment_exact(10, 1.0, 0.5, times)
    se = het.std(axis=0, ddof=1) / math.sqrt(het.shape[0])
    assert np.all(np.abs(het.mean(axis=0) - exact) < 4 * se)


def test_consistency_report():
    rep = moran_fv_consistency([5, 10, 20], 1.0, 0.5, [0.5, 1.0], 300, np.random.default_rng(4),
                               statistic="het2", dt=0.01)
    assert rep.monotone()
    for M in rep.sizes:
        assert np.all(np.abs(rep.moran_mc[M] - rep.moran_exact[M]) < 4 * rep.moran_se[M] + 1e-12)


def test_particle_system_invariants():
    geo = HierGeography(2, 2, (1.0, 0.5))
    lam = LambdaMeasure.uniform(0.5)
    blocks = {1: (0.5, LambdaMeasure.point(0.5)), 2: (0.3, LambdaMeasure.uniform())}
    sysm = ParticleSystem.from_frequency(4, 5, 0.4)
    res = run_cannings(sysm, geo, d=1.0, lam0=lam, blocks=blocks, c=1.0, T=2.0,
                       rng=np.random.default_rng(5))
    assert len(sysm.ids) == sysm.size == 20
    assert len(sysm.parent) == 20 + len(sysm.log)
    assert sysm.t == pytest.approx(2.0)
    assert res.effective_events <= res.raw_events
    assert set(res.dropped_pair_rate) == {0, 1, 2}
    validate_log(sysm)
    # every lineage currently alive has a consistent type in the log ancestry
    assert sysm.type_counts().sum() == 20


def test_determinism_same_seed():
    def go():
        s = ParticleSystem.from_frequency(3, 4, 0.5)
        run_cannings(s, mean_field(3, 1.0), d=1.0, lam0=LambdaMeasure.uniform(), c=1.0, T=1.0, rng=11)
        return s.log.time, s.log.parent, s.types
    assert go() == go()


def test_block_kingman_atom_rejected():
    geo = HierGeography(2, 2, (1.0, 1.0))
    with pytest.raises(ParameterError):
        run_cannings(ParticleSystem(4, 2), geo, blocks={1: (1.0, LambdaMeasure(kingman=1.0))}, T=1.0, rng=0)


def test_excessive_rate_rejected():
    with pytest.raises(ConfigurationError):
        run_cannings(ParticleSystem(1, 10), d=1e10, T=1.0, rng=0)


def test_truncation_flag():
    s = ParticleSystem(1, 10)
    res = run_cannings(s, d=1.0, T=100.0, rng=0, max_events=5)
    assert res.truncated and res.effective_events == 5
    assert s.t < 100.0


def test_kingman_pair_rate_small():
    taus, cens = [], []
    for r in range(60):
        s = ParticleSystem(1, 20)
        run_cannings(s, d=2.0, T=4.0, rng=np.random.default_rng(100 + r))
        tau, c = pair_coalescence_times(s, 4, np.random.default_rng(200 + r))
        taus.append(tau)
        cens.append(c)
    rate, se = pair_rate_mle(np.concatenate(taus), np.concatenate(cens))
    assert abs(rate - 2.0) < 4 * se
