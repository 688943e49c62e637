"""Finite system scheme: large finite systems against the macroscopic diffusion.

Time is measured macroscopically: a finite system with ``S`` sites is run to
microscopic time ``t * S`` for each grid point ``t``. Volatilities follow the
SDE convention of :mod:`spatialpop.dynamics`: ``Theta`` solves
``dTheta = sqrt(D Theta (1 - Theta)) dW`` so ``E[Theta_t (1 - Theta_t)]``
decays at rate ``D``.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import DynamicsParams, SeedbankParams, fv_noise_step
from .errors import BudgetExceeded, DivergentSumWarning, ParameterError
from .genealogy import GenealogySample
from .geometry import GreenEstimate, TorusGeography, green_at_zero
from .rng import stream

MODELS = ("meanfield", "torus", "seedbank-meanfield")


# ---------------------------------------------------------------------------
# Reference quantities
# ---------------------------------------------------------------------------

def compute_dstar(d: float, green) -> tuple[float, float]:
    """``d* = d / (1 + d A)`` with ``A`` the Green function at the origin.

    ``green`` is a number or a :class:`GreenEstimate`; the standard error is
    propagated linearly. Returns ``(d*, stderr)``.
    """
    A = float(green)
    se_A = green.stderr if isinstance(green, GreenEstimate) else 0.0
    if d < 0 or A < 0:
        raise ParameterError("need d >= 0 and a nonnegative Green function")
    if math.isinf(A):
        return 0.0, 0.0
    denom = 1.0 + d * A
    return d / denom, d * d / denom**2 * se_A


def dstar_sde(d: float, green) -> tuple[float, float]:
    """:func:`compute_dstar` for an SDE volatility ``d`` (generator ``(d/2) x(1-x) f''``)."""
    v, se = compute_dstar(d / 2, green)
    return 2 * v, 2 * se


def compute_kappa(K: Sequence[float], tail_mass: float = 0.0, tol: float = 1e-6) -> float:
    """``(1 + sum K_m)^-2``; warns if the truncated tail exceeds ``tol``."""
    K = np.asarray(K, dtype=float)
    if (K < 0).any():
        raise ParameterError("K_m must be >= 0")
    if tail_mass > tol:
        warnings.warn(f"truncated tail mass {tail_mass:g} exceeds {tol:g}; sum may diverge",
                      DivergentSumWarning)
    return float((1.0 + K.sum() + tail_mass) ** -2)


def meanfield_het_factor(c: float, d: float) -> float:
    """``E_nu[x (1-x)] / (theta (1-theta))`` for the McKean-Vlasov equilibrium."""
    return 2 * c / (2 * c + d) if (2 * c + d) > 0 else 1.0


def seedbank_het_factor(K: Sequence[float], e: Sequence[float], c: float, d: float) -> float:
    """Equilibrium ``E[x (1-x)] / (theta (1-theta))`` of the active part with dormant colours.

    Solves the closed second-moment system of the single-site process
    ``dx = c (theta - x) dt + sum_l K_l e_l (y_l - x) dt + sqrt(d x (1-x)) dW``,
    ``dy_m = e_m (x - y_m) dt`` written in normalized covariances
    ``P = (E x^2 - theta^2) / (theta (1-theta))`` etc.
    """
    K = np.asarray(K, dtype=float)
    e = np.asarray(e, dtype=float)
    n = K.size
    w = K * e
    size = 1 + n + n * n
    A = np.zeros((size, size))
    b = np.zeros(size)

    def Q(m):
        return 1 + m

    def R(l, m):
        return 1 + n + l * n + m

    # x^2
    A[0, 0] = -2 * c - 2 * w.sum() - d
    for l in range(n):
        A[0, Q(l)] += 2 * w[l]
    b[0] = -d
    # x y_m
    for m in range(n):
        row = Q(m)
        A[row, row] = -c - w.sum() - e[m]
        for l in range(n):
            A[row, R(l, m)] += w[l]
        A[row, 0] += e[m]
    # y_l y_m
    for l in range(n):
        for m in range(n):
            row = R(l, m)
            A[row, row] = -(e[l] + e[m])
            A[row, Q(l)] += e[m]
            A[row, Q(m)] += e[l]
            if e[l] + e[m] == 0:
                A[row, row] = 1.0
    sol = np.linalg.solve(A, b)
    return 1.0 - sol[0]


@dataclass(frozen=True)
class ThetaReference:
    """Macroscopic volatility ``D`` with uncertainty, and the initial mean."""

    volatility: float
    stderr: float
    theta0: float
    description: str
    kappa: float = 1.0
    het_factor: float = 1.0

    def het(self, t, init_het: Optional[float] = None) -> np.ndarray:
        """``E[Theta_t (1 - Theta_t)] = h0 exp(-D t)``, ``h0 = theta0 (1 - theta0)`` by default."""
        h0 = self.theta0 * (1 - self.theta0) if init_het is None else init_het
        return h0 * np.exp(-self.volatility * np.asarray(t, dtype=float))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FSSExperiment:
    """Finite-system ladder.

    ``sizes`` are site counts ``N`` for the mean-field models and box radii
    ``n`` (sites ``(2n+1)^dim``) for the torus. ``times`` is the macroscopic
    grid. Replicas are processed in blocks of ``block`` with one random
    stream per block, so results do not depend on the worker count.

    ``scheme="beta"`` splits each step into an exact pure-resampling Beta
    draw per site followed by exact linear relaxation towards the
    neighbourhood mean; ``"euler"`` is clipped Euler-Maruyama, kept for
    comparison.
    The quadratic-variation estimate skips macroscopic times below ``qv_from``.
    """

    model: str = "meanfield"
    sizes: tuple[int, ...] = (20, 80, 320)
    c: float = 1.0
    d: float = 1.0
    theta0: float = 0.5
    times: tuple[float, ...] = tuple(np.round(np.linspace(0, 2, 11), 10))
    replicas: int = 200
    dt: float = 0.1
    K: tuple[float, ...] = ()
    e: tuple[float, ...] = ()
    dim: int = 3
    init: str = "bernoulli"
    block: int = 50
    budget: float = 5e11
    green_replicas: int = 2000
    scheme: str = "beta"
    qv_from: float = 0.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ParameterError(f"model must be one of {MODELS}")
        if self.scheme not in ("beta", "euler"):
            raise ParameterError("scheme must be 'beta' or 'euler'")
        if not 0 <= self.qv_from < self.times[-1]:
            raise ParameterError("qv_from must lie in [0, times[-1])")
        if self.init not in ("bernoulli", "constant"):
            raise ParameterError("init must be 'bernoulli' or 'constant'")
        if not 0 <= self.theta0 <= 1:
            raise ParameterError("theta0 must lie in [0, 1]")
        if self.model == "seedbank-meanfield" and len(self.K) != len(self.e):
            raise ParameterError("K and e must have equal length")
        if sorted(self.times) != list(self.times) or self.times[0] < 0:
            raise ParameterError("times must be sorted and nonnegative")

    def n_sites(self, size: int) -> int:
        return (2 * size + 1) ** self.dim if self.model == "torus" else int(size)

    def cost(self) -> float:
        """Site-updates needed for the whole ladder."""
        return sum(self.n_sites(s) ** 2 * self.times[-1] / self.dt * self.replicas
                   * (1 + len(self.K)) for s in self.sizes)


def reference_for(exp: FSSExperiment, rng_seed: int = 0) -> ThetaReference:
    """The predicted macroscopic volatility for ``exp``."""
    if exp.model == "meanfield":
        dstar, se = dstar_sde(exp.d, 1.0 / exp.c if exp.c > 0 else math.inf)
        return ThetaReference(dstar, se, exp.theta0, "d* with A = 1/c (mean-field walk)",
                              het_factor=meanfield_het_factor(exp.c, exp.d))
    if exp.model == "seedbank-meanfield":
        kappa = compute_kappa(exp.K)
        h = seedbank_het_factor(exp.K, exp.e, exp.c, exp.d)
        return ThetaReference(kappa * exp.d * h, 0.0, exp.theta0,
                              "kappa * F g with seedbank moment closure", kappa=kappa, het_factor=h)
    walk = TorusGeography.simple(exp.dim, max(exp.sizes))
    horizon = exp.n_sites(max(exp.sizes))
    green = green_at_zero(walk, horizon, exp.green_replicas, stream(rng_seed, 0, "fss", "green"),
                          rate=exp.c)
    dstar, se = dstar_sde(exp.d, green)
    return ThetaReference(dstar, se, exp.theta0,
                          f"d* with Green function truncated at T={horizon:g}")


@dataclass
class LadderEntry:
    size: int
    n_sites: int
    times: np.ndarray
    het_mean: np.ndarray
    het_se: np.ndarray
    reference: np.ndarray
    z: np.ndarray
    init_het_exact: float
    fitted_rate: float
    qv_volatility: float
    drift_z: float
    clips: int

    def as_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


@dataclass
class FSSReport:
    experiment: FSSExperiment
    reference: ThetaReference
    entries: list

    z_noise: float = 3.0

    @property
    def max_z(self) -> list[float]:
        """Largest ``|z|`` per ladder entry over grid times ``t > 0``."""
        out = []
        for en in self.entries:
            keep = en.times > 0 if np.any(en.times > 0) else np.ones(en.times.size, bool)
            out.append(float(np.max(np.abs(en.z[keep]))))
        return out

    def z_shrinking(self) -> bool:
        """Max ``|z|`` ends below where it started, and each ladder step either
        decreases it or lands inside the ``z_noise`` band."""
        mz = self.max_z
        if len(mz) < 2:
            return False
        steps = all(b <= a or b <= self.z_noise for a, b in zip(mz, mz[1:]))
        return bool(steps and mz[-1] <= mz[0])

    def as_dict(self) -> dict:
        ref = self.reference
        return {
            "model": self.experiment.model,
            "reference": {"volatility": ref.volatility, "stderr": ref.stderr,
                          "theta0": ref.theta0, "description": ref.description,
                          "kappa": ref.kappa, "het_factor": ref.het_factor},
            "entries": [en.as_dict() for en in self.entries],
            "max_z": self.max_z,
            "z_shrinking": self.z_shrinking(),
        }


def _fit_rate(times: np.ndarray, het: np.ndarray, se: Optional[np.ndarray] = None) -> float:
    """Slope of ``log het`` against time, weighted by ``het / se`` when errors are given."""
    ok = het > 0
    if ok.sum() < 2:
        return float("nan")
    w = None
    if se is not None and np.all(se[ok] > 0):
        w = het[ok] / se[ok]
    slope = np.polyfit(times[ok], np.log(het[ok]), 1, w=w)[0]
    return float(-slope)


def _initial_state(exp: FSSExperiment, shape, rng) -> np.ndarray:
    if exp.init == "constant":
        return np.full(shape, float(exp.theta0))
    return (rng.random(shape) < exp.theta0).astype(float)


def _run_block(exp: FSSExperiment, size: int, R: int, rng) -> dict:
    """Simulate ``R`` replicas of one ladder entry; returns per-replica observables."""
    S = exp.n_sites(size)
    beta = S
    dt = exp.dt
    steps_at = [int(round(t * beta / dt)) for t in exp.times]
    n_steps = steps_at[-1]
    want = {s: i for i, s in enumerate(steps_at)}
    x = _initial_state(exp, (R, S), rng)
    sb = exp.model == "seedbank-meanfield"
    geo = TorusGeography.simple(exp.dim, size) if exp.model == "torus" else None
    if sb:
        K = np.asarray(exp.K, dtype=float)
        e = np.asarray(exp.e, dtype=float)
        SeedbankParams(tuple(K), tuple(e), b=exp.d, c=exp.c, dt=dt)  # validates dt
        relax = -np.expm1(-e * dt)
        y = np.repeat(x[..., None], K.size, axis=-1)
        wsum = 1.0 + K.sum()
    c = exp.c
    euler = exp.scheme == "euler"
    vol = math.sqrt(exp.d * dt)
    qv_start = int(round(exp.qv_from * beta / dt))
    pull = math.exp(-c * dt)

    def theta_hat():
        if sb:
            return (x.mean(axis=-1) + (y.mean(axis=-2) @ K)) / wsum
        return x.mean(axis=-1)

    out_theta = np.empty((R, len(steps_at)))
    qv_num = np.zeros(R)
    qv_den = np.zeros(R)
    clips = 0
    th = theta_hat()
    for step in range(n_steps + 1):
        if step in want:
            out_theta[:, want[step]] = th
        if step == n_steps:
            break
        if euler:
            if geo is None:
                drift = c * (x.mean(axis=-1, keepdims=True) - x)
            else:
                drift = c * geo.migration_generator(x, site_axis=-1)
            if sb:
                dy = (x[..., None] - y) * relax
                drift = drift - dy @ K / dt
                y += dy
            new = x + drift * dt + vol * np.sqrt(x * (1 - x)) * rng.standard_normal(x.shape)
            bad = (new < 0) | (new > 1)
            if bad.any():
                clips += int(bad.sum())
                np.clip(new, 0.0, 1.0, out=new)
            x = new
        else:
            x = fv_noise_step(x, exp.d, dt, rng)
            if sb:
                # dormant colours relax against frozen x; conserves x + K.y site by site
                dy = (x[..., None] - y) * relax
                x = x - dy @ K
                y += dy
            if geo is None:
                m = x.mean(axis=-1, keepdims=True)
                x = m + (x - m) * pull
            else:
                x = x + (1 - pull) * geo.migration_generator(x, site_axis=-1)
        th_new = theta_hat()
        if step >= qv_start:
            qv_num += (th_new - th) ** 2
            qv_den += th * (1 - th) * dt / beta
        th = th_new
    return {"theta": out_theta, "qv_num": qv_num, "qv_den": qv_den, "clips": clips}


def run_fss(exp: FSSExperiment, seed: int = 0, jobs: int = 1,
            reference: Optional[ThetaReference] = None) -> FSSReport:
    """Run the ladder and compare ``E[theta_hat (1 - theta_hat)]`` with the reference.

    Per ladder entry the report holds the Monte Carlo moment curve with
    standard errors, the reference curve, per-time z-scores, the fitted
    exponential decay rate, the quadratic-variation volatility
    ``sum (d theta_hat)^2 / sum theta_hat (1 - theta_hat) dt`` and a z-score
    for the drift of ``theta_hat`` between the first and last grid times.
    """
    if exp.cost() > exp.budget:
        raise BudgetExceeded(f"ladder needs {exp.cost():.3g} site-updates, budget {exp.budget:.3g}")
    ref = reference if reference is not None else reference_for(exp, seed)
    times = np.asarray(exp.times, dtype=float)
    entries = []
    for size in exp.sizes:
        n_blocks = math.ceil(exp.replicas / exp.block) if exp.replicas else 0
        sizes = [min(exp.block, exp.replicas - b * exp.block) for b in range(n_blocks)]

        def work(b):
            return _run_block(exp, size, sizes[b], stream(seed, b, "fss", f"{exp.model}:{size}"))

        if jobs > 1 and n_blocks > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                blocks = list(pool.map(work, range(n_blocks)))
        else:
            blocks = [work(b) for b in range(n_blocks)]
        S = exp.n_sites(size)
        if blocks:
            theta = np.concatenate([b["theta"] for b in blocks])
            het = theta * (1 - theta)
            R = theta.shape[0]
            het_mean = het.mean(axis=0)
            het_se = het.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(times.size)
            qv = float(sum(b["qv_num"].sum() for b in blocks) / sum(b["qv_den"].sum() for b in blocks))
            drift = theta[:, -1] - theta[:, 0]
            dse = drift.std(ddof=1) / math.sqrt(R) if R > 1 else 0.0
            drift_z = float(drift.mean() / dse) if dse > 0 else 0.0
            clips = int(sum(b["clips"] for b in blocks))
        else:
            het_mean = het_se = np.full(times.size, np.nan)
            qv, drift_z, clips = float("nan"), 0.0, 0
        reference_curve = ref.het(times)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(het_se > 0, (het_mean - reference_curve) / het_se, 0.0)
        init_exact = (exp.theta0 * (1 - exp.theta0) * (1 - 1 / S) if exp.init == "bernoulli"
                      else exp.theta0 * (1 - exp.theta0))
        entries.append(LadderEntry(size, S, times, het_mean, het_se, reference_curve, z,
                                   init_exact, _fit_rate(times, het_mean, het_se), qv, drift_z, clips))
    return FSSReport(exp, ref, entries)


def meanfield_moment_ode(N: int, c: float, d: float, theta0: float, times,
                         init: str = "bernoulli") -> np.ndarray:
    """Exact ``E[theta_hat (1 - theta_hat)]`` for the ``N``-site mean-field diffusion.

    With ``u = E[x_i^2]`` and ``v = E[x_i x_j]`` (``i != j``) the second
    moments close into a linear system, solved by matrix exponential. Time is macroscopic (microscopic time ``t * N``).
    """
    from scipy.linalg import expm

    # E[x_i xbar] = (u + (N-1) v) / N
    a = (N - 1) / N
    A = np.array([
        [-2 * c * a - d, 2 * c * a],
        [2 * c / N, -2 * c / N],
    ])
    b = np.array([d * theta0, 0.0])
    if init == "bernoulli":
        s0 = np.array([theta0, theta0**2])
    else:
        s0 = np.array([theta0**2, theta0**2])
    # affine system s' = A s + b, solved on the augmented space
    Aug = np.zeros((3, 3))
    Aug[:2, :2] = A
    Aug[:2, 2] = b
    out = []
    for t in np.atleast_1d(times):
        s = expm(Aug * t * N) @ np.append(s0, 1.0)
        u, v = s[0], s[1]
        second = (u + (N - 1) * v) / N
        out.append(theta0 - second)
    return np.array(out)


def genealogical_rescale(sample: GenealogySample, n_sites: int) -> GenealogySample:
    """Divide all distances by the site count; marks unchanged."""
    if n_sites < 1:
        raise ParameterError("site count must be >= 1")
    return GenealogySample(sample.dist / n_sites, sample.censored.copy(), sample.sites,
                           sample.types, sample.t / n_sites)
