"""Hierarchical mean-field renormalization and seedbank regime analysis.

Volatility convention
---------------------
``RenormParams`` carries the resampling constants ``d_k`` of the
measure-valued generator ``d_k * Q``. For two types the corresponding
single-site equilibrium solves ``dx = c (theta - x) dt + sqrt(2 d x (1-x)) dW``,
i.e. the SDE volatility used by :mod:`spatialpop.dynamics` is ``2 d_k``. With
this reading the recursion ``d_{k+1} = c_k d_k / (c_k + d_k)`` is exactly the
ratio ``(F g)(theta) / g(theta)`` for ``g(x) = d x (1-x)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special

from .dynamics import mckean_vlasov_chains
from .errors import ConfigurationError, ConvergenceWarning, ParameterError
from .geometry import (HierGeography, TorusGeography, degree_geometric,
                       recurrence_integral)
from .rng import as_generator

CLUSTERING = "Clustering"
LOCAL_COEXISTENCE = "LocalCoexistence"
COEXISTENCE = "Coexistence"
INCONCLUSIVE = "Inconclusive"


# ---------------------------------------------------------------------------
# Block averages
# ---------------------------------------------------------------------------

def block_average(x: np.ndarray, geography: HierGeography, eta: int, k: int, site_axis: int = -1):
    """Mean of ``x`` over the ``k``-ball around site index ``eta``."""
    ball = geography.ball(eta, k)
    x = np.moveaxis(np.asarray(x, dtype=float), site_axis, -1)
    return x[..., ball.start:ball.stop].mean(axis=-1)


def profile_times(N: int, j: int, t_N: float, u: Sequence[float]) -> list[float]:
    """Observation times ``N^j t_N + N^k u_k`` for ``k = j, ..., 0``."""
    if len(u) != j + 1:
        raise ParameterError(f"need {j + 1} offsets u_0..u_j")
    return [N**j * t_N + N**k * u[k] for k in range(j, -1, -1)]


def renormalized_profile(trajectory, geography: HierGeography, eta: int, j: int, t_N: float,
                         u: Sequence[float], site_axis: int = -1, tol: float = 1e-9) -> np.ndarray:
    """Nested block averages ``Y_{eta,k}(N^j t_N + N^k u_k)`` for ``k = j..0``.

    ``trajectory`` is a :class:`~spatialpop.dynamics.Trajectory` whose states
    are site arrays; every required time must have been recorded.
    """
    if j > geography.L:
        raise ParameterError(f"j={j} exceeds truncation L={geography.L}")
    times = np.asarray(trajectory.times)
    out = []
    for k, tk in zip(range(j, -1, -1), profile_times(geography.N, j, t_N, u)):
        if tk > times[-1] + tol:
            raise ConfigurationError(f"horizon {times[-1]} shorter than required time {tk}")
        i = int(np.argmin(np.abs(times - tk)))
        if abs(times[i] - tk) > max(tol, 1e-6 * max(1.0, tk)):
            raise ConfigurationError(f"time {tk} was not recorded")
        state = trajectory.states[i]
        state = state[0] if isinstance(state, tuple) else state
        out.append(block_average(state, geography, eta, k, site_axis))
    return np.array(out)


# ---------------------------------------------------------------------------
# d_k recursion and dichotomy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenormParams:
    """Level sequences ``c_k`` and ``lambda_k`` (``mu_k = lambda_k / 2``) and ``d_0``."""

    c: tuple[float, ...]
    lam: tuple[float, ...] = ()
    d0: float = 1.0

    def __post_init__(self):
        c = tuple(float(v) for v in self.c)
        lam = tuple(float(v) for v in self.lam) or (0.0,) * len(c)
        if len(lam) != len(c):
            raise ParameterError("c and lambda must have equal length")
        if any(v < 0 for v in c + lam) or self.d0 < 0:
            raise ParameterError("all rates must be >= 0")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "lam", lam)

    @property
    def levels(self) -> int:
        return len(self.c)

    @property
    def mu(self) -> tuple[float, ...]:
        return tuple(v / 2 for v in self.lam)


def dk_sequence(params: RenormParams, k: Optional[int] = None) -> np.ndarray:
    """``d_0, ..., d_k`` (default ``k = levels``)."""
    k = params.levels if k is None else k
    if k < 0 or k > params.levels:
        raise ParameterError(f"k={k} outside [0, {params.levels}]")
    d = [float(params.d0)]
    for i in range(k):
        a = params.lam[i] / 2 + d[-1]
        ci = params.c[i]
        d.append(ci * a / (ci + a) if ci + a > 0 else 0.0)
    return np.array(d)


def dk_recursion(params: RenormParams, k: int) -> float:
    """``d_k`` from ``d_{k+1} = c_k (lambda_k/2 + d_k) / (c_k + lambda_k/2 + d_k)``."""
    return float(dk_sequence(params, k)[-1])


def m_sequence(params: RenormParams, k: Optional[int] = None) -> np.ndarray:
    """Terms ``m_i = (mu_i + d_i) / c_i`` for ``i < k``."""
    k = params.levels if k is None else k
    d = dk_sequence(params, k)
    c = np.array(params.c[:k])
    if np.any(c <= 0):
        raise ParameterError("m_k needs c_k > 0")
    return (np.array(params.mu[:k]) + d[:k]) / c


@dataclass(frozen=True)
class GeometricFamily:
    """``c_k = c^k`` and ``lambda_k = lam * q^k``."""

    c: float
    lam: float = 0.0
    q: float = 1.0
    d0: float = 1.0

    def params(self, levels: int) -> RenormParams:
        k = np.arange(levels)
        return RenormParams(tuple(self.c**k), tuple(self.lam * self.q**k), self.d0)


@dataclass(frozen=True)
class DichotomyVerdict:
    verdict: str
    partial_sums: tuple[float, ...]
    rule: str
    reason: str = ""

    def as_dict(self) -> dict:
        return {"verdict": self.verdict, "rule": self.rule, "reason": self.reason,
                "partial_sums": list(self.partial_sums)}


def _geometric_verdict(fam: GeometricFamily) -> tuple[str, str]:
    if fam.c <= 0 or fam.lam < 0 or fam.q <= 0 or fam.d0 < 0:
        raise ParameterError("geometric family needs c > 0, q > 0, lam >= 0, d0 >= 0")
    if fam.d0 == 0 and fam.lam == 0:
        return LOCAL_COEXISTENCE, "d_k = 0 for all k"
    if fam.c <= 1:
        return CLUSTERING, "c <= 1: m_k does not decay summably"
    if fam.lam > 0 and fam.q >= fam.c:
        return CLUSTERING, "q >= c: mu_k / c_k does not decay"
    return LOCAL_COEXISTENCE, "c > 1 and lambda_k / c_k summable: m_k decays geometrically"


def _numeric_verdict(m: np.ndarray) -> tuple[str, str]:
    K = m.size
    if K < 8:
        return INCONCLUSIVE, "fewer than 8 levels"
    if np.all(m == 0):
        return LOCAL_COEXISTENCE, "all terms zero"
    tail = m[K // 2:]
    if np.all(tail[:-1] > 0):
        ratio = tail[1:] / tail[:-1]
        if ratio.max() <= 0.9:
            return LOCAL_COEXISTENCE, f"tail ratio <= 0.9 (max {ratio.max():.3g})"
    k = np.arange(1, K + 1)
    km = k * m
    q = K // 4
    if q >= 2 and km[-q:].min() >= 0.5 * km[-2 * q:-q].max() and km[-q:].min() > 0:
        return CLUSTERING, "k * m_k does not decay on the tail"
    return INCONCLUSIVE, "trend ambiguous at the horizon"


def classify_dichotomy(params: Union[GeometricFamily, RenormParams], horizon: int = 50) -> DichotomyVerdict:
    """Clustering iff ``sum_k m_k`` diverges.

    Geometric families are decided analytically; finite arrays by a
    numeric-threshold rule on the tail of ``m_k``.
    """
    if isinstance(params, GeometricFamily):
        verdict, reason = _geometric_verdict(params)
        with np.errstate(over="ignore", invalid="ignore"):
            m = m_sequence(params.params(horizon))
        return DichotomyVerdict(verdict, tuple(np.cumsum(m).tolist()), "analytic", reason)
    m = m_sequence(params)
    verdict, reason = _numeric_verdict(m)
    return DichotomyVerdict(verdict, tuple(np.cumsum(m).tolist()), "numeric-threshold", reason)


# ---------------------------------------------------------------------------
# Interaction chain
# ---------------------------------------------------------------------------

@dataclass
class InteractionChainPath:
    """Samples of ``M_k`` for ``k = -(j+1), ..., 0`` (columns), one row per replica."""

    levels: tuple[int, ...]
    states: np.ndarray
    engine: str
    converged: bool = True

    def marginal(self, k: int) -> np.ndarray:
        return self.states[:, self.levels.index(k)]

    def as_dict(self) -> dict:
        return {"levels": list(self.levels), "engine": self.engine,
                "converged": self.converged, "samples": self.states.tolist()}


def beta_equilibrium(theta, c: float, sigma: float, rng, size=None):
    """Draw from the stationary law of ``dx = c (theta - x) dt + sqrt(sigma x (1-x)) dW``."""
    rng = as_generator(rng)
    theta = np.asarray(theta, dtype=float)
    if size is not None:
        theta = np.broadcast_to(theta, size)
    if sigma == 0 or c == float("inf"):
        return theta.copy()
    out = theta.copy()
    inner = (theta > 0) & (theta < 1)
    a = 2 * c * theta[inner] / sigma
    b = 2 * c * (1 - theta[inner]) / sigma
    out[inner] = rng.beta(a, b)
    return out


def interaction_chain_sample(theta: float, params: RenormParams, j: int, rng, R: int = 1,
                             engine: str = "A", lambdas: Optional[Sequence] = None,
                             T_eq: float = 10.0, dt: float = 4e-3, eps: float = 1e-3,
                             strict: bool = False) -> InteractionChainPath:
    """Sample ``R`` paths of the interaction chain started from ``theta``.

    Level ``-k`` uses immigration ``c_k`` and SDE volatility ``2 d_k`` (see
    module notes). Engine ``"A"`` draws the Beta equilibrium exactly; engine
    ``"B"`` runs McKean-Vlasov chains (optionally with ``Lambda_k`` jumps) for
    time ``T_eq`` and flags non-convergence if the state at ``T_eq / 2`` and
    at ``T_eq`` disagree in mean heterozygosity beyond five standard errors.
    """
    rng = as_generator(rng)
    if not 0 <= theta <= 1:
        raise ParameterError("theta must lie in [0, 1]")
    if j + 1 > params.levels:
        raise ParameterError(f"j={j} needs at least {j + 1} levels")
    d = dk_sequence(params, j + 1)
    levels = tuple(range(-(j + 1), 1))
    states = np.empty((R, j + 2))
    states[:, 0] = theta
    current = np.full(R, float(theta))
    converged = True
    for col, k in enumerate(range(j, -1, -1), start=1):
        c_k, sigma = params.c[k], 2 * d[k]
        if engine == "A":
            if lambdas is not None and lambdas[k] is not None and lambdas[k].total_mass > 0:
                raise ParameterError("engine A covers Lambda_k = 0 only")
            current = beta_equilibrium(current, c_k, sigma, rng)
        elif engine == "B":
            lam = lambdas[k] if lambdas is not None else None
            half = mckean_vlasov_chains(current, c_k, sigma, T_eq / 2, dt, rng, lam=lam, eps=eps)
            full = mckean_vlasov_chains(current, c_k, sigma, T_eq / 2, dt, rng, x0=half,
                                        lam=lam, eps=eps)
            g1, g2 = half * (1 - half), full * (1 - full)
            se = math.sqrt((g1.var() + g2.var()) / max(R, 1)) if R > 1 else 0.0
            if se > 0 and abs(g1.mean() - g2.mean()) > 5 * se:
                converged = False
                msg = f"engine B not stationary at level {-k}"
                if strict:
                    raise ConvergenceWarning(msg)
                warnings.warn(msg, ConvergenceWarning)
            current = full
        else:
            raise ParameterError(f"unknown engine {engine!r}")
        states[:, col] = current
    return InteractionChainPath(levels, states, engine, converged)


# ---------------------------------------------------------------------------
# Seedbank tails
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeedbankColours:
    """Finitely many colours with sizes ``K`` and exchange rates ``e``."""

    K: tuple[float, ...]
    e: tuple[float, ...]

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        e = np.asarray(self.e, dtype=float)
        if K.shape != e.shape or (K < 0).any() or (e < 0).any():
            raise ParameterError("K and e must be nonnegative and of equal length")
        object.__setattr__(self, "K", tuple(K.tolist()))
        object.__setattr__(self, "e", tuple(e.tolist()))

    @property
    def chi(self) -> float:
        return float(np.dot(self.K, self.e))

    @property
    def rho(self) -> float:
        return float(np.sum(self.K))

    rho_finite = True

    def weights(self) -> np.ndarray:
        if self.chi <= 0:
            raise ParameterError("chi = 0: no dormancy exchange")
        return np.asarray(self.K) * np.asarray(self.e) / self.chi

    def survival(self, t) -> np.ndarray:
        """``P(tau > t)`` of the wake-up time."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.exp(-np.outer(t, self.e)) @ self.weights()

    def sample(self, n: int, rng) -> np.ndarray:
        rng = as_generator(rng)
        comp = rng.choice(len(self.K), size=n, p=self.weights())
        return rng.exponential(1.0, n) / np.asarray(self.e)[comp]


@dataclass(frozen=True)
class SeedbankTailParams:
    """Polynomial colours ``K_m = A m^-alpha``, ``e_m = B m^-beta``, ``m = 1..M_max``."""

    A: float
    B: float
    alpha: float
    beta: float
    M_max: int = 100_000

    def __post_init__(self):
        errs = []
        if self.A <= 0 or self.B <= 0:
            errs.append("A and B must be positive")
        if not self.alpha < 1:
            errs.append(f"alpha must be < 1, got {self.alpha}")
        if not self.alpha + self.beta > 1:
            errs.append(f"alpha + beta must exceed 1, got {self.alpha + self.beta}")
        if self.M_max < 1:
            errs.append("M_max must be >= 1")
        if errs:
            raise ParameterError("; ".join(errs))

    rho_finite = False

    @property
    def m(self) -> np.ndarray:
        return np.arange(1, self.M_max + 1, dtype=float)

    @property
    def K(self) -> np.ndarray:
        return self.A * self.m ** (-self.alpha)

    @property
    def e(self) -> np.ndarray:
        return self.B * self.m ** (-self.beta)

    @property
    def gamma(self) -> float:
        return (self.alpha + self.beta - 1) / self.beta

    @property
    def C(self) -> float:
        g = self.gamma
        return (self.A / self.beta) * self.B ** (1 - g) * g * special.gamma(g)

    @property
    def chi(self) -> float:
        return float(np.dot(self.K, self.e))

    @property
    def rho(self) -> float:
        """Truncated ``sum K_m``; diverges as ``M_max`` grows since ``alpha < 1``."""
        return float(self.K.sum())

    def tail_mass_bound(self) -> float:
        """Upper bound on the mixture weight ``sum_{m > M_max} K_m e_m / chi``."""
        s = self.alpha + self.beta
        return self.A * self.B * self.M_max ** (1 - s) / ((s - 1) * self.chi)

    def colours(self) -> SeedbankColours:
        return SeedbankColours(tuple(self.K), tuple(self.e))


@dataclass
class TailResult:
    t: np.ndarray
    survival: np.ndarray
    tail_mass_bound: float
    gamma: Optional[float]
    C: Optional[float]


def seedbank_tail(params: Union[SeedbankTailParams, SeedbankColours], t_grid) -> TailResult:
    """Survival function ``P(tau > t) = sum_m (K_m e_m / chi) exp(-e_m t)`` on ``t_grid``."""
    col = params.colours() if isinstance(params, SeedbankTailParams) else params
    if col.chi <= 0:
        raise ParameterError("chi = 0")
    t = np.atleast_1d(np.asarray(t_grid, dtype=float))
    surv = np.concatenate([col.survival(chunk) for chunk in np.array_split(t, max(1, t.size // 64))])
    if isinstance(params, SeedbankTailParams):
        return TailResult(t, surv, params.tail_mass_bound(), params.gamma, params.C)
    return TailResult(t, surv, 0.0, None, None)


def sample_wakeup(params: Union[SeedbankTailParams, SeedbankColours], n: int, rng) -> np.ndarray:
    """Draw ``n`` wake-up times: colour with probability ``K_m e_m / chi``, then ``Exp(e_m)``."""
    col = params.colours() if isinstance(params, SeedbankTailParams) else params
    return col.sample(n, rng)


def hill_estimator(samples, threshold: float) -> tuple[float, int]:
    """Hill estimate of the tail index from exceedances over ``threshold``."""
    x = np.asarray(samples, dtype=float)
    top = x[x > threshold]
    if top.size < 2:
        raise ParameterError("too few exceedances for the Hill estimator")
    return 1.0 / float(np.mean(np.log(top / threshold))), int(top.size)


def default_hill_threshold(params: SeedbankTailParams) -> float:
    """Ten mean wake-up times of the fastest colour: past the exponential bulk."""
    return 10.0 / float(params.e.max())


@dataclass(frozen=True)
class RegimeVerdict:
    verdict: str
    criterion: str
    weight_exponent: float
    rule: str
    value: Optional[float] = None
    stderr: Optional[float] = None
    rho_finite: bool = True
    reason: str = ""

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _walk_decay_exponent(walk) -> Optional[tuple[float, str]]:
    """Exponent ``p`` with ``a_t(0,0) ~ t^-p`` for supported walk families."""
    if walk.total_rate == 0:
        return 0.0, "rate-0 walk"
    if isinstance(walk, TorusGeography) and walk.is_simple:
        return walk.d / 2, f"simple walk on Z^{walk.d}"
    if isinstance(walk, HierGeography) and walk.L >= 2:
        c = np.array(walk.c[:walk.L])
        if np.all(c > 0):
            ratio = c[1:] / c[:-1]
            if np.allclose(ratio, ratio[0]) and ratio[0] < walk.N:
                return 1 + degree_geometric(float(ratio[0]), walk.N), "geometric hierarchical walk"
    return None


def seedbank_regime(walk, tail: Union[SeedbankTailParams, SeedbankColours], rng=None,
                    T: float = 1e3, R: int = 2000) -> RegimeVerdict:
    """Coexistence iff the (weighted) Green integral ``I_{a,gamma}`` is finite.

    With finitely many colours the weight is 1 (``I_a``); with polynomial
    colours (``rho = infinity``) it is ``t^-((1-gamma)/gamma)``. Unsupported
    walks get ``Inconclusive`` and a truncated Monte Carlo estimate.
    """
    if tail.rho_finite:
        gamma, crit = 1.0, "I_a"
    else:
        gamma, crit = tail.gamma, "I_a_gamma"
    p = (1 - gamma) / gamma
    base = dict(criterion=crit, weight_exponent=p, rho_finite=tail.rho_finite)
    if not tail.rho_finite and gamma < 0.5:
        return RegimeVerdict(COEXISTENCE, rule="analytic", reason="gamma < 1/2: weight alone integrable",
                             **base)
    if isinstance(walk, HierGeography) and walk.is_mean_field:
        return RegimeVerdict(COEXISTENCE, rule="analytic",
                             reason="mean-field walk: transient part of a_t(0,0) decays exponentially",
                             **base)
    fam = _walk_decay_exponent(walk)
    if fam is not None:
        q, name = fam
        finite = q + p > 1
        return RegimeVerdict(COEXISTENCE if finite else CLUSTERING, rule="analytic",
                             reason=f"{name}: a_t(0,0) ~ t^-{q:g}, weight t^-{p:g}", **base)
    est = recurrence_integral(walk, gamma, T, R, as_generator(rng))
    return RegimeVerdict(INCONCLUSIVE, rule="monte-carlo", value=est.value, stderr=est.stderr,
                         reason=f"unsupported walk; integral truncated at T={T:g}", **base)
