r"""Geographic arenas and migration kernels.

Two finite arenas are supported:

* :class:`HierGeography` -- the hierarchical group truncated to ``L`` digits,
  :math:`\Omega_{N,L}`, with ``N**L`` sites.
* :class:`TorusGeography` -- the lattice box :math:`[-n, n]^d` with periodic
  wrap-around, ``(2n+1)**d`` sites.

Sites are stored as flat integer indices. For the hierarchical group the
index of an address with digits ``(i_0, ..., i_{L-1})`` is
``sum(i_l * N**l)``, so the ``k``-ball around a site is the contiguous range
of indices sharing ``index // N**k``.

Level indexing for the hierarchical walk: ``c[k]`` is the rate (divided by
``N**k``) at which an individual picks the ball of radius ``k + 1`` around
its position and jumps to a uniform point of that ball. ``c[0]`` therefore
controls mixing inside the 1-ball (``N`` sites). Levels ``k >= L`` do not
fit into the truncated group; their rate is dropped and reported as
:attr:`HierGeography.dropped_rate`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import NoMotionError, ParameterError
from .rng import as_generator


# ---------------------------------------------------------------------------
# Addresses on the hierarchical group
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class HierAddress:
    """A point of the truncated hierarchical group, digits lowest level first."""

    digits: tuple[int, ...]
    N: int

    def __post_init__(self):
        if self.N < 2:
            raise ParameterError(f"N must be >= 2, got {self.N}")
        object.__setattr__(self, "digits", tuple(int(v) for v in self.digits))
        for v in self.digits:
            if not 0 <= v < self.N:
                raise ParameterError(f"digit {v} outside [0, {self.N - 1}]")

    @property
    def L(self) -> int:
        return len(self.digits)

    @property
    def index(self) -> int:
        return sum(v * self.N**l for l, v in enumerate(self.digits))

    @classmethod
    def from_index(cls, index: int, N: int, L: int) -> "HierAddress":
        if not 0 <= index < N**L:
            raise ParameterError(f"index {index} outside [0, {N**L})")
        digits = []
        for _ in range(L):
            index, v = divmod(index, N)
            digits.append(v)
        return cls(tuple(digits), N)


def _check_same_group(i: HierAddress, j: HierAddress):
    if i.N != j.N or i.L != j.L:
        raise ParameterError(
            f"addresses live on different groups: (N={i.N}, L={i.L}) vs (N={j.N}, L={j.L})"
        )


def hier_distance(i: HierAddress, j: HierAddress) -> int:
    """Hierarchical distance: the smallest ``k`` with all digits at positions ``>= k`` equal."""
    _check_same_group(i, j)
    for k in range(i.L, 0, -1):
        if i.digits[k - 1] != j.digits[k - 1]:
            return k
    return 0


def hier_distance_index(i, j, N: int, L: int):
    """Vectorized :func:`hier_distance` on flat site indices."""
    i = np.asarray(i)
    j = np.asarray(j)
    dist = np.zeros(np.broadcast(i, j).shape, dtype=np.int64)
    for k in range(L):
        dist += (i // N**k) != (j // N**k)
    return dist


def ball_members(center: HierAddress, k: int) -> set[HierAddress]:
    """All addresses within hierarchical distance ``k`` of ``center``."""
    if not 0 <= k <= center.L:
        raise ParameterError(f"ball radius {k} outside [0, {center.L}]")
    lo = (center.index // center.N**k) * center.N**k
    return {HierAddress.from_index(s, center.N, center.L) for s in range(lo, lo + center.N**k)}


# ---------------------------------------------------------------------------
# Arenas
# ---------------------------------------------------------------------------

def _ball_mean(x: np.ndarray, block: int, site_axis: int) -> np.ndarray:
    """Average ``x`` over consecutive blocks of ``block`` sites, broadcast back."""
    x = np.moveaxis(x, site_axis, -1)
    shape = x.shape
    m = x.reshape(shape[:-1] + (shape[-1] // block, block)).mean(axis=-1, keepdims=True)
    m = np.broadcast_to(m, shape[:-1] + (shape[-1] // block, block)).reshape(shape)
    return np.moveaxis(m, -1, site_axis)


@dataclass(frozen=True)
class HierGeography:
    """Truncated hierarchical group with the ``(c_k)`` ball-jump walk."""

    N: int
    L: int
    c: tuple[float, ...]
    level_rates: np.ndarray = field(init=False, repr=False, compare=False)
    dropped_rate: float = field(init=False, compare=False)

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ParameterError(f"N must be an integer >= 2, got {self.N}")
        if int(self.L) != self.L or self.L < 1:
            raise ParameterError(f"L must be an integer >= 1, got {self.L}")
        c = tuple(float(v) for v in self.c)
        if not c:
            raise ParameterError("c must contain at least one rate")
        if any(v < 0 or not math.isfinite(v) for v in c):
            raise ParameterError(f"all c_k must be finite and >= 0, got {c}")
        if not any(v > 0 for v in c):
            raise ParameterError("at least one c_k must be positive")
        object.__setattr__(self, "c", c)
        rates = np.array([c[k] / self.N**k if k < len(c) else 0.0 for k in range(self.L)])
        dropped = sum(c[k] / self.N**k for k in range(self.L, len(c)))
        object.__setattr__(self, "level_rates", rates)
        object.__setattr__(self, "dropped_rate", float(dropped))

    kind = "hier"

    @property
    def n_sites(self) -> int:
        return self.N**self.L

    @property
    def total_rate(self) -> float:
        """Jump rate of a single individual (levels inside the truncation)."""
        return float(self.level_rates.sum())

    @property
    def is_mean_field(self) -> bool:
        return self.L == 1

    def address(self, index: int) -> HierAddress:
        return HierAddress.from_index(index, self.N, self.L)

    def ball(self, center: int, k: int) -> range:
        """Site indices of the ``k``-ball around ``center``."""
        if not 0 <= k <= self.L:
            raise ParameterError(f"ball radius {k} outside [0, {self.L}]")
        lo = (center // self.N**k) * self.N**k
        return range(lo, lo + self.N**k)

    def migration_generator(self, x: np.ndarray, site_axis: int = -1) -> np.ndarray:
        """Return ``sum_j a(i, j) (x_j - x_i)`` along ``site_axis``."""
        out = np.zeros_like(x, dtype=float)
        for k, rate in enumerate(self.level_rates):
            if rate > 0:
                out += rate * (_ball_mean(x, self.N ** (k + 1), site_axis) - x)
        return out

    def kernel_matrix(self) -> np.ndarray:
        """Dense jump-rate matrix ``a(i, j)`` (self-jumps included)."""
        S = self.n_sites
        idx = np.arange(S)
        dist = hier_distance_index(idx[:, None], idx[None, :], self.N, self.L)
        a = np.zeros((S, S))
        for k, rate in enumerate(self.level_rates):
            a += np.where(dist <= k + 1, rate / self.N ** (k + 1), 0.0)
        return a

    def sample_jumps(self, sites, rng: np.random.Generator, symmetrize: bool = False):
        """Destinations of one jump from each of ``sites`` (vectorized)."""
        if self.total_rate <= 0:
            raise NoMotionError("hierarchical walk has zero total rate")
        sites = np.asarray(sites, dtype=np.int64)
        p = self.level_rates / self.total_rate
        level = rng.choice(self.L, size=sites.shape, p=p)
        block = self.N ** (level + 1)
        return (sites // block) * block + rng.integers(0, block)


@dataclass(frozen=True)
class TorusGeography:
    """Periodic box ``[-n, n]^d`` with a finite-support step law.

    ``steps`` is a sequence of ``(offset, probability)`` pairs. The walk jumps
    at unit rate; callers scale by a migration rate. A step law concentrated
    on the zero offset gives the rate-0 walk.
    """

    d: int
    n: int
    steps: tuple[tuple[tuple[int, ...], float], ...]

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ParameterError(f"d must be an integer >= 1, got {self.d}")
        if int(self.n) != self.n or self.n < 1:
            raise ParameterError(f"n must be an integer >= 1, got {self.n}")
        steps = []
        for offset, prob in self.steps:
            offset = tuple(int(v) for v in np.atleast_1d(offset))
            if len(offset) != self.d:
                raise ParameterError(f"step offset {offset} does not have dimension {self.d}")
            if prob < 0:
                raise ParameterError(f"negative step probability {prob}")
            steps.append((offset, float(prob)))
        total = sum(p for _, p in steps)
        if not steps or abs(total - 1.0) > 1e-12:
            raise ParameterError(f"step law must sum to 1, got {total}")
        object.__setattr__(self, "steps", tuple(steps))

    kind = "torus"

    @classmethod
    def simple(cls, d: int, n: int) -> "TorusGeography":
        """Nearest-neighbour symmetric walk."""
        steps = []
        for axis in range(d):
            for sign in (1, -1):
                off = [0] * d
                off[axis] = sign
                steps.append((tuple(off), 1.0 / (2 * d)))
        return cls(d, n, tuple(steps))

    @property
    def side(self) -> int:
        return 2 * self.n + 1

    @property
    def n_sites(self) -> int:
        return self.side**self.d

    @property
    def total_rate(self) -> float:
        moving = sum(p for off, p in self.steps if any(off))
        return 1.0 if moving > 0 else 0.0

    @property
    def is_simple(self) -> bool:
        return self == TorusGeography.simple(self.d, self.n)

    def migration_generator(self, x: np.ndarray, site_axis: int = -1) -> np.ndarray:
        x = np.moveaxis(x, site_axis, -1)
        lead = x.shape[:-1]
        grid = x.reshape(lead + (self.side,) * self.d)
        axes = tuple(range(len(lead), len(lead) + self.d))
        out = np.zeros_like(grid, dtype=float)
        for offset, prob in self.steps:
            if prob > 0 and any(offset):
                out += prob * (np.roll(grid, tuple(-o for o in offset), axis=axes) - grid)
        return np.moveaxis(out.reshape(lead + (self.n_sites,)), -1, site_axis)

    def kernel_matrix(self) -> np.ndarray:
        S = self.n_sites
        a = np.zeros((S, S))
        coords = np.array(np.unravel_index(np.arange(S), (self.side,) * self.d)).T
        for offset, prob in self.steps:
            dest = np.ravel_multi_index(((coords + offset) % self.side).T, (self.side,) * self.d)
            a[np.arange(S), dest] += prob
        return a

    def sample_jumps(self, sites, rng: np.random.Generator, symmetrize: bool = False):
        sites = np.asarray(sites, dtype=np.int64)
        probs = np.array([p for _, p in self.steps])
        offs = np.array([o for o, _ in self.steps], dtype=np.int64)
        choice = rng.choice(len(probs), size=sites.shape, p=probs)
        step = offs[choice]
        if symmetrize:
            sign = np.where(rng.random(sites.shape) < 0.5, 1, -1)
            step = step * sign[..., None]
        coords = np.stack(np.unravel_index(sites, (self.side,) * self.d), axis=-1)
        coords = (coords + step) % self.side
        return np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), (self.side,) * self.d)


Geography = Union[HierGeography, TorusGeography]


def mean_field(N: int, c: float = 1.0) -> HierGeography:
    """Mean-field arena: ``N`` sites, jumps at rate ``c`` to a uniform site."""
    return HierGeography(N, 1, (c,))


def sample_hier_jump(from_: HierAddress, walk: HierGeography, rng: np.random.Generator) -> HierAddress:
    """One jump of the hierarchical walk started at ``from_``."""
    if not isinstance(walk, HierGeography):
        raise ParameterError("sample_hier_jump requires a hierarchical geography")
    if from_.N != walk.N or from_.L != walk.L:
        raise ParameterError("address does not belong to the geography")
    dest = walk.sample_jumps(np.array([from_.index]), rng)[0]
    return walk.address(int(dest))


def degree_geometric(c: float, N: int) -> float:
    """Degree of the hierarchical walk with ``c_k = c**k`` on ``Omega_N``."""
    if c <= 0:
        raise ParameterError(f"c must be positive, got {c}")
    if N < 2:
        raise ParameterError(f"N must be >= 2, got {N}")
    if c >= N:
        raise ParameterError(f"degree formula needs c < N, got c={c}, N={N}")
    return math.log(c) / (math.log(N) - math.log(c))


# ---------------------------------------------------------------------------
# Green-function diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GreenEstimate:
    """Monte Carlo estimate of a (weighted) occupation integral at the origin."""

    value: float
    stderr: float
    horizon: float
    replicas: int
    tail_bound: float = math.nan  # bound on the integral beyond ``horizon``; nan if none

    def __float__(self):
        return self.value


def _origin_occupation(walk: Geography, T: float, R: int, rng, rate: float,
                       weight_integral: Callable[[np.ndarray, np.ndarray], np.ndarray],
                       t0: float = 0.0) -> np.ndarray:
    """Per-replica ``int_{t0}^{T} w(t) 1[X_t = 0] dt`` for the symmetrized walk."""
    lam = rate * walk.total_rate
    if lam <= 0:
        return weight_integral(np.full(R, t0), np.full(R, T))
    t = np.zeros(R)
    pos = np.zeros(R, dtype=np.int64)
    occ = np.zeros(R)
    active = np.ones(R, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        hold = rng.exponential(1.0 / lam, size=idx.size)
        a = np.maximum(t[idx], t0)
        b = np.minimum(t[idx] + hold, T)
        home = (pos[idx] == 0) & (b > a)
        if home.any():
            occ[idx[home]] += weight_integral(a[home], b[home])
        t[idx] += hold
        still = t[idx] < T
        active[idx[~still]] = False
        move = idx[still]
        if move.size:
            pos[move] = walk.sample_jumps(pos[move], rng, symmetrize=True)
    return occ


def green_at_zero(walk: Geography, T: float, R: int, rng, rate: float = 1.0) -> GreenEstimate:
    """Estimate ``int_0^T a_t(0, 0) dt`` for the symmetrized walk.

    The walk jumps at ``rate * walk.total_rate``. The returned value is a
    truncated integral; nothing is claimed about convergence as ``T`` grows.
    """
    if T <= 0 or R <= 0:
        raise ParameterError("T and R must be positive")
    rng = as_generator(rng)
    occ = _origin_occupation(walk, T, int(R), rng, rate, lambda a, b: b - a)
    se = float(occ.std(ddof=1) / math.sqrt(R)) if R > 1 else math.nan
    return GreenEstimate(float(occ.mean()), se, float(T), int(R))


def recurrence_integral(walk: Geography, gamma: float, T: float, R: int, rng,
                        rate: float = 1.0) -> GreenEstimate:
    r"""Estimate :math:`\int_1^T t^{-(1-\gamma)/\gamma} a_t(0,0)\,dt`.

    ``gamma = 1`` gives the unweighted integral. When the weight exponent
    exceeds 1 the reported ``tail_bound`` bounds the neglected part on
    ``[T, inf)`` uniformly over all walks.
    """
    if gamma <= 0 or gamma > 1:
        raise ParameterError(f"gamma must lie in (0, 1], got {gamma}")
    if T <= 1 or R <= 0:
        raise ParameterError("need T > 1 and R > 0")
    rng = as_generator(rng)
    p = (1.0 - gamma) / gamma

    if p == 0:
        def w(a, b):
            return b - a
    elif p == 1:
        def w(a, b):
            return np.log(b / a)
    else:
        def w(a, b):
            return (b ** (1 - p) - a ** (1 - p)) / (1 - p)

    occ = _origin_occupation(walk, T, int(R), rng, rate, w, t0=1.0)
    se = float(occ.std(ddof=1) / math.sqrt(R)) if R > 1 else math.nan
    tail = T ** (1 - p) / (p - 1) if p > 1 else math.inf
    return GreenEstimate(float(occ.mean()), se, float(T), int(R), tail)
