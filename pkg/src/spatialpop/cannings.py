"""Event-driven particle systems with Kingman, Lambda and block resampling.

Individuals live in slots ``site * M + j``; every slot holds a lineage id and
a type. Founders carry ids ``0 .. S*M - 1`` and every birth creates the next
id, so ``parent[id]`` and ``birth[id]`` arrays describe the full ancestry.

Rates
-----
* Kingman part: each unordered pair at a site resamples at rate ``d``; one
  of the two (chosen with probability 1/2) is replaced by the other's child.
* Lambda events at a site occur with intensity ``Lambda*(dr) = r^-2 Lambda(dr)``
  restricted to ``r >= eps``; the kingman atom ``Lambda({0})`` is added to
  the pair rate ``d``.
* Block events at level ``k`` hit each ``k``-ball at rate
  ``mu_k / N^(2k) * Lambda_k*([eps, 1])``.
* Migration: an individual initiates a jump at rate ``c * total_rate / 2``
  and swaps places with a uniform individual at the destination, so site
  sizes stay fixed and each individual moves with the symmetrized kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import integrate, special, stats
from scipy.linalg import expm

from .errors import ConfigurationError, ParameterError
from .geometry import HierGeography
from .rng import UniformBuffer, as_generator

MAX_EVENT_RATE = 1e9


# ---------------------------------------------------------------------------
# Lambda measures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LambdaMeasure:
    """Finite measure on ``[0, 1]``.

    ``atoms`` are ``(r, mass)`` pairs with ``r`` in ``(0, 1]``; ``continuous``
    is ``"none"``, ``"uniform"`` or ``"beta"`` with total mass ``cont_mass``
    (Beta shape ``(beta_a, beta_b)``); ``kingman`` is the mass at 0.
    """

    atoms: tuple[tuple[float, float], ...] = ()
    continuous: str = "none"
    cont_mass: float = 0.0
    beta_a: float = 1.0
    beta_b: float = 1.0
    kingman: float = 0.0

    def __post_init__(self):
        atoms = tuple((float(r), float(m)) for r, m in self.atoms)
        for r, m in atoms:
            if not 0 < r <= 1:
                raise ParameterError(f"atom location {r} outside (0, 1]")
            if m < 0:
                raise ParameterError(f"negative atom mass {m}")
        object.__setattr__(self, "atoms", atoms)
        if self.continuous not in ("none", "uniform", "beta"):
            raise ParameterError(f"unknown continuous part {self.continuous!r}")
        if self.cont_mass < 0 or self.kingman < 0:
            raise ParameterError("masses must be >= 0")
        if self.continuous == "beta" and (self.beta_a <= 0 or self.beta_b < 1):
            raise ParameterError("Beta part needs a > 0 and b >= 1")

    # constructors
    @classmethod
    def point(cls, r0: float, mass: float = 1.0) -> "LambdaMeasure":
        return cls(atoms=((r0, mass),))

    @classmethod
    def uniform(cls, mass: float = 1.0) -> "LambdaMeasure":
        return cls(continuous="uniform", cont_mass=mass)

    @classmethod
    def beta(cls, a: float, b: float, mass: float = 1.0) -> "LambdaMeasure":
        return cls(continuous="beta", cont_mass=mass, beta_a=a, beta_b=b)

    @classmethod
    def kingman_only(cls, mass: float) -> "LambdaMeasure":
        return cls(kingman=mass)

    @property
    def total_mass(self) -> float:
        return self.kingman + sum(m for _, m in self.atoms) + self._cont_active

    @property
    def _cont_active(self) -> float:
        return self.cont_mass if self.continuous != "none" else 0.0

    def _cont_cdf(self, r):
        if self.continuous == "uniform":
            return np.clip(r, 0.0, 1.0)
        return stats.beta.cdf(r, self.beta_a, self.beta_b)

    def mass_on(self, lo: float, hi: float) -> float:
        """``Lambda([lo, hi])`` for ``0 < lo <= hi <= 1`` (the atom at 0 excluded)."""
        m = sum(w for r, w in self.atoms if lo <= r <= hi)
        if self._cont_active:
            m += self.cont_mass * float(self._cont_cdf(hi) - self._cont_cdf(lo))
        return m

    def dropped_mass(self, eps: float) -> float:
        """``Lambda((0, eps))``: pair-coalescence rate lost to the cutoff."""
        m = sum(w for r, w in self.atoms if r < eps)
        if self._cont_active:
            m += self.cont_mass * float(self._cont_cdf(eps))
        return m

    def _star_parts(self, eps: float) -> list[float]:
        parts = [w / r**2 if r >= eps else 0.0 for r, w in self.atoms]
        if not self._cont_active:
            parts.append(0.0)
        elif self.continuous == "uniform":
            parts.append(self.cont_mass * (1.0 / eps - 1.0))
        else:
            a, b = self.beta_a, self.beta_b
            dens = stats.beta(a, b).pdf
            val, _ = integrate.quad(lambda r: dens(r) / r**2, eps, 1.0, limit=200,
                                    points=[min(1.0, 10 * eps)])
            parts.append(self.cont_mass * val)
        return parts

    def star_rate(self, eps: float) -> float:
        """``integral_eps^1 r^-2 Lambda(dr)``."""
        if not 0 < eps <= 1:
            raise ParameterError(f"cutoff must lie in (0, 1], got {eps}")
        return float(sum(self._star_parts(eps)))

    def sample_r(self, eps: float, rng, size: Optional[int] = None):
        """Draw ``r`` from ``Lambda*`` restricted to ``[eps, 1]`` and normalized."""
        rng = as_generator(rng)
        parts = np.array(self._star_parts(eps))
        total = parts.sum()
        if total <= 0:
            raise ParameterError("Lambda* has no mass on [eps, 1]")
        n = 1 if size is None else int(size)
        comp = rng.choice(parts.size, size=n, p=parts / total)
        out = np.empty(n)
        n_atoms = len(self.atoms)
        for i, (r, _) in enumerate(self.atoms):
            out[comp == i] = r
        cont = comp == n_atoms
        if cont.any():
            out[cont] = self._sample_cont(eps, int(cont.sum()), rng)
        return float(out[0]) if size is None else out

    def _sample_cont(self, eps: float, n: int, rng) -> np.ndarray:
        # proposal with density proportional to r^-2 on [eps, 1], by inversion
        def proposal(k):
            u = rng.random(k)
            return 1.0 / (1.0 / eps - u * (1.0 / eps - 1.0))

        if self.continuous == "uniform":
            return proposal(n)
        dens = stats.beta(self.beta_a, self.beta_b).pdf
        grid = np.concatenate([[eps, 1.0], np.geomspace(eps, 1.0, 2049)])
        bound = 1.05 * float(np.max(dens(grid)))
        if self.beta_a < 1:
            bound = max(bound, float(dens(eps)) * 1.05)
        out = np.empty(0)
        while out.size < n:
            k = max(2 * (n - out.size), 64)
            r = proposal(k)
            acc = rng.random(k) * bound < dens(r)
            out = np.concatenate([out, r[acc]])
        return out[:n]


def sample_lambda_event(lam: LambdaMeasure, eps: float, rng) -> tuple[float, Optional[float]]:
    """Waiting time to the next ``Lambda*`` event with ``r >= eps`` and its ``r``.

    Returns ``(inf, None)`` when there is no mass above the cutoff.
    """
    rng = as_generator(rng)
    rate = lam.star_rate(eps)
    if rate <= 0:
        return math.inf, None
    return float(rng.exponential(1.0 / rate)), lam.sample_r(eps, rng)


def _floyd_subset(P: int, B: int, u) -> list[int]:
    chosen: set[int] = set()
    for j in range(P - B, P):
        t = int(u() * (j + 1))
        chosen.add(j if t in chosen else t)
    return sorted(chosen)


def _marked_subset(P: int, B: int, u, rng) -> list[int]:
    if B * 4 < P:
        return _floyd_subset(P, B, u)
    return sorted(rng.choice(P, size=B, replace=False).tolist())


def apply_lambda_resampling(types: Sequence[int], r: float, rng) -> tuple[list[int], int, list[int]]:
    """Mark each individual with probability ``r``; one marked parent replaces the others.

    Returns ``(new_types, parent_position, child_positions)``. With fewer
    than two marks nothing changes and ``parent_position`` is ``-1``.
    """
    rng = as_generator(rng)
    types = list(types)
    if not types:
        raise ParameterError("block must be nonempty")
    if not 0 < r <= 1:
        raise ParameterError(f"r must lie in (0, 1], got {r}")
    marked = np.flatnonzero(rng.random(len(types)) < r).tolist()
    if len(marked) < 2:
        return types, -1, []
    parent = marked[int(rng.integers(len(marked)))]
    children = [i for i in marked if i != parent]
    for i in children:
        types[i] = types[parent]
    return types, parent, children


# ---------------------------------------------------------------------------
# Particle system
# ---------------------------------------------------------------------------

@dataclass
class AncestryLog:
    """Append-only birth records ``(time, child, parent, site, level)``."""

    time: list = field(default_factory=list)
    child: list = field(default_factory=list)
    parent: list = field(default_factory=list)
    site: list = field(default_factory=list)
    level: list = field(default_factory=list)

    def __len__(self):
        return len(self.time)

    def rows(self):
        return zip(self.time, self.child, self.parent, self.site, self.level)

    HEADER = ("time", "child_lineage", "parent_lineage", "site", "level")


class ParticleSystem:
    """Constant-size population of ``M`` individuals at each of ``n_sites`` sites."""

    def __init__(self, n_sites: int, M: int, types=None):
        if n_sites < 1 or M < 1:
            raise ParameterError("need at least one site and one individual per site")
        self.n_sites = int(n_sites)
        self.M = int(M)
        size = self.n_sites * self.M
        if types is None:
            types = [0] * size
        types = [int(v) for v in np.asarray(types).reshape(-1)]
        if len(types) != size:
            raise ParameterError(f"expected {size} types, got {len(types)}")
        self.types: list[int] = types
        self.ids: list[int] = list(range(size))
        self.parent: list[int] = [-1] * size
        self.birth: list[float] = [0.0] * size
        self.log = AncestryLog()
        self.t = 0.0
        self.rebalance_moves = 0
        self.events = 0

    @classmethod
    def from_frequency(cls, n_sites: int, M: int, x0: float) -> "ParticleSystem":
        """Each site starts with ``round(x0 * M)`` individuals of type 0, the rest type 1."""
        k = int(round(x0 * M))
        return cls(n_sites, M, [0] * k + [1] * (M - k) if n_sites == 1
                   else np.tile([0] * k + [1] * (M - k), n_sites))

    @property
    def size(self) -> int:
        return self.n_sites * self.M

    def site_of_slot(self, slot: int) -> int:
        return slot // self.M

    def type_counts(self, n_types: int = 2) -> np.ndarray:
        """``(n_sites, n_types)`` counts."""
        t = np.asarray(self.types).reshape(self.n_sites, self.M)
        return np.stack([(t == k).sum(axis=1) for k in range(n_types)], axis=1)

    def frequencies(self, n_types: int = 2) -> np.ndarray:
        return self.type_counts(n_types) / self.M

    def _birth(self, t: float, slot: int, parent_slot: int, site: int, level: int):
        nid = len(self.parent)
        pid = self.ids[parent_slot]
        self.parent.append(pid)
        self.birth.append(t)
        self.ids[slot] = nid
        self.types[slot] = self.types[parent_slot]
        log = self.log
        log.time.append(t)
        log.child.append(nid)
        log.parent.append(pid)
        log.site.append(site)
        log.level.append(level)


@dataclass
class CanningsResult:
    system: ParticleSystem
    effective_events: int
    raw_events: int
    dropped_pair_rate: dict
    truncated: bool = False

    @property
    def log(self) -> AncestryLog:
        return self.system.log


_MIG, _KING, _LAM = 0, 1, 2


def _normalize_blocks(blocks) -> list[tuple[int, float, LambdaMeasure]]:
    if not blocks:
        return []
    items = blocks.items() if isinstance(blocks, Mapping) else enumerate(blocks, start=1)
    out = []
    for k, entry in items:
        mu, lam = entry
        if mu < 0:
            raise ParameterError(f"mu_{k} must be >= 0")
        if lam.kingman > 0:
            raise ParameterError(f"block measure at level {k} has a kingman atom; not supported")
        out.append((int(k), float(mu), lam))
    return out


def _redistribute(ids: np.ndarray, types: np.ndarray, n_sites: int, M: int, rng):
    """Assign pooled individuals to uniform random sites, then rebalance to ``M`` each."""
    pop = ids.size
    assign = rng.integers(0, n_sites, pop)
    order = rng.permutation(pop)
    s = assign[order]
    by_site = np.argsort(s, kind="stable")
    sorted_sites = s[by_site]
    starts = np.searchsorted(sorted_sites, np.arange(n_sites))
    rank = np.arange(pop) - starts[sorted_sites]
    keep = rank < M
    kept = order[by_site[keep]]
    kept_sites = sorted_sites[keep]
    surplus = order[by_site[~keep]]
    counts = np.bincount(kept_sites, minlength=n_sites)
    fill_sites = np.repeat(np.arange(n_sites), M - counts)
    members = np.concatenate([kept, surplus])
    sites = np.concatenate([kept_sites, fill_sites])
    arrange = members[np.argsort(sites, kind="stable")]
    return ids[arrange], types[arrange], int(surplus.size)


def run_cannings(system: ParticleSystem, geography=None, d: float = 0.0,
                 lam0: Optional[LambdaMeasure] = None, blocks=None, c: float = 0.0,
                 T: float = 1.0, rng=None, eps: float = 1e-3, chunk: int = 4096,
                 max_events: Optional[int] = None) -> CanningsResult:
    """Run the particle system from ``system.t`` to ``system.t + T`` in place.

    ``blocks`` maps level ``k >= 1`` to ``(mu_k, Lambda_k)`` (or is a sequence
    for levels 1, 2, ...). Events are generated in vectorized chunks; those
    that cannot change the state (fewer than two marks) are skipped without
    entering the Python loop. ``max_events`` caps the number of effective
    events; the result is then flagged ``truncated``.
    """
    rng = as_generator(rng)
    S, M = system.n_sites, system.M
    if geography is not None and geography.n_sites != S:
        raise ParameterError("geography and particle system disagree on the site count")
    blocks = _normalize_blocks(blocks)
    if blocks and not isinstance(geography, HierGeography):
        raise ParameterError("block resampling needs a hierarchical geography")

    kinds, levels, rates, lams = [], [], [], []
    dropped = {}
    pair_rate = d + (lam0.kingman if lam0 is not None else 0.0)
    if c > 0 and geography is not None and geography.total_rate > 0 and S > 1:
        kinds.append(_MIG); levels.append(0); lams.append(None)
        rates.append(c * geography.total_rate * S * M / 2)
    if pair_rate > 0 and M > 1:
        kinds.append(_KING); levels.append(0); lams.append(None)
        rates.append(S * pair_rate * M * (M - 1) / 2)
    if lam0 is not None and lam0.star_rate(eps) > 0:
        kinds.append(_LAM); levels.append(0); lams.append(lam0)
        rates.append(S * lam0.star_rate(eps))
        dropped[0] = lam0.dropped_mass(eps)
    for k, mu, lam in blocks:
        if k > geography.L:
            raise ConfigurationError(f"block level {k} exceeds truncation L={geography.L}")
        star = lam.star_rate(eps)
        if mu > 0 and star > 0:
            kinds.append(_LAM); levels.append(k); lams.append(lam)
            rates.append((S // geography.N**k) * mu / geography.N ** (2 * k) * star)
            dropped[k] = mu / geography.N ** (2 * k) * lam.dropped_mass(eps)
    for kind, lev, rate in zip(kinds, levels, rates):
        if not math.isfinite(rate) or rate > MAX_EVENT_RATE:
            raise ConfigurationError(f"event rate {rate:g} too large at level {lev}")

    t0 = system.t
    t_end = t0 + T
    total = float(sum(rates))
    raw = eff_count = 0
    truncated = False
    if total <= 0 or T <= 0:
        system.t = t_end
        return CanningsResult(system, 0, 0, dropped)
    probs = np.array(rates) / total
    u = UniformBuffer(rng)
    ids, types = system.ids, system.types
    t = t0
    N = geography.N if isinstance(geography, HierGeography) else 1

    while t < t_end:
        times = t + np.cumsum(rng.exponential(1.0 / total, chunk))
        cat = rng.choice(len(rates), size=chunk, p=probs)
        n = int(np.searchsorted(times, t_end, side="right"))
        times, cat = times[:n], cat[:n]
        raw += n
        loc = np.zeros(n, dtype=np.int64)
        aux = np.zeros(n, dtype=np.int64)
        aux2 = np.zeros(n, dtype=np.int64)
        eff = np.ones(n, dtype=bool)
        rvals = np.zeros(n)
        for ci, kind in enumerate(kinds):
            sel = np.flatnonzero(cat == ci)
            m = sel.size
            if not m:
                continue
            if kind == _KING:
                loc[sel] = rng.integers(0, S, m)
                a = rng.integers(0, M, m)
                b = rng.integers(0, M - 1, m)
                aux[sel] = a
                aux2[sel] = b + (b >= a)
            elif kind == _MIG:
                slot = rng.integers(0, S * M, m)
                loc[sel] = slot
                aux[sel] = geography.sample_jumps(slot // M, rng)
                aux2[sel] = rng.integers(0, M, m)
            else:
                k = levels[ci]
                pop = M * N**k
                loc[sel] = rng.integers(0, S // N**k, m)
                r = lams[ci].sample_r(eps, rng, size=m)
                B = rng.binomial(pop, r)
                rvals[sel] = r
                aux[sel] = B
                eff[sel] = B >= 2
        idx = np.flatnonzero(eff)
        for i, tt, ci, lo, a, b in zip(idx.tolist(), times[idx].tolist(), cat[idx].tolist(),
                                      loc[idx].tolist(), aux[idx].tolist(), aux2[idx].tolist()):
            if max_events is not None and eff_count >= max_events:
                truncated = True
                break
            eff_count += 1
            kind = kinds[ci]
            if kind == _KING:
                base = lo * M
                system._birth(tt, base + a, base + b, lo, 0)
            elif kind == _MIG:
                other = a * M + b
                ids[lo], ids[other] = ids[other], ids[lo]
                types[lo], types[other] = types[other], types[lo]
            else:
                k = levels[ci]
                width = N**k
                pop = M * width
                base = lo * pop
                marked = _marked_subset(pop, a, u, rng)
                parent = marked[int(u() * len(marked))]
                psite = (base + parent) // M
                for pos in marked:
                    if pos != parent:
                        system._birth(tt, base + pos, base + parent, psite, k)
                if k > 0:
                    new_ids, new_types, moves = _redistribute(
                        np.array(ids[base:base + pop]), np.array(types[base:base + pop]),
                        width, M, rng)
                    ids[base:base + pop] = new_ids.tolist()
                    types[base:base + pop] = new_types.tolist()
                    system.rebalance_moves += moves
        if truncated:
            system.t = tt
            break
        t = float(times[-1]) if n == chunk else t_end
    else:
        system.t = t_end
    system.events += eff_count
    return CanningsResult(system, eff_count, raw, dropped, truncated)


# ---------------------------------------------------------------------------
# Moran vs diffusion moments
# ---------------------------------------------------------------------------

STATISTICS = {
    "het": lambda x: x * (1 - x),
    "het2": lambda x: (x * (1 - x)) ** 2,
}

# polynomial coefficients (constant term first) of the statistics above
_STAT_POLY = {"het": [0, 1, -1], "het2": [0, 0, 1, -2, 1]}


def moran_generator(M: int, d: float) -> np.ndarray:
    """Generator of the type-0 count of a single-site two-type Moran model."""
    k = np.arange(M + 1)
    rate = d * k * (M - k) / 2.0
    Q = np.diag(-2 * rate)
    Q[k[:-1], k[:-1] + 1] = rate[:-1]
    Q[k[1:], k[1:] - 1] = rate[1:]
    return Q


def moran_moment_exact(M: int, d: float, x0: float, times, statistic: str = "het") -> np.ndarray:
    """``E[f(x_t)]`` for the Moran model by matrix exponential."""
    f = STATISTICS[statistic](np.arange(M + 1) / M)
    Q = moran_generator(M, d)
    k0 = int(round(x0 * M))
    return np.array([(expm(Q * t) @ f)[k0] for t in np.atleast_1d(times)])


def diffusion_moment_exact(d: float, x0: float, times, statistic: str = "het") -> np.ndarray:
    """Exact moments of ``dx = sqrt(d x (1-x)) dW`` via the closed moment system.

    The generator maps ``x^n`` to ``(d/2) n (n-1) (x^(n-1) - x^n)``.
    """
    coeffs = _STAT_POLY[statistic]
    deg = len(coeffs) - 1
    A = np.zeros((deg + 1, deg + 1))
    for n in range(2, deg + 1):
        A[n, n] = -0.5 * d * n * (n - 1)
        A[n, n - 1] = 0.5 * d * n * (n - 1)
    m0 = x0 ** np.arange(deg + 1)
    return np.array([np.dot(coeffs, expm(A * t) @ m0) for t in np.atleast_1d(times)])


def simulate_moran_counts(M: int, d: float, x0: float, times, R: int, rng) -> np.ndarray:
    """Exact simulation of the type-0 frequency at ``times`` for ``R`` replicas.

    Replicas advance in lockstep, one jump per active replica per iteration.
    Returns an ``(R, len(times))`` array.
    """
    rng = as_generator(rng)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    k = np.full(R, int(round(x0 * M)), dtype=np.int64)
    t = np.zeros(R)
    out = np.empty((R, times.size))
    for j, target in enumerate(times):
        while True:
            rate = d * k * (M - k)
            active = (rate > 0) & (t < target)
            if not active.any():
                break
            idx = np.flatnonzero(active)
            t_new = t[idx] + rng.exponential(1.0, idx.size) / rate[idx]
            move = t_new <= target
            step = np.where(rng.random(idx.size) < 0.5, 1, -1)
            k[idx[move]] += step[move]
            t[idx] = np.where(move, t_new, target)
        t = np.maximum(t, target)
        out[:, j] = k / M
    return out


@dataclass
class ConsistencyReport:
    statistic: str
    times: np.ndarray
    sizes: list
    moran_mc: dict
    moran_se: dict
    moran_exact: dict
    diffusion_exact: np.ndarray
    diffusion_mc: np.ndarray
    diffusion_se: np.ndarray
    discrepancy: dict

    def monotone(self) -> bool:
        vals = [self.discrepancy[M] for M in self.sizes]
        return all(a > b for a, b in zip(vals, vals[1:]))


def moran_fv_consistency(sizes: Sequence[int], d: float, x0: float, times, R: int, rng,
                         statistic: str = "het", dt: float = 1e-3) -> ConsistencyReport:
    """Compare Moran models of several sizes with the Fisher-Wright diffusion.

    For each size the report holds a Monte Carlo estimate with standard error
    and the exact matrix-exponential value; the diffusion side holds an
    Euler-Maruyama estimate (from :mod:`spatialpop.dynamics`) and the exact
    closed-moment value. ``discrepancy[M]`` is the maximum over ``times`` of
    the exact Moran-vs-diffusion gap.
    """
    from .dynamics import DynamicsParams, step_two_type

    rng = as_generator(rng)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    f = STATISTICS[statistic]
    mc, se, exact, disc = {}, {}, {}, {}
    diff_exact = diffusion_moment_exact(d, x0, times, statistic)
    for M in sizes:
        x = simulate_moran_counts(M, d, x0, times, R, rng)
        v = f(x)
        mc[M] = v.mean(axis=0)
        se[M] = v.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(times.size)
        exact[M] = moran_moment_exact(M, d, x0, times, statistic)
        disc[M] = float(np.max(np.abs(exact[M] - diff_exact)))
    params = DynamicsParams(d=d, c=0.0, dt=dt)
    x = np.full(R, x0)
    now, diff_vals = 0.0, []
    for target in times:
        while now < target - 1e-12:
            x, _ = step_two_type(x, params, None, rng)
            now += dt
        diff_vals.append(f(x))
    diff_vals = np.array(diff_vals).T
    return ConsistencyReport(
        statistic, times, list(sizes), mc, se, exact, diff_exact,
        diff_vals.mean(axis=0),
        diff_vals.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(times.size),
        disc,
    )
