"""Sampled genealogies: distance matrices extracted from particle ancestry.

Distances are genealogical: twice the time back to the most recent common
ancestor. A pair of lineages that does not merge after the founders were
placed at time 0 is *censored*; it is stored as ``2 t`` together with a
``True`` entry in the censoring mask.
"""
from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import IntegrityError, ParameterError
from .rng import as_generator

ULTRAMETRIC_TOL = 1e-9
EXHAUSTIVE_LIMIT = 50_000


class _NoMRCA:
    """Marker returned when a sample has no common ancestor since time 0."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NO_MRCA"

    def __bool__(self):
        return False


NO_MRCA = _NoMRCA()


@dataclass(frozen=True)
class GenealogySample:
    """``n x n`` genealogical distances with per-individual marks."""

    dist: np.ndarray
    censored: np.ndarray
    sites: np.ndarray
    types: np.ndarray
    t: float

    def __post_init__(self):
        dist = np.asarray(self.dist, dtype=float)
        n = dist.shape[0]
        if dist.shape != (n, n):
            raise ParameterError("distance matrix must be square")
        cens = np.zeros((n, n), dtype=bool) if self.censored is None else np.asarray(self.censored, bool)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "censored", cens)
        object.__setattr__(self, "sites", np.asarray(self.sites, dtype=np.int64).reshape(n))
        object.__setattr__(self, "types", np.asarray(self.types, dtype=np.int64).reshape(n))

    @property
    def n(self) -> int:
        return self.dist.shape[0]

    def subsample(self, idx) -> "GenealogySample":
        idx = np.asarray(idx)
        return GenealogySample(self.dist[np.ix_(idx, idx)], self.censored[np.ix_(idx, idx)],
                               self.sites[idx], self.types[idx], self.t)

    def __eq__(self, other):
        if not isinstance(other, GenealogySample):
            return NotImplemented
        return (self.t == other.t and np.array_equal(self.dist, other.dist)
                and np.array_equal(self.censored, other.censored)
                and np.array_equal(self.sites, other.sites)
                and np.array_equal(self.types, other.types))


# ---------------------------------------------------------------------------
# Ancestry
# ---------------------------------------------------------------------------

def validate_log(system) -> None:
    """Check that the ancestry log describes a forest built forward in time.

    Raises :class:`IntegrityError` naming the first offending record.
    """
    log = system.log
    n0 = len(system.parent) - len(log)
    times = np.asarray(log.time)
    child = np.asarray(log.child, dtype=np.int64)
    parent = np.asarray(log.parent, dtype=np.int64)
    if not len(log):
        return
    checks = [
        (np.concatenate([[False], np.diff(times) < 0]), "log not time-ordered"),
        (child != n0 + np.arange(len(log)), "child ids not sequential"),
        (parent >= child, "parent does not precede child"),
        (parent < 0, "negative parent id"),
        (np.asarray(system.parent[n0:]) != parent, "log disagrees with parent table"),
    ]
    for bad, msg in checks:
        if bad.any():
            i = int(np.argmax(bad))
            raise IntegrityError(f"{msg} at record {i}: {tuple(v[i] for v in (times, child, parent))}")


def _chain(lid: int, parent: list, birth: list, t: float) -> dict:
    """Ancestor id -> time at which the lineage (looking backward) enters it."""
    out = {}
    enter = t
    while lid >= 0:
        out[lid] = enter
        enter = birth[lid]
        lid = parent[lid]
    return out


def _merge(chain_a: dict, lid_b: int, parent: list, birth: list, t: float):
    enter = t
    lid = lid_b
    while lid >= 0:
        if lid in chain_a:
            return min(enter, chain_a[lid])
        enter = birth[lid]
        lid = parent[lid]
    return None


def distances_for(lineages: Iterable[int], parent: list, birth: list, t: float):
    """Distance matrix and censoring mask for the given lineage ids."""
    lineages = list(lineages)
    n = len(lineages)
    dist = np.zeros((n, n))
    cens = np.zeros((n, n), dtype=bool)
    chains = [_chain(l, parent, birth, t) for l in lineages]
    for i in range(n):
        for j in range(i + 1, n):
            m = _merge(chains[i], lineages[j], parent, birth, t)
            if m is None:
                dist[i, j] = dist[j, i] = 2 * t
                cens[i, j] = cens[j, i] = True
            else:
                dist[i, j] = dist[j, i] = 2 * (t - m)
    return dist, cens


def extract_sample(system, n: int, rng=None, sites=None, replace: bool = True,
                   validate: bool = True) -> GenealogySample:
    """Draw ``n`` individuals and read their genealogy from the ancestry arrays.

    Sampling is uniform over all individuals, or over those at ``sites`` when
    given; ``replace=True`` matches product-measure sampling, so the same
    individual may appear twice (at distance 0).
    """
    rng = as_generator(rng)
    if validate:
        validate_log(system)
    M = system.M
    if sites is None:
        pool = np.arange(system.size)
    else:
        sites = np.atleast_1d(np.asarray(sites, dtype=np.int64))
        pool = (sites[:, None] * M + np.arange(M)[None, :]).reshape(-1)
    if n < 1:
        raise ParameterError("sample size must be >= 1")
    if not replace and n > pool.size:
        raise ParameterError(f"cannot draw {n} distinct individuals from {pool.size}")
    slots = rng.choice(pool, size=n, replace=replace)
    lineages = [system.ids[s] for s in slots.tolist()]
    dist, cens = distances_for(lineages, system.parent, system.birth, system.t)
    return GenealogySample(dist, cens, slots // M, np.asarray(system.types)[slots], system.t)


def pair_coalescence_times(system, n_pairs: int, rng=None, sites=None):
    """Backward merge times ``tau`` of ``n_pairs`` pairs of distinct individuals.

    Returns ``(tau, censored)``; censored pairs get ``tau = t``.
    """
    rng = as_generator(rng)
    M = system.M
    pool = (np.arange(system.size) if sites is None else
            (np.atleast_1d(sites)[:, None] * M + np.arange(M)[None, :]).reshape(-1))
    if pool.size < 2:
        raise ParameterError("need at least two individuals")
    tau = np.empty(n_pairs)
    cens = np.zeros(n_pairs, dtype=bool)
    t = system.t
    for p in range(n_pairs):
        a, b = rng.choice(pool, size=2, replace=False).tolist()
        la, lb = system.ids[a], system.ids[b]
        m = _merge(_chain(la, system.parent, system.birth, t), lb, system.parent, system.birth, t)
        if m is None:
            tau[p], cens[p] = t, True
        else:
            tau[p] = t - m
    return tau, cens


def pair_rate_mle(tau, censored) -> tuple[float, float]:
    """Exponential-rate MLE under right censoring, with its asymptotic standard error."""
    tau = np.asarray(tau, dtype=float)
    events = int((~np.asarray(censored)).sum())
    exposure = float(tau.sum())
    if exposure <= 0:
        raise ParameterError("zero exposure")
    rate = events / exposure
    return rate, (math.sqrt(events) / exposure if events else math.inf)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolynomialValue:
    value: float
    stderr: float
    exhaustive: bool
    n_tuples: int

    def __float__(self):
        return self.value


def polynomial_statistic(sample: GenealogySample, phi: Callable, m: int = 2,
                         g: Optional[Callable] = None, R: Optional[int] = None, rng=None,
                         joint: Optional[Callable] = None) -> PolynomialValue:
    """Average of ``phi(distances) * g(marks)`` over ordered ``m``-tuples with repeats.

    ``phi`` receives an array of shape ``(K, m, m)`` of sub-matrices and
    returns ``K`` values; ``g`` receives ``(sites, types)`` arrays of shape
    ``(K, m)``. ``joint(sub, sites, types)`` replaces the product form when
    given. All ``n^m`` tuples are used when there are at most
    ``EXHAUSTIVE_LIMIT`` of them and ``R`` is None; otherwise ``R`` random
    tuples are drawn and a standard error is reported.
    """
    n = sample.n
    if m < 1:
        raise ParameterError("statistic degree must be >= 1")
    exhaustive = R is None and n**m <= EXHAUSTIVE_LIMIT
    if exhaustive:
        idx = np.array(list(itertools.product(range(n), repeat=m)), dtype=np.int64).reshape(-1, m)
    else:
        rng = as_generator(rng)
        idx = rng.integers(0, n, size=(R or 10_000, m))
    sub = sample.dist[idx[:, :, None], idx[:, None, :]]
    if joint is not None:
        vals = np.asarray(joint(sub, sample.sites[idx], sample.types[idx]), dtype=float)
    else:
        vals = np.broadcast_to(np.asarray(phi(sub), dtype=float), (idx.shape[0],))
        if g is not None:
            vals = vals * np.asarray(g(sample.sites[idx], sample.types[idx]), dtype=float)
    K = vals.size
    value = float(vals.mean())
    se = 0.0 if exhaustive or K < 2 else float(vals.std(ddof=1) / math.sqrt(K))
    return PolynomialValue(value, se, exhaustive, K)


def transform_distances(sample: GenealogySample) -> GenealogySample:
    """Entrywise ``1 - exp(-dist)``; censored entries map to exactly 1."""
    d = -np.expm1(-sample.dist)
    d[sample.censored] = 1.0
    return GenealogySample(d, sample.censored.copy(), sample.sites, sample.types, sample.t)


def tmrca(sample: GenealogySample):
    """Half the largest distance, or ``NO_MRCA`` if some pair is censored."""
    if sample.censored.any():
        return NO_MRCA
    return float(sample.dist.max()) / 2 if sample.n > 1 else 0.0


def ultrametric_violation(dist: np.ndarray) -> float:
    """Largest ``d(i,j) - max(d(i,k), d(k,j))`` over all triples (<= 0 if ultrametric)."""
    dist = np.asarray(dist, dtype=float)
    worst = -np.inf
    for k in range(dist.shape[0]):
        bound = np.maximum(dist[:, k][:, None], dist[k, :][None, :])
        worst = max(worst, float((dist - bound).max()))
    return worst if dist.size else 0.0


def check_sample(sample: GenealogySample, tol: float = ULTRAMETRIC_TOL) -> None:
    """Raise :class:`IntegrityError` unless the sample is a valid ultrametric."""
    d = sample.dist
    if not np.array_equal(d, d.T):
        raise IntegrityError("distance matrix not symmetric")
    if np.any(np.diag(d) != 0):
        raise IntegrityError("nonzero diagonal")
    # censored entries behave as +infinity for the inequality
    eff = np.where(sample.censored, np.inf, d)
    finite = np.where(np.isinf(eff), 1e300, eff)
    v = ultrametric_violation(finite)
    if v > tol:
        raise IntegrityError(f"ultrametric inequality violated by {v:g}")


@dataclass(frozen=True)
class BallDecomposition:
    h: float
    classes: tuple[tuple[int, ...], ...]
    masses: tuple[float, ...]

    def as_sets(self) -> list[frozenset]:
        return [frozenset(c) for c in self.classes]

    def refines(self, other: "BallDecomposition") -> bool:
        """True if every class of ``self`` lies inside a class of ``other``."""
        outer = other.as_sets()
        return all(any(c <= o for o in outer) for c in self.as_sets())


def ball_decomposition(sample: GenealogySample, h: float) -> BallDecomposition:
    """Classes of the relation ``dist < 2h`` (open ``2h``-balls) with mass fractions."""
    if h <= 0:
        raise ParameterError("h must be positive")
    check_sample(sample)
    close = (sample.dist < 2 * h) & ~sample.censored
    n = sample.n
    label = np.full(n, -1)
    classes = []
    for i in range(n):
        if label[i] < 0:
            members = np.flatnonzero(close[i])
            label[members] = len(classes)
            classes.append(tuple(int(v) for v in members))
    return BallDecomposition(h, tuple(classes), tuple(len(c) / n for c in classes))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def dumps_sample(sample: GenealogySample) -> str:
    """CSV blocks: header, distance rows, censoring rows, marks table."""
    out = io.StringIO()
    out.write("n,t\n")
    out.write(f"{sample.n},{float(sample.t)!r}\n")
    out.write("dist\n")
    for row in sample.dist:
        out.write(",".join(repr(float(v)) for v in row) + "\n")
    out.write("censored\n")
    for row in sample.censored:
        out.write(",".join("1" if v else "0" for v in row) + "\n")
    out.write("index,site,type\n")
    for i, (s, ty) in enumerate(zip(sample.sites, sample.types)):
        out.write(f"{i},{int(s)},{int(ty)}\n")
    return out.getvalue()


def loads_sample(text: str) -> GenealogySample:
    lines = text.splitlines()
    try:
        if lines[0] != "n,t":
            raise ValueError("missing header")
        n_str, t_str = lines[1].split(",")
        n, t = int(n_str), float(t_str)
        if lines[2] != "dist":
            raise ValueError("missing dist block")
        dist = np.array([[float(v) for v in lines[3 + i].split(",")] for i in range(n)]).reshape(n, n)
        if lines[3 + n] != "censored":
            raise ValueError("missing censored block")
        cens = np.array([[v == "1" for v in lines[4 + n + i].split(",")] for i in range(n)],
                        dtype=bool).reshape(n, n)
        if lines[4 + 2 * n] != "index,site,type":
            raise ValueError("missing marks block")
        marks = [tuple(int(v) for v in lines[5 + 2 * n + i].split(",")) for i in range(n)]
    except (IndexError, ValueError) as exc:
        raise IntegrityError(f"malformed sample text: {exc}") from exc
    sites = [m[1] for m in marks]
    types = [m[2] for m in marks]
    return GenealogySample(dist, cens, sites, types, t)
