"""Command line entry point: ``spatialpop run|validate|describe``.

Every file written by ``run`` is listed in ``manifest.json`` with its sha256.
Outputs other than the manifest's ``wall_time`` are a pure function of the
config and the master seed; replicas draw from counter-derived streams and are
merged in replica order whatever ``--jobs`` is.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import cannings as cn
from . import dynamics as dy
from . import fss as fs
from . import genealogy as gn
from . import renorm as rn
from .config import (KINDS, OPTIONAL, REQUIRED, ExperimentConfig, ValidationError,
                     build_geometry, build_lambda, canonical_json, default_config, parse_config)
from .errors import BudgetExceeded, SpatialPopError
from .rng import stream

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_BUDGET = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------

def _plain(obj):
    """Convert numpy scalars/arrays and non-finite floats into strict-JSON values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def dumps_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


@dataclass
class RunOutput:
    """Files produced by a kind runner plus diagnostics for the manifest."""

    files: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    completed: int = 0
    partial: bool = False


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    tool_version: str
    wall_time: float
    kind: str
    jobs: int
    replicas_requested: int
    replicas_completed: int
    partial: bool
    diagnostics: dict
    files: dict

    def as_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Kind runners
# ---------------------------------------------------------------------------

def _pmap(fn: Callable, n: int, jobs: int) -> list:
    if jobs > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(i) for i in range(n)]


def _affordable(cfg: ExperimentConfig, per_replica: float) -> int:
    """Replicas that fit in ``budget.max_site_updates``."""
    cap = cfg.block("budget")["max_site_updates"]
    if per_replica <= 0:
        return cfg.replicas
    return min(cfg.replicas, int(cap // per_replica))


def _dyn_params(dyn: dict) -> dy.DynamicsParams:
    return dy.DynamicsParams(d=dyn["d"], c=dyn["c"], m=dyn["m"], mutation=dyn["mutation"], s=dyn["s"],
                             fitness=dyn["fitness"], dt=dyn["dt"])


def _theta(dyn: dict) -> np.ndarray:
    th = np.asarray(dyn["theta"], dtype=float)
    if th.size == 1 and dyn["types"] == 2:
        th = np.array([th[0], 1 - th[0]])
    return th


def _run_diffusion(cfg: ExperimentConfig, jobs: int) -> RunOutput:
    geo = build_geometry(cfg.block("geometry"))
    dyn = cfg.block("dynamics")
    params = _dyn_params(dyn)
    theta = _theta(dyn)
    S = geo.n_sites
    record = np.arange(0.0, dyn["T"] + 1e-12, dyn["record_every"]).tolist()
    R = _affordable(cfg, S * theta.size * dyn["T"] / params.dt)

    def one(r):
        traj = dy.simulate_fv(dy.TypeSimplexState.constant(S, theta), params, geo, dyn["T"],
                              stream(cfg.seed, r, "dynamics", "diffusion-run"), record_times=record)
        return traj

    trajs = _pmap(one, R, jobs)
    out = RunOutput(completed=R, partial=R < cfg.replicas)
    if dyn["output"] == "moments":
        rows = [(row["replica"], row["time"], row["mean"], row["het"])
                for r, tr in enumerate(trajs) for row in dy.moments_table(tr, r)]
        out.files["trajectory.csv"] = dumps_csv(("replica", "time", "mean", "het"), rows)
    else:
        K = theta.size
        rows = [(r, float(t), s, *st[s].tolist())
                for r, tr in enumerate(trajs) for t, st in zip(tr.times, tr.states) for s in range(S)]
        out.files["trajectory.csv"] = dumps_csv(("replica", "time", "site", *[f"x{k}" for k in range(K)]),
                                                rows)
    out.diagnostics["clips"] = [tr.clips for tr in trajs]
    return out


def _cannings_run(cfg: ExperimentConfig, r: int, purpose: str):
    geo = build_geometry(cfg.block("geometry"))
    can = cfg.block("cannings")
    system = cn.ParticleSystem.from_frequency(geo.n_sites, can["M"], can["x0"])
    lam0 = build_lambda(can["lambda0"]) if can["lambda0"] is not None else None
    blocks = {k + 1: (b["mu"], build_lambda(b["lambda"])) for k, b in enumerate(can["blocks"])}
    res = cn.run_cannings(system, geo, d=can["d"], lam0=lam0, blocks=blocks or None, c=can["c"],
                          T=can["T"], rng=stream(cfg.seed, r, "cannings", purpose), eps=can["eps"],
                          max_events=cfg.block("budget")["max_events"])
    return res


def _cannings_diag(res: cn.CanningsResult) -> dict:
    return {"effective_events": res.effective_events, "raw_events": res.raw_events,
            "dropped_pair_rate": res.dropped_pair_rate, "truncated": res.truncated,
            "rebalance_moves": res.system.rebalance_moves}


def _run_cannings_kind(cfg: ExperimentConfig, jobs: int) -> RunOutput:
    can = cfg.block("cannings")
    results = _pmap(lambda r: _cannings_run(cfg, r, "cannings-run"), cfg.replicas, jobs)
    out = RunOutput(completed=len(results))
    summary = []
    for r, res in enumerate(results):
        sysm = res.system
        freq = sysm.frequencies()[:, 0]
        summary.append({"replica": r, "t": sysm.t, "type0_frequency": freq, **_cannings_diag(res)})
        if can["write_log"]:
            out.files[f"ancestry_{r:05d}.csv"] = dumps_csv(cn.AncestryLog.HEADER, sysm.log.rows())
    out.partial = any(res.truncated for res in results)
    out.files["summary.json"] = dumps_json(summary)
    out.diagnostics["truncated_replicas"] = [r for r, res in enumerate(results) if res.truncated]
    return out


def _run_mckean(cfg: ExperimentConfig, jobs: int) -> RunOutput:
    dyn = cfg.block("dynamics")
    params = _dyn_params(dyn)
    theta = float(_theta(dyn)[0])
    R = _affordable(cfg, (dyn["T"] + dyn["burn_in"]) / params.dt)

    def one(r):
        return dy.equilibrium_gmap(params, theta, T=dyn["T"], burn_in=dyn["burn_in"],
                                   rng=stream(cfg.seed, r, "dynamics", "mckean-vlasov"),
                                   n_batches=dyn["batches"])

    ests = _pmap(one, R, jobs)
    rows = [{"replica": r, "value": e.value, "stderr": e.stderr, "converged": e.converged}
            for r, e in enumerate(ests)]
    return RunOutput({"gmap.json": dumps_json({"theta": theta, "g": "x(1-x)", "estimates": rows})},
                     {"not_converged": [r for r, e in enumerate(ests) if not e.converged]},
                     R, R < cfg.replicas)


def _renorm_params(ren: dict) -> rn.RenormParams:
    c = tuple(ren["c"])
    lam = tuple(ren["lam"]) if ren["lam"] is not None else (0.0,) * len(c)
    return rn.RenormParams(c, lam, ren["d0"])


def _run_chain(cfg: ExperimentConfig, jobs: int) -> RunOutput:
    ren = cfg.block("renorm")
    params = _renorm_params(ren)
    j = ren["j"]
    per = (j + 1) * ren["T_eq"] / ren["dt"] if ren["engine"] == "B" else j + 1
    R = _affordable(cfg, per)

    def one(r):
        return rn.interaction_chain_sample(ren["theta"], params, j,
                                           stream(cfg.seed, r, "renorm", "interaction-chain"),
                                           R=1, engine=ren["engine"], T_eq=ren["T_eq"], dt=ren["dt"])

    paths = _pmap(one, R, jobs)
    levels = paths[0].levels if paths else tuple(range(-(j + 1), 1))
    rows = [(r, *p.states[0].tolist()) for r, p in enumerate(paths)]
    return RunOutput({"chain.csv": dumps_csv(("replica", *[f"M{k}" for k in levels]), rows)},
                     {"not_converged": [r for r, p in enumerate(paths) if not p.converged]},
                     R, R < cfg.replicas)


def dichotomy_verdicts(ren: dict) -> list[dict]:
    """Verdicts for a ``renorm`` block: one per grid point, or one for explicit arrays."""
    if ren["grid"] is not None:
        g = ren["grid"]
        out = []
        for c, lam, q in itertools.product(g["c"], g["lam"], g["q"]):
            v = rn.classify_dichotomy(rn.GeometricFamily(c, lam, q, ren["d0"]), horizon=ren["horizon"])
            out.append({"c": c, "lam": lam, "q": q, "d0": ren["d0"], **v.as_dict()})
        return out
    v = rn.classify_dichotomy(_renorm_params(ren))
    return [{"c": list(ren["c"]), "lam": ren["lam"], "d0": ren["d0"], **v.as_dict()}]


def _run_dichotomy(cfg: ExperimentConfig, jobs: int) -> RunOutput:
    verdicts = dichotomy_verdicts(cfg.block("renorm"))
    return RunOutput({"verdicts.json": dumps_json(verdicts)}, {}, cfg.replicas)


def _tail_params(sb: dict):
    if sb["K"] is not None or sb["e"] is not None:
        return rn.SeedbankColours(tuple(sb["K"] or ()), tuple(sb["e"] or ()))
    return rn.SeedbankTailParams(sb["A"], sb["B"], sb["alpha"], sb["beta"], sb["M_max"])


def _run_seedbank_tail(cfg: ExperimentConfig, jobs: int) -> RunOutput:
    sb = cfg.block("seedbank")
    params = _tail_params(sb)
    tail = rn.seedbank_tail(params, sb["t_grid"])
    thr = sb["hill_threshold"]
    if thr is None:
        thr = (rn.default_hill_threshold(params) if isinstance(params, rn.SeedbankTailParams)
               else 10.0 / max(params.e))
    R = _affordable(cfg, sb["samples"])

    def one(r):
        x = rn.sample_wakeup(params, sb["samples"], stream(cfg.seed, r, "renorm", "seedbank-tail"))
        try:
            g, k = rn.hill_estimator(x, thr)
        except rn.ParameterError:
            g, k = float("nan"), 0
        return {"replica": r, "hill_gamma": g, "exceedances": k}

    hill = _pmap(one, R, jobs)
    report = {"gamma": tail.gamma, "C": tail.C, "tail_mass_bound": tail.tail_mass_bound,
              "hill_threshold": thr, "hill": hill}
    return RunOutput({"tail.csv": dumps_csv(("t", "survival"), zip(tail.t, tail.survival)),
                      "hill.json": dumps_json(report)}, {"tail_mass_bound": tail.tail_mass_bound},
                     R, R < cfg.replicas)


def _run_regime(cfg: ExperimentConfig, jobs: int) -> RunOutput:
    sb = cfg.block("seedbank")
    walk = build_geometry(cfg.block("geometry"))
    v = rn.seedbank_regime(walk, _tail_params(sb), stream(cfg.seed, 0, "renorm", "seedbank-regime"),
                           T=sb["T"], R=sb["walk_replicas"])
    return RunOutput({"regime.json": dumps_json(v.as_dict())}, {}, cfg.replicas)


def _fss_experiment(cfg: ExperimentConfig, replicas: int) -> fs.FSSExperiment:
    f = cfg.block("fss")
    return fs.FSSExperiment(model=f["model"], sizes=tuple(f["sizes"]), c=f["c"], d=f["d"],
                            theta0=f["theta0"], times=tuple(f["times"]), replicas=replicas, dt=f["dt"],
                            K=tuple(f["K"]), e=tuple(f["e"]), dim=f["dim"], init=f["init"],
                            block=f["block"], scheme=f["scheme"], qv_from=f["qv_from"],
                            budget=cfg.block("budget")["max_site_updates"])


def _run_fss(cfg: ExperimentConfig, jobs: int) -> RunOutput:
    full = _fss_experiment(cfg, cfg.replicas)
    per = full.cost() / cfg.replicas if cfg.replicas else 0.0
    R = _affordable(cfg, per)
    exp = _fss_experiment(cfg, R)
    rep = fs.run_fss(exp, seed=cfg.seed, jobs=jobs)
    rows = [(en.size, en.n_sites, t, m, s, ref, z)
            for en in rep.entries
            for t, m, s, ref, z in zip(en.times, en.het_mean, en.het_se, en.reference, en.z)]
    files = {"report.json": dumps_json(rep.as_dict()),
             "ladder.csv": dumps_csv(("size", "n_sites", "time", "het_mean", "het_se", "reference", "z"),
                                     rows)}
    return RunOutput(files, {"clips": [en.clips for en in rep.entries]}, R, R < cfg.replicas)


def _run_genealogy(cfg: ExperimentConfig, jobs: int) -> RunOutput:
    gen = cfg.block("genealogy")

    def one(r):
        res = _cannings_run(cfg, r, "genealogy-stats")
        sample = gn.extract_sample(res.system, gen["n"], stream(cfg.seed, r, "genealogy", "sample"),
                                   sites=gen["sites"], replace=gen["replace"])
        t = gn.tmrca(sample)
        stats = {
            "replica": r,
            "tmrca": None if t is gn.NO_MRCA else float(t),
            "ultrametric_violation": gn.ultrametric_violation(sample.dist),
            "censored_pairs": int(np.triu(sample.censored, 1).sum()),
            "mean_pair_distance": float(sample.dist[np.triu_indices(sample.n, 1)].mean())
            if sample.n > 1 else 0.0,
            "balls": {repr(float(h)): len(gn.ball_decomposition(sample, h).as_sets()) for h in gen["h"]},
            **_cannings_diag(res),
        }
        return sample, stats

    got = _pmap(one, cfg.replicas, jobs)
    out = RunOutput(completed=len(got))
    for r, (sample, _) in enumerate(got):
        out.files[f"sample_{r:05d}.csv"] = gn.dumps_sample(sample)
    out.files["stats.json"] = dumps_json([s for _, s in got])
    out.partial = any(s["truncated"] for _, s in got)
    return out


RUNNERS: dict[str, Callable[[ExperimentConfig, int], RunOutput]] = {
    "diffusion-run": _run_diffusion,
    "cannings-run": _run_cannings_kind,
    "mckean-vlasov": _run_mckean,
    "interaction-chain": _run_chain,
    "dichotomy": _run_dichotomy,
    "seedbank-tail": _run_seedbank_tail,
    "seedbank-regime": _run_regime,
    "fss": _run_fss,
    "genealogy-stats": _run_genealogy,
}


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def run(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> RunManifest:
    """Run ``cfg``, write its outputs and ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = RUNNERS[cfg.kind](cfg, max(1, int(jobs)))
    files = {"config.json": canonical_json(cfg.data) + "\n", **result.files}
    hashes = {}
    for name in sorted(files):
        data = files[name].encode("utf-8")
        (out_dir / name).write_bytes(data)
        hashes[name] = hashlib.sha256(data).hexdigest()
    manifest = RunManifest(cfg.hash, cfg.seed, __version__, time.perf_counter() - start, cfg.kind,
                           int(jobs), cfg.replicas, result.completed, result.partial,
                           result.diagnostics, hashes)
    (out_dir / "manifest.json").write_text(dumps_json(manifest.as_dict()), encoding="utf-8")
    return manifest


def describe(kind: str) -> str:
    cfg = default_config(kind)
    blocks = sorted(set(REQUIRED.get(kind, ())) | set(OPTIONAL.get(kind, ())))
    lines = [f"{kind}: {KINDS[kind]}", f"blocks: {', '.join(blocks) or '(none)'}; budget always allowed",
             "defaults:", json.dumps(cfg.data, sort_keys=True, indent=2)]
    return "\n".join(lines)


def _load(path: str) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError([f"cannot read {path}: {exc}"]) from exc
    return parse_config(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatialpop", description="Spatial population genetics experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--replicas", type=int)
    r.add_argument("--out-dir")
    r.add_argument("--jobs", type=int, default=1)
    v = sub.add_parser("validate", help="check a config and print its hash")
    v.add_argument("config")
    d = sub.add_parser("describe", help="describe an experiment kind and its defaults")
    d.add_argument("kind", choices=sorted(KINDS))
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "describe":
            print(describe(args.kind))
            return EXIT_OK
        cfg = _load(args.config)
        if args.verb == "validate":
            print(f"ok {cfg.kind} {cfg.hash}")
            return EXIT_OK
        if args.jobs < 1:
            raise ValidationError(["--jobs: must be >= 1"])
        cfg = cfg.with_overrides(seed=args.seed, replicas=args.replicas)
        manifest = run(cfg, args.out_dir or cfg.data["output"], args.jobs)
    except ValidationError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except BudgetExceeded as exc:
        print(f"budget: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (SpatialPopError, ValueError, ArithmeticError) as exc:
        print(f"runtime: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if manifest.partial:
        print(f"partial: {manifest.replicas_completed}/{manifest.replicas_requested} replicas within budget",
              file=sys.stderr)
        return EXIT_BUDGET
    print(f"ok {cfg.kind} {cfg.hash} -> {args.out_dir or cfg.data['output']}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
