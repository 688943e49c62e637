"""Experiment configuration: parsing, validation, canonical form and hashing.

Configs are YAML or JSON mappings. Every block is optional and falls back to
the defaults below; unknown keys anywhere are rejected, and all problems are
reported together.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from typing import Any

import yaml

from .errors import ConfigurationError, ParameterError

KINDS = {
    "diffusion-run": "Euler-Maruyama run of the interacting Fleming-Viot system; trajectory CSV.",
    "cannings-run": "Particle system with Kingman, Lambda and block resampling; ancestry logs.",
    "mckean-vlasov": "Long single-site run estimating the equilibrium map E[g] per replica.",
    "interaction-chain": "Samples of the interaction chain from engine A (Beta) or B (simulated).",
    "dichotomy": "Clustering versus local coexistence verdicts over a parameter grid.",
    "seedbank-tail": "Wake-up time tail of polynomial seedbank colours, Hill estimates.",
    "seedbank-regime": "Coexistence or clustering verdict for a walk and a seedbank.",
    "fss": "Finite system scheme ladder against the macroscopic diffusion.",
    "genealogy-stats": "Particle run followed by sampled genealogy statistics.",
}

# field layout: (type, default[, choices])
F, I, S, B, FL, IL, ANY = "float", "int", "str", "bool", "floats", "ints", "any"

LAMBDA_FIELDS = {
    "atoms": ("pairs", []),
    "continuous": (S, "none", ("none", "uniform", "beta")),
    "mass": (F, 0.0),
    "a": (F, 1.0),
    "b": (F, 1.0),
    "kingman": (F, 0.0),
}

BLOCKS = {
    "budget": {
        "max_events": ("optint", None),
        "max_site_updates": (F, 1e11),
    },
    "geometry": {
        "kind": (S, "hier", ("hier", "torus")),
        "N": (I, 2),
        "L": (I, 3),
        "c": (FL, [1.0, 1.0, 1.0]),
        "d": (I, 1),
        "n": (I, 2),
        "steps": ("steps", None),
    },
    "dynamics": {
        "d": (F, 1.0),
        "c": (F, 1.0),
        "m": (F, 0.0),
        "mutation": ("matrix", None),
        "s": (F, 0.0),
        "fitness": ("optfloats", None),
        "dt": (F, 0.01),
        "T": (F, 1.0),
        "types": (I, 2),
        "theta": (FL, [0.5, 0.5]),
        "record_every": (F, 0.1),
        "output": (S, "moments", ("moments", "sites")),
        "burn_in": (F, 20.0),
        "batches": (I, 20),
    },
    "cannings": {
        "M": (I, 10),
        "d": (F, 1.0),
        "c": (F, 0.0),
        "lambda0": ("lambda", None),
        "blocks": ("blocks", []),
        "T": (F, 1.0),
        "eps": (F, 1e-3),
        "x0": (F, 0.5),
        "write_log": (B, True),
    },
    "genealogy": {
        "n": (I, 10),
        "replace": (B, True),
        "h": (FL, [0.5, 1.0]),
        "sites": ("optints", None),
    },
    "renorm": {
        "c": ("optfloats", None),
        "lam": ("optfloats", None),
        "d0": (F, 0.5),
        "j": (I, 1),
        "theta": (F, 0.5),
        "engine": (S, "A", ("A", "B")),
        "T_eq": (F, 10.0),
        "dt": (F, 4e-3),
        "grid": ("grid", None),
        "horizon": (I, 50),
    },
    "seedbank": {
        "K": ("optfloats", None),
        "e": ("optfloats", None),
        "A": (F, 1.0),
        "B": (F, 1.0),
        "alpha": (F, 0.5),
        "beta": (F, 1.0),
        "M_max": (I, 1000),
        "samples": (I, 10000),
        "t_grid": (FL, [1.0, 10.0, 100.0]),
        "hill_threshold": ("optfloat", None),
        "T": (F, 1000.0),
        "walk_replicas": (I, 2000),
    },
    "fss": {
        "model": (S, "meanfield", ("meanfield", "torus", "seedbank-meanfield")),
        "sizes": (IL, [20, 80]),
        "c": (F, 1.0),
        "d": (F, 1.0),
        "theta0": (F, 0.5),
        "times": (FL, [0.0, 0.5, 1.0]),
        "dt": (F, 0.1),
        "scheme": (S, "beta", ("beta", "euler")),
        "qv_from": (F, 0.0),
        "K": (FL, []),
        "e": (FL, []),
        "dim": (I, 3),
        "init": (S, "bernoulli", ("bernoulli", "constant")),
        "block": (I, 50),
    },
}

TOP = {
    "kind": (S, None, tuple(KINDS)),
    "seed": (I, 0),
    "replicas": (I, 1),
    "output": (S, "out"),
}

GRID_KEYS = {"c", "lam", "q"}


class ValidationError(ConfigurationError):
    """Carries the full list of problems found in a config."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


def _num(v, path, errors, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        errors.append(f"{path}: expected a number, got {v!r}")
        return None
    if integer:
        if int(v) != v:
            errors.append(f"{path}: expected an integer, got {v!r}")
            return None
        return int(v)
    return float(v)


def _coerce(fields, v, path, errors):
    kind = fields[0]
    if v is None and kind.startswith("opt"):
        return None
    if v is None and kind in ("steps", "matrix", "lambda", "grid"):
        return None
    if kind == F or kind == "optfloat":
        return _num(v, path, errors)
    if kind == I or kind == "optint":
        return _num(v, path, errors, integer=True)
    if kind == S:
        if not isinstance(v, str):
            errors.append(f"{path}: expected a string, got {v!r}")
            return None
        if len(fields) > 2 and v not in fields[2]:
            errors.append(f"{path}: must be one of {list(fields[2])}, got {v!r}")
        return v
    if kind == B:
        if not isinstance(v, bool):
            errors.append(f"{path}: expected true/false, got {v!r}")
        return bool(v)
    if kind in (FL, IL, "optfloats", "optints"):
        if not isinstance(v, list):
            errors.append(f"{path}: expected a list, got {v!r}")
            return None
        integer = kind in (IL, "optints")
        return [_num(x, f"{path}[{i}]", errors, integer) for i, x in enumerate(v)]
    if kind == "matrix":
        if not isinstance(v, list) or not all(isinstance(r, list) for r in v):
            errors.append(f"{path}: expected a list of rows")
            return None
        return [[_num(x, f"{path}[{i}][{j}]", errors) for j, x in enumerate(r)] for i, r in enumerate(v)]
    if kind == "pairs":
        if not isinstance(v, list) or not all(isinstance(p, list) and len(p) == 2 for p in v):
            errors.append(f"{path}: expected a list of [location, mass] pairs")
            return []
        return [[_num(a, path, errors), _num(b, path, errors)] for a, b in v]
    if kind == "steps":
        if not isinstance(v, list) or not all(isinstance(p, list) and len(p) == 2 for p in v):
            errors.append(f"{path}: expected a list of [offset, probability] pairs")
            return None
        out = []
        for i, (off, p) in enumerate(v):
            off = off if isinstance(off, list) else [off]
            out.append([[_num(o, f"{path}[{i}]", errors, True) for o in off],
                        _num(p, f"{path}[{i}]", errors)])
        return out
    if kind == "lambda":
        return _block(LAMBDA_FIELDS, v, path, errors)
    if kind == "blocks":
        if not isinstance(v, list):
            errors.append(f"{path}: expected a list of {{mu, lambda}} entries")
            return []
        out = []
        for i, entry in enumerate(v):
            p = f"{path}[{i}]"
            if not isinstance(entry, dict):
                errors.append(f"{p}: expected a mapping")
                continue
            extra = set(entry) - {"mu", "lambda"}
            for k in sorted(extra):
                errors.append(f"{p}.{k}: unknown key")
            out.append({"mu": _num(entry.get("mu", 0.0), f"{p}.mu", errors),
                        "lambda": _block(LAMBDA_FIELDS, entry.get("lambda", {}), f"{p}.lambda", errors)})
        return out
    if kind == "grid":
        if not isinstance(v, dict):
            errors.append(f"{path}: expected a mapping with c, lam, q lists")
            return None
        for k in sorted(set(v) - GRID_KEYS):
            errors.append(f"{path}.{k}: unknown key")
        return {k: [_num(x, f"{path}.{k}", errors) for x in v.get(k, [0.0 if k == "lam" else 1.0])]
                for k in sorted(GRID_KEYS)}
    return v


def _block(fields: dict, given, path: str, errors: list) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        errors.append(f"{path}: expected a mapping")
        given = {}
    for k in sorted(set(given) - set(fields)):
        errors.append(f"{path}.{k}: unknown key")
    out = {}
    for k, s in fields.items():
        out[k] = _coerce(s, given[k], f"{path}.{k}", errors) if k in given else copy.deepcopy(s[1])
    return out


def _domain_checks(data: dict, errors: list):
    """Construct the domain objects to surface range and consistency errors."""
    from . import renorm as rn
    from .cannings import LambdaMeasure
    from .dynamics import DynamicsParams
    from .fss import FSSExperiment

    kind = data["kind"]
    if data["replicas"] < 0:
        errors.append("replicas: must be >= 0")

    def attempt(label, fn):
        try:
            fn()
        except (ParameterError, ValueError, TypeError) as exc:
            errors.append(f"{label}: {exc}")

    # blocks that already failed to parse are not range-checked
    broken = {e.split(".")[0].split(":")[0].split("[")[0] for e in errors
              if not e.endswith("unknown key")}
    uses = (set(REQUIRED.get(kind, ())) | set(OPTIONAL.get(kind, ()))) - broken
    if "geometry" in uses:
        attempt("geometry", lambda: build_geometry(data["geometry"]))
    if "dynamics" in uses:
        dyn = data["dynamics"]
        attempt("dynamics", lambda: DynamicsParams(
            d=dyn["d"], c=dyn["c"], m=dyn["m"], mutation=dyn["mutation"], s=dyn["s"],
            fitness=dyn["fitness"], dt=dyn["dt"]).validate(dyn["types"]))
        if len(dyn["theta"]) not in (1, dyn["types"]):
            errors.append(f"dynamics.theta: need {dyn['types']} entries")
        if dyn["T"] < 0 or dyn["record_every"] <= 0:
            errors.append("dynamics: need T >= 0 and record_every > 0")
    if "cannings" in uses:
        can = data["cannings"]
        if can["M"] < 1:
            errors.append("cannings.M: must be >= 1")
        if not 0 < can["eps"] <= 1:
            errors.append("cannings.eps: must lie in (0, 1]")
        if can["lambda0"] is not None:
            attempt("cannings.lambda0", lambda: build_lambda(can["lambda0"]))
        for i, blk in enumerate(can["blocks"]):
            attempt(f"cannings.blocks[{i}]", lambda blk=blk: build_lambda(blk["lambda"]))
    if "renorm" in uses:
        ren = data["renorm"]
        if kind == "interaction-chain" and ren["c"] is None:
            errors.append("renorm.c: required for interaction-chain")
        if ren["c"] is not None:
            attempt("renorm", lambda: rn.RenormParams(tuple(ren["c"]), tuple(ren["lam"] or ()), ren["d0"]))
        if kind == "dichotomy" and ren["c"] is None and ren["grid"] is None:
            errors.append("renorm: dichotomy needs either c (array) or grid")
    if "seedbank" in uses:
        sb = data["seedbank"]
        if sb["K"] is not None or sb["e"] is not None:
            attempt("seedbank", lambda: rn.SeedbankColours(tuple(sb["K"] or ()), tuple(sb["e"] or ())))
        else:
            attempt("seedbank (K_m = A m^-alpha, e_m = B m^-beta)",
                    lambda: rn.SeedbankTailParams(sb["A"], sb["B"], sb["alpha"], sb["beta"], sb["M_max"]))
    if "fss" in uses:
        fs = data["fss"]
        attempt("fss", lambda: FSSExperiment(
            model=fs["model"], sizes=tuple(fs["sizes"]), c=fs["c"], d=fs["d"], theta0=fs["theta0"],
            times=tuple(fs["times"]), dt=fs["dt"], K=tuple(fs["K"]), e=tuple(fs["e"]),
            dim=fs["dim"], init=fs["init"], block=fs["block"], scheme=fs["scheme"],
            qv_from=fs["qv_from"]))
    if "genealogy" in uses and data["genealogy"]["n"] < 1:
        errors.append("genealogy.n: must be >= 1")


REQUIRED = {"dichotomy": ("renorm",), "interaction-chain": ("renorm",)}
OPTIONAL = {
    "diffusion-run": ("geometry", "dynamics"),
    "cannings-run": ("geometry", "cannings"),
    "mckean-vlasov": ("dynamics",),
    "interaction-chain": ("renorm",),
    "dichotomy": ("renorm",),
    "seedbank-tail": ("seedbank",),
    "seedbank-regime": ("geometry", "seedbank"),
    "fss": ("fss",),
    "genealogy-stats": ("geometry", "cannings", "genealogy"),
}


def build_lambda(fields: dict):
    from .cannings import LambdaMeasure

    return LambdaMeasure(atoms=tuple(tuple(p) for p in fields["atoms"]), continuous=fields["continuous"],
                         cont_mass=fields["mass"], beta_a=fields["a"], beta_b=fields["b"],
                         kingman=fields["kingman"])


def build_geometry(g: dict):
    from .geometry import HierGeography, TorusGeography

    if g["kind"] == "hier":
        return HierGeography(g["N"], g["L"], tuple(g["c"]))
    if g["steps"] is None:
        return TorusGeography.simple(g["d"], g["n"])
    return TorusGeography(g["d"], g["n"], tuple((tuple(o), p) for o, p in g["steps"]))


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated, fully populated experiment configuration."""

    data: dict

    @property
    def kind(self) -> str:
        return self.data["kind"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def replicas(self) -> int:
        return self.data["replicas"]

    def block(self, name: str) -> dict:
        return self.data[name]

    def canonical(self) -> str:
        return canonical_json(self.data)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        for k, v in kw.items():
            if v is not None:
                data[k] = v
        return validate_data(data)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def validate_data(raw: Any) -> ExperimentConfig:
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ValidationError(["config must be a mapping"])
    if "kind" not in raw:
        errors.append("kind: missing (one of " + ", ".join(KINDS) + ")")
    known = set(TOP) | set(BLOCKS)
    for k in sorted(set(raw) - known):
        errors.append(f"{k}: unknown key")
    data = {}
    for k, fields in TOP.items():
        data[k] = _coerce(fields, raw[k], k, errors) if k in raw else fields[1]
    kind = data.get("kind")
    for req in REQUIRED.get(kind, ()):
        if req not in raw:
            errors.append(f"{req}: block required for kind {kind!r}")
    for name, fields in BLOCKS.items():
        if name in raw and name != "budget" and name not in OPTIONAL.get(kind, ()) and kind in KINDS:
            errors.append(f"{name}: block not used by kind {kind!r}")
        data[name] = _block(fields, raw.get(name), name, errors)
    # keep only blocks relevant to the kind so the canonical form is minimal
    if kind in KINDS:
        data = {k: v for k, v in data.items()
                if k in TOP or k == "budget" or k in OPTIONAL[kind]}
        if not {"seed", "replicas"} & {e.split(":")[0] for e in errors}:
            _domain_checks(data, errors)
    if errors:
        raise ValidationError(errors)
    return ExperimentConfig(data)


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` style floats (YAML 1.2 rule)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def parse_config(text: str) -> ExperimentConfig:
    """Parse YAML/JSON text into a validated config, or raise :class:`ValidationError`."""
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ValidationError([f"syntax: {exc}"]) from exc
    return validate_data(raw if raw is not None else {})


def default_config(kind: str) -> ExperimentConfig:
    if kind not in KINDS:
        raise ValidationError([f"kind: unknown {kind!r}"])
    raw: dict = {"kind": kind}
    if kind in ("dichotomy", "interaction-chain"):
        raw["renorm"] = {"c": [1.0, 1.0], "lam": [0.0, 0.0]}
    return validate_data(raw)
