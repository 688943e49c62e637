import hashlib
import json

import pytest
import yaml

from spatialpop import cli
from spatialpop.config import KINDS, ValidationError, default_config, parse_config, validate_data
from spatialpop.renorm import GeometricFamily, classify_dichotomy


@pytest.mark.parametrize("kind", sorted(KINDS))
def test_defaults_roundtrip(kind):
    cfg = default_config(kind)
    again = parse_config(cfg.canonical())
    assert again.canonical() == cfg.canonical()
    assert again.hash == cfg.hash == hashlib.sha256(cfg.canonical().encode()).hexdigest()
    assert kind in cli.describe(kind)


def test_hash_ignores_key_order_and_format():
    a = parse_config("kind: fss\nseed: 3\nfss: {d: 1.0, c: 2.0}\n")
    b = parse_config(json.dumps({"fss": {"c": 2, "d": 1}, "seed": 3, "kind": "fss"}))
    assert a.hash == b.hash
    assert parse_config("kind: fss\nseed: 4\n").hash != a.hash


def test_exponent_floats_parse():
    cfg = parse_config("kind: cannings-run\ncannings: {eps: 1e-4}\n")
    assert cfg.block("cannings")["eps"] == 1e-4


def test_all_errors_reported_together():
    with pytest.raises(ValidationError) as info:
        parse_config("kind: seedbank-tail\nbogus: 1\nseedbank: {alpha: 0.6, beta: 0.3, extra: 2}\n")
    errs = info.value.errors
    assert any(e.startswith("bogus") for e in errs)
    assert any("extra" in e for e in errs)
    assert any("alpha" in e or "beta" in e for e in errs)


def test_missing_required_block_and_kind():
    with pytest.raises(ValidationError, match="renorm"):
        parse_config("kind: dichotomy\n")
    with pytest.raises(ValidationError, match="kind"):
        validate_data({})
    with pytest.raises(ValidationError):
        parse_config("kind: fss\nrenorm: {c: [1.0]}\n")
    with pytest.raises(ValidationError):
        parse_config("[1, 2")


def test_overrides_revalidate():
    cfg = default_config("fss").with_overrides(seed=9, replicas=None)
    assert cfg.seed == 9 and cfg.replicas == 1
    with pytest.raises(ValidationError):
        cfg.with_overrides(replicas=-1)


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def test_exit_codes(tmp_path, capsys):
    ok = write(tmp_path, "ok.yaml", {"kind": "dichotomy", "renorm": {"grid": {"c": [1.0, 2.0], "lam": [0.0], "q": [1.0]}}})
    assert cli.main(["run", ok, "--out-dir", str(tmp_path / "o1")]) == cli.EXIT_OK == 0
    assert cli.main(["validate", ok]) == 0
    bad = write(tmp_path, "bad.yaml", {"kind": "fss", "nope": 1})
    assert cli.main(["run", bad]) == cli.EXIT_VALIDATION == 1
    assert "error: nope" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 1
    deep = write(tmp_path, "deep.yaml", {"kind": "interaction-chain", "renorm": {"c": [1.0], "lam": [0.0], "j": 3}})
    assert cli.main(["run", deep, "--out-dir", str(tmp_path / "o2")]) == cli.EXIT_RUNTIME == 2
    poor = write(tmp_path, "poor.yaml", {"kind": "fss", "replicas": 4, "budget": {"max_site_updates": 10}})
    assert cli.main(["run", poor, "--out-dir", str(tmp_path / "o3")]) == cli.EXIT_BUDGET == 3
    man = json.loads((tmp_path / "o3" / "manifest.json").read_text())
    assert man["partial"] and man["replicas_completed"] < 4
    assert cli.main(["run", ok, "--jobs", "0"]) == 1


def test_dichotomy_dispatch_matches_library(tmp_path):
    grid = {"c": [0.5, 2.0], "lam": [0.0, 1.0], "q": [1.0, 2.0]}
    m = cli.run(parse_config(yaml.safe_dump({"kind": "dichotomy", "renorm": {"grid": grid}})), tmp_path)
    out = json.loads((tmp_path / "verdicts.json").read_text())
    assert len(out) == 8 and m.kind == "dichotomy"
    for row in out:
        v = classify_dichotomy(GeometricFamily(row["c"], row["lam"], row["q"], row["d0"]))
        assert row["verdict"] == v.verdict


def test_manifest_hashes_and_zero_replicas(tmp_path):
    cfg = parse_config("kind: diffusion-run\nreplicas: 0\n")
    m = cli.run(cfg, tmp_path)
    assert m.replicas_completed == 0 and not m.partial
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config_hash"] == cfg.hash
    for name, digest in man["files"].items():
        assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest


def test_describe_verb(capsys):
    assert cli.main(["describe", "fss"]) == 0
    assert "defaults" in capsys.readouterr().out
