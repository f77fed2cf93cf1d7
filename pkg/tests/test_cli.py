import csv
import itertools
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mmvsde.cli import main

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def validator(name):
    jsonschema = pytest.importorskip("jsonschema")
    referencing = pytest.importorskip("referencing")
    docs = [json.loads(p.read_text()) for p in SCHEMAS.glob("*.schema.json")]
    registry = referencing.Registry().with_resources(
        (d["$id"], referencing.Resource.from_contents(d)) for d in docs)
    schema = json.loads((SCHEMAS / f"{name}.schema.json").read_text())
    return jsonschema.Draft202012Validator(schema, registry=registry)


def validate_dir(out):
    validator("manifest").validate(json.loads((out / "manifest.json").read_text()))
    validator("report").validate(json.loads((out / "report.json").read_text()))
    table = validator("table")
    for p in out.glob("*.json"):
        if p.name not in ("manifest.json", "report.json"):
            table.validate(json.loads(p.read_text()))


def test_version_and_scenarios(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert main(["scenarios"]) == 0
    out = capsys.readouterr().out
    assert "reflected_bm" in out and "jump_annulus_2d" in out


def test_validation_errors_exit_1(tmp_path, capsys):
    assert main(["run", "no_such_scenario", "--out", str(tmp_path / "x")]) == 1
    assert "built-in scenarios" in capsys.readouterr().err
    assert main(["run", "frozen", "--particles", "0", "--out", str(tmp_path / "y")]) == 1
    assert "positive integer" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text('name = "x"\ndim = = 1\n')
    assert main(["run", str(bad)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_frozen_run_has_constant_trajectories(tmp_path):
    out = tmp_path / "frozen"
    assert main(["simulate", "frozen", "--out", str(out)]) == 0
    rows = read_csv(out / "trajectory.csv")
    assert rows[0] == ["seed", "particle", "t", "x_0", "x_1", "k_tv"]
    by_particle = {}
    for r in rows[1:]:
        by_particle.setdefault(r[1], set()).add((r[3], r[4], r[5]))
    assert by_particle and all(len(v) == 1 for v in by_particle.values())
    assert read_csv(out / "law.csv")[0] == ["seed", "t", "mean_0", "mean_1", "second_moment", "w2_prev"]
    validate_dir(out)


def test_default_output_directory_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MMVSDE_OUT", str(tmp_path / "env"))
    assert main(["simulate", "frozen", "--particles", "10"]) == 0
    assert (tmp_path / "env" / "frozen" / "manifest.json").exists()
    monkeypatch.delenv("MMVSDE_OUT")
    monkeypatch.chdir(tmp_path)
    assert main(["simulate", "frozen", "--particles", "10"]) == 0
    assert (tmp_path / "mmvsde-out" / "frozen" / "law.csv").exists()


def test_json_format_tables(tmp_path):
    out = tmp_path / "j"
    assert main(["simulate", "linear_mean_field", "--particles", "100", "--format", "json", "--out", str(out)]) == 0
    law = json.loads((out / "law.json").read_text())
    assert law["columns"] == ["seed", "t", "mean_0", "second_moment", "w2_prev"]
    assert len(law["rows"]) == 101
    assert not (out / "law.csv").exists()
    validate_dir(out)


def brute_w2(x, y):
    n = len(x)
    best = min(np.sum((x - y[list(p)]) ** 2) for p in itertools.permutations(range(n)))
    return np.sqrt(best / n)


def test_w2_command_against_brute_force(tmp_path, capsys):
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    np.savetxt(tmp_path / "a.csv", x, delimiter=",", header="x0,x1", comments="")
    np.savetxt(tmp_path / "b.csv", y, delimiter=",", fmt="%.17g")
    assert main(["w2", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--method", "exact_assignment"]) == 0
    got = float(capsys.readouterr().out)
    assert abs(got - brute_w2(np.loadtxt(tmp_path / "a.csv", delimiter=",", skiprows=1), y)) < 1e-12
    assert main(["w2", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--format", "json",
                 "--out", str(tmp_path / "w.json")]) == 0
    assert "w2" in json.loads(capsys.readouterr().out)
    assert json.loads((tmp_path / "w.json").read_text())["method"] == "auto"


def test_cascade_levels_override(tmp_path):
    out = tmp_path / "c"
    assert main(["cascade", "osgood", "--particles", "100", "--levels", "2,4,8", "--out", str(out)]) == 0
    rows = read_csv(out / "cascade.csv")
    assert len(rows) == 3
    report = json.loads((out / "report.json").read_text())
    assert report["levels"] == [2, 4, 8]
    validate_dir(out)


def test_picard_strict_nonconvergence_exit_3(tmp_path):
    cfg = tmp_path / "p.cfg"
    cfg.write_text((Path(__file__).resolve().parents[1] / "src/mmvsde/scenarios/attraction.cfg").read_text()
                   .replace("study.max_iters = 15", "study.max_iters = 2"))
    assert main(["run", str(cfg), "--particles", "200", "--out", str(tmp_path / "s"), "--strict"]) == 3
    assert main(["run", str(cfg), "--particles", "200", "--out", str(tmp_path / "n")]) == 0
    man = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert man["exit_status"] == 3 and man["flags"]["converged"] is False
    validate_dir(tmp_path / "s")


def test_coupled_run(tmp_path):
    out = tmp_path / "co"
    assert main(["coupled", "contraction", "--out", str(out)]) == 0
    rows = read_csv(out / "coupled.csv")
    assert rows[0][:3] == ["seed", "t", "g"]
    validate_dir(out)


def test_diagnose_reflected_bm_passes(tmp_path):
    out = tmp_path / "d"
    assert main(["diagnose", "reflected_bm", "--particles", "2000", "--step", "0.01", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    checks = {c["name"]: c for c in report["seeds"][0]["checks"]}
    assert report["passed"]
    for name in ("pair_in_A", "confinement", "telescoped", "k_continuity"):
        assert checks[name]["passed"], name
    validate_dir(out)


@pytest.mark.parametrize("name", ["jump_reflected", "attraction"])
def test_outputs_byte_identical_across_workers(tmp_path, name):
    blobs = []
    for w in (1, 2, 8):
        out = tmp_path / f"w{w}"
        assert main(["run", name, "--particles", "5000", "--workers", str(w), "--out", str(out)]) == 0
        blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert blobs[0] == blobs[1] == blobs[2]


def test_schema_rejects_bad_manifest(tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    out = tmp_path / "f"
    assert main(["simulate", "frozen", "--particles", "5", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    man["exit_status"] = "ok"
    with pytest.raises(jsonschema.ValidationError):
        validator("manifest").validate(man)
    del man["exit_status"]
    with pytest.raises(jsonschema.ValidationError):
        validator("manifest").validate(man)


def test_console_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mmvsde", "scenarios"], capture_output=True, text=True)
    assert res.returncode == 0 and "brownian" in res.stdout
