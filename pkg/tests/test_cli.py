import csv
import json

import numpy as np
import pytest

from csmart.cli import main
from csmart.data import write_csv
from csmart.simgen import GenerativeSpec, SimulationDesign, generate_trial


@pytest.fixture
def asic_csv(tmp_path):
    spec = GenerativeSpec(n=94, cluster_sizes=(1, 3), eta_true=(0.5, -0.3, 0.2, 0.4, -0.1, 0.3),
                          icc=0.2, seed=8)
    path = tmp_path / "asic.csv"
    write_csv(generate_trial(spec), path)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_analyze_shape(asic_csv, tmp_path, capsys):
    assert main(["analyze", str(asic_csv), "--fsa", "full", "-o", str(tmp_path / "rep")]) == 0
    rows = read_rows(tmp_path / "rep.csv")
    assert sum(r["kind"] == "coefficient" for r in rows) == 10
    assert sum(r["kind"] == "effect" for r in rows) == 6
    assert (tmp_path / "rep.txt").read_text() == capsys.readouterr().out


def test_two_blocks_share_estimates(asic_csv, tmp_path):
    out = tmp_path / "two"
    assert main(["analyze", str(asic_csv), "--fsa", "minimal", "--fsa", "full",
                 "--weights", "estimated", "-o", str(out)]) == 0
    rows = read_rows(f"{out}.csv")
    mini = [r for r in rows if r["preset"] == "minimal"]
    full = [r for r in rows if r["preset"] == "full"]
    assert len(mini) == len(full) == 16
    assert [r["estimate"] for r in mini] == [r["estimate"] for r in full]
    assert all(float(f["se"]) > float(m["se"]) for m, f in zip(mini, full))


def test_custom_fsa(asic_csv, tmp_path):
    out = tmp_path / "c"
    assert main(["analyze", str(asic_csv), "--fsa", "custom", "--fsa-dof", "--fsa-t", "-o", str(out)]) == 0
    rows = read_rows(f"{out}.csv")
    assert {r["preset"] for r in rows} == {"on-the-shelf"}
    assert main(["analyze", str(asic_csv), "--fsa-bias"]) == 1


def test_missing_a2_column(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("cluster_id,member_id,a1,r,y\n1,1,1,1,3.0\n")
    assert main(["analyze", str(bad)]) == 2


def test_invalid_design_exit_code(tmp_path):
    path = tmp_path / "few.csv"
    path.write_text("cluster_id,member_id,a1,r,a2,y\n1,1,1,1,NA,3.0\n2,1,-1,0,1,2.0\n")
    assert main(["analyze", str(path)]) == 2


def test_usage_errors():
    with pytest.raises(SystemExit) as e:
        main(["simulate", "table2"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["analyze", "x.csv", "--fsa", "bogus"])
    assert e.value.code == 1


def write_design(tmp_path, **kw):
    d = SimulationDesign(n=(14,), m=(3,), icc=(0.2,), replications=6, presets=("minimal", "full"), **kw)
    path = tmp_path / "design.json"
    path.write_text(d.to_json())
    return path


def test_simulate_single_replication(tmp_path):
    design = write_design(tmp_path)
    out = tmp_path / "sim.csv"
    code = main(["simulate", str(design), "--seed", "3", "--replications", "1", "-o", str(out)])
    assert code in (0, 3)
    row = read_rows(out)[0]
    assert row["minimal_mcse"] == "0.500000" and row["full_mcse"] == "0.500000"
    assert row["unreliable"] == "1"


def test_simulate_is_reproducible(tmp_path):
    design = write_design(tmp_path)
    outs = []
    for k, workers in enumerate((1, 2)):
        out = tmp_path / f"s{k}.csv"
        main(["simulate", str(design), "--seed", "9", "--workers", str(workers), "-o", str(out)])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    out = tmp_path / "other.csv"
    main(["simulate", str(design), "--seed", "10", "-o", str(out)])
    assert out.read_bytes() != outs[0]


def test_simulate_rejects_infeasible(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"n": [10], "delta": [0.8], "icc": [0.1], "replications": 2}))
    assert main(["simulate", str(path), "--seed", "1"]) == 2
    path.write_text(json.dumps({"n": [10], "unknown": 1}))
    assert main(["simulate", str(path), "--seed", "1"]) == 2


def test_bundled_designs_load():
    from importlib.resources import files

    for name in ("table2", "table3"):
        d = SimulationDesign.from_json((files("csmart") / "designs" / f"{name}.json").read_text())
        assert d.replications == 2000 and 10 in d.n


def test_validate(capsys):
    assert main(["validate", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "checks passed" in out and "FAIL" not in out
