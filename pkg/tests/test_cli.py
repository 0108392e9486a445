import csv
import json
import subprocess
import sys

import pytest

from dlrmarket.cli import compare, main
from dlrmarket.data import fixture_path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def congested_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "congested"
    assert main(["run", "--case", "case3_congested", "--out", str(out), "--validate", "--samples", "10000"]) == 0
    return out


def test_outputs(congested_run):
    names = {p.name for p in congested_run.iterdir()}
    assert {"dispatch.csv", "prices.csv", "emissions.csv", "thermal.csv", "duals.json",
            "validation.json", "summary.json"} <= names
    summary = json.loads((congested_run / "summary.json").read_text())
    assert summary["mode_order"] == ["SLR", "DLR", "CC_DLR"]
    deltas = summary["cost_delta_vs_SLR_pct"]
    assert deltas["DLR"] <= deltas["CC_DLR"] <= 0
    prices = read_csv(congested_run / "prices.csv")
    assert {r["mode"] for r in prices} == {"SLR", "DLR", "CC_DLR"}
    assert len(prices) == 9
    val = json.loads((congested_run / "validation.json").read_text())
    assert val["CC_DLR"]["monte_carlo"]["max_cc_rate"] <= 0.06
    assert val["CC_DLR"]["equilibrium"]["max_rel_gap"] <= 1e-4


def test_deterministic(congested_run, tmp_path):
    again = tmp_path / "again"
    assert main(["run", "--case", "case3_congested", "--out", str(again), "--validate", "--samples", "10000"]) == 0
    for name in ("dispatch.csv", "prices.csv", "summary.json", "duals.json", "validation.json"):
        assert (again / name).read_bytes() == (congested_run / name).read_bytes()


def test_missing_weather_exits_2(tmp_path, capsys):
    code = main(["run", "--case", "case3_congested", "--weather", str(tmp_path / "none.csv"), "--out", str(tmp_path)])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError" and err["path"].endswith("none.csv")


def test_bad_epsilon_exits_2(tmp_path, capsys):
    assert main(["run", "--case", "case3_congested", "--epsilon", "0.7", "--out", str(tmp_path)]) == 2
    assert "epsilon" in capsys.readouterr().err


def test_compare(congested_run, tmp_path, capsys):
    slr = tmp_path / "slr"
    assert main(["run", "--case", fixture_path("case3_congested"), "--mode", "slr", "--out", str(slr)]) == 0
    capsys.readouterr()
    entries = compare([slr, congested_run])
    assert entries[0]["cost_delta_pct"] == 0.0
    by_mode = {e["mode"]: e for e in entries[1:]}
    summary = json.loads((congested_run / "summary.json").read_text())
    assert by_mode["DLR"]["cost_delta_pct"] == pytest.approx(summary["cost_delta_vs_SLR_pct"]["DLR"], rel=1e-6)
    assert main(["compare", str(slr), str(congested_run), "--out", str(tmp_path / "cmp.json")]) == 0
    assert "d cost" in capsys.readouterr().out


def test_compare_rejects_other_case(congested_run, tmp_path, capsys):
    other = tmp_path / "other"
    assert main(["run", "--case", "case2_minimal", "--mode", "slr", "--out", str(other)]) == 0
    assert main(["compare", str(congested_run), str(other)]) == 2
    assert "CaseMismatch" in capsys.readouterr().err


def test_multi_period_run(tmp_path):
    out = tmp_path / "multi"
    assert main(["run", "--case", "case3_transient", "--multi", "--out", str(out)]) == 0
    thermal = read_csv(out / "thermal.csv")
    temps = [float(r["temp_C"]) for r in thermal if r["mode"] == "DLR" and r["temp_C"]]
    assert max(temps) <= 100.0 + 1e-6
    summary = json.loads((out / "summary.json").read_text())
    assert summary["periods"] == 4


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dlrmarket.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
