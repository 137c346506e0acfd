import csv
import json

import pytest

from biharmlab import cli, experiments


def test_exponents_command(tmp_path, capsys):
    assert cli.main(["exponents", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "exponents.json").read_text())
    assert all(data["gates"].values())
    rows = list(csv.DictReader(open(tmp_path / "exponents_exponents.csv")))
    assert rows[0]["n"] == "4" and rows[0]["dirichlet_upper"] == "6"
    assert "PASS" in capsys.readouterr().out


def test_failing_gate_sets_exit_code(tmp_path, monkeypatch):
    monkeypatch.setitem(experiments.RUNNERS, "exponents",
                        lambda **k: {"gates": {"x": False}, "metrics": {}, "tables": {}})
    assert cli.main(["exponents", "--out", str(tmp_path)]) == 1


def test_flags_are_forwarded(monkeypatch, tmp_path):
    seen = {}

    def fake(profile="strict", h=None, dim=None, seed=0):
        seen.update(profile=profile, h=h, dim=dim, seed=seed)
        return {"gates": {"ok": True}, "metrics": {}, "tables": {}}
    monkeypatch.setitem(experiments.RUNNERS, "decay", fake)
    assert cli.main(["decay", "--h", "0.3", "--dim", "4", "--seed", "7", "--tolerance-profile", "strict",
                     "--out", str(tmp_path)]) == 0
    assert seen == {"profile": "strict", "h": 0.3, "dim": 4, "seed": 7}


def test_bad_arguments():
    with pytest.raises(SystemExit):
        cli.main(["no-such-command"])
    with pytest.raises(SystemExit):
        cli.main(["hiding", "--tolerance-profile", "loose"])


def test_error_exit(tmp_path, monkeypatch):
    def boom(**k):
        raise ValueError("bad input")
    monkeypatch.setitem(experiments.RUNNERS, "hiding", boom)
    assert cli.main(["hiding", "--out", str(tmp_path)]) == 2
