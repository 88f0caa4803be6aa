import json

import pytest

from polarlab import cli

from conftest import TINY


def _sets(**extra):
    return [f"--set={k}={json.dumps(v)}" for k, v in {**TINY, **extra}.items()]


def test_unknown_key_exits_2(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--set", "epoch=3"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_bad_type_exits_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"seed": "zero"}')
    assert cli.main(["run", "--config", str(p)]) == 2


def test_stage_failure_exits_3(tmp_path, capsys):
    code = cli.main(["defend", "--out", str(tmp_path), "-q"] + _sets(clean_fraction=0.05))
    assert code == 3
    assert "stage defend failed" in capsys.readouterr().err


def test_stage_subcommands(tmp_path, capsys):
    args = ["--out", str(tmp_path), "-q", "--seed", "2"] + _sets()
    assert cli.main(["gen-data"] + args) == 0
    assert (tmp_path / "data/train.npds").exists()
    assert not (tmp_path / "models/victim.nplr").exists()
    assert cli.main(["baseline-eval"] + args) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["seed"] == 2 and rep["baseline"] is not None and rep["defended"] is None
    assert cli.main(["risk-check"] + args) == 0
    assert json.loads((tmp_path / "report.json").read_text())["theorem2"] is not None


def test_flags_override_config_file(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({**TINY, "defense": "npd", "out": str(tmp_path / "a")}))
    assert cli.main(["gen-data", "--config", str(p), "--defense", "e-cnpd",
                     "--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert "e-cnpd" in out
    rep = json.loads((tmp_path / "b" / "report.json").read_text())
    assert rep["defense"] == "e-cnpd" and not (tmp_path / "a").exists()


def test_help_lists_stages(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for name in cli.COMMANDS:
        assert name in out
