import json
import subprocess
import sys

import pytest

from conformal_lab.cli import ConfigError, SCHEMA, main, parse_and_validate
from conformal_lab.io import read_csv


def _run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def _out_dir(stdout):
    line = [l for l in stdout.splitlines() if l.startswith("outputs in ")][-1]
    from pathlib import Path
    return Path(line.split("outputs in ", 1)[1])


def test_valid_flow_config(tmp_path):
    cfg = parse_and_validate(["flow", "--manifold", "sphere", "--n", "3", "--grid", "400",
                              "--tol", "1e-6", "--out", str(tmp_path)])
    assert cfg.command == "flow"
    assert cfg.params["grid"] == 400 and cfg.params["tol"] == 1e-6
    assert cfg.out_dir.parent == tmp_path
    assert cfg.out_dir.name.startswith("flow-")


def test_reduced_energy_rejects_n10(capsys, tmp_path):
    code, _, err = _run(["reduced-energy", "--n", "10", "--out", str(tmp_path)], capsys)
    assert code == 2
    assert "n = 10 singular denominator" in err


def test_continue_rejects_delta0(capsys, tmp_path):
    code, _, err = _run(["continue", "--n", "4", "--delta0", "2.1", "--out", str(tmp_path)], capsys)
    assert code == 2
    assert "delta0 = 2.1 violates 0 <= delta0 < 4/(n-2) = 2" in err


def test_config_file_and_flag_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"command": "flow", "grid": 120, "tol": 1e-5}))
    cfg = parse_and_validate(["flow", "--config", str(path), "--tol", "1e-7", "--out", str(tmp_path)])
    assert cfg.params["grid"] == 120 and cfg.params["tol"] == 1e-7


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_and_validate(["flow", "--config", str(bad)])
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"command": "weyl"}))
    with pytest.raises(ConfigError, match="not 'flow'"):
        parse_and_validate(["flow", "--config", str(other)])


def test_schema_covers_every_command():
    assert set(SCHEMA) == {"flow", "continue", "reduced-energy", "pohozaev", "bubbles", "weyl"}


def test_flow_outputs_are_deterministic(capsys, tmp_path):
    argv = ["flow", "--n", "3", "--grid", "120", "--plot"]
    code1, out1, _ = _run(argv + ["--out", str(tmp_path / "a")], capsys)
    code2, out2, _ = _run(argv + ["--out", str(tmp_path / "b")], capsys)
    assert code1 == code2 == 0
    d1, d2 = _out_dir(out1), _out_dir(out2)
    assert d1.name == d2.name
    for name in ("trajectory.csv", "final_field.csv"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    manifest = json.loads((d1 / "manifest.json").read_text())
    summary = json.loads((d1 / "summary.json").read_text())
    assert manifest["config"]["grid"] == 120 and manifest["schema_version"] == 1
    assert summary["passed"] is True and all(summary["checks"].values())
    assert any(name.endswith(".svg") for name in manifest["outputs"])
    header, rows = read_csv(d1 / "trajectory.csv")
    assert header == ["t", "r", "E", "volume", "supU", "supResidual", "concentration"]
    assert rows


def test_distinct_configs_get_distinct_directories(capsys, tmp_path):
    _, out1, _ = _run(["weyl", "--n", "5", "--out", str(tmp_path)], capsys)
    _, out2, _ = _run(["weyl", "--n", "6", "--out", str(tmp_path)], capsys)
    assert _out_dir(out1) != _out_dir(out2)


def test_environment_output_root(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("CONFORMAL_LAB_OUT", str(tmp_path / "env"))
    code, out, _ = _run(["weyl", "--n", "5"], capsys)
    assert code == 0
    assert _out_dir(out).parent == tmp_path / "env"


def test_weyl_scan_prints_52(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "conformal_lab.cli", "weyl", "--n", "52", "--seed", "7",
                           "--scan-critical-dimension", "--out", str(tmp_path)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert "52" in proc.stdout.split()


def test_pohozaev_classical_table(capsys, tmp_path):
    code, out, _ = _run(["pohozaev", "--case", "classical", "--out", str(tmp_path)], capsys)
    assert code == 0
    header, rows = read_csv(_out_dir(out) / "refinement.csv")
    assert header == ["level", "residual", "order"]
    assert float(rows[-1][2]) == pytest.approx(2.0, abs=0.2)
    terms_header, _ = read_csv(_out_dir(out) / "pohozaev_terms.csv")
    assert terms_header == ["term", "value", "level"]


def test_continue_enumeration(capsys, tmp_path):
    code, out, _ = _run(["continue", "--n", "4", "--L", "6.664324407", "--delta0", "0.01", "--enumerate",
                         "--target", "6.7", "--grid", "128", "--out", str(tmp_path)], capsys)
    assert code == 0
    d = _out_dir(out)
    summary = json.loads((d / "summary.json").read_text())
    assert summary["checks"]["morse_inequalities"] and summary["checks"]["shooting_count_agrees"]
    assert (d / "enumeration.csv").exists() and (d / "morse_inequalities.csv").exists()


def test_bubbles_command(capsys, tmp_path):
    code, out, _ = _run(["bubbles", "--poles", "north,south", "--scales", "0.02,0.03",
                         "--out", str(tmp_path)], capsys)
    assert code == 0
    data = json.loads((_out_dir(out) / "decomposition.json").read_text())
    assert data["m"] == 2


def test_module_failure_exit_code(capsys, tmp_path, monkeypatch):
    import conformal_lab.cli as cli

    def boom(cfg, out):
        raise RuntimeError("synthetic")
    monkeypatch.setitem(cli.RUNNERS, "weyl", boom)
    code, _, err = _run(["weyl", "--n", "5", "--out", str(tmp_path)], capsys)
    assert code == 3 and "synthetic" in err
