import csv
import json
import subprocess
import sys
from xml.etree import ElementTree

import pytest

from frac_heat_lab import cli
from frac_heat_lab.solvability import SWEEP_COLUMNS

NS = {"svg": "http://www.w3.org/2000/svg"}
BASE = {"nonlinearity": {"family": "power", "p": 4}, "N": 1, "theta": 2.0}


def _run(tmp_path, cfg, name="out", **kw):
    out = tmp_path / name
    code = cli.run(cfg, out=str(out), **kw)
    result = json.loads((out / "result.json").read_text()) if (out / "result.json").exists() \
        else None
    return code, out, result


def test_classify_quartic(tmp_path):
    code, _, res = _run(tmp_path, {**BASE, "mode": "classify"})
    assert code == cli.EXIT_OK
    c = res["classify"]
    assert c["p_f"] == pytest.approx(4.0, rel=1e-12)
    assert c["p_theta"] == 3.0 and c["classification"] == "Supercritical"


def test_kernel_check_cauchy(tmp_path):
    code, _, res = _run(tmp_path, {**BASE, "theta": 1.0, "mode": "kernel-check"})
    assert code == cli.EXIT_OK
    assert abs(res["kernel"]["mass_error"]) <= 1e-6
    assert res["kernel"]["bound_constant"] == pytest.approx(3.141592653589793, rel=1e-6)


SWEEP = {**BASE, "mode": "sweep", "grid": {"L": 2.0, "M": 1024},
         "data": {"kind": "dcs", "family": "Power", "params": {"p": 4}},
         "sweep": {"lambda_min": 1e-3, "lambda_max": 1e3, "points": 7, "bisections": 2}}


@pytest.fixture(scope="module")
def sweep_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    return _run(tmp, SWEEP)


def test_sweep_brackets_and_writes_artifacts(sweep_run):
    code, out, res = sweep_run
    assert code == cli.EXIT_OK
    br = res["sweep"]["bracket"]
    assert 0 < br["lambda_lo"] < br["lambda_hi"]
    with open(out / "sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == tuple(SWEEP_COLUMNS)
    assert len(rows) - 1 == len(res["sweep"]["rows"])
    svg = (out / "sweep.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"result.json", "sweep.csv", "sweep.svg"}


def test_sweep_is_deterministic_across_outputs_and_threads(tmp_path, sweep_run):
    _, out, _ = sweep_run
    code, out2, _ = _run(tmp_path, SWEEP, name="other", threads=3)
    assert code == cli.EXIT_OK
    for name in ("result.json", "sweep.csv", "sweep.svg"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()
    m1 = json.loads((out / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["config_hash"] == m2["config_hash"]


def _markers(svg_path):
    root = ElementTree.parse(svg_path).getroot()
    return sum(len(g.findall(".//svg:use", NS)) for g in root.iter("{%s}g" % NS["svg"])
               if g.get("id", "").startswith("markers-"))


def test_render_report_marker_count(tmp_path, sweep_run):
    _, out, res = sweep_run
    assert _markers(out / "sweep.svg") == len(res["sweep"]["rows"])
    (tmp_path / "result.json").write_text((out / "result.json").read_text())
    assert cli.render_report(tmp_path) == ["sweep.csv", "sweep.svg"]
    assert (tmp_path / "sweep.csv").read_bytes() == (out / "sweep.csv").read_bytes()


def test_render_report_empty_sweep(tmp_path):
    (tmp_path / "result.json").write_text(json.dumps({"sweep": {"rows": []}}))
    assert cli.render_report(tmp_path) == ["sweep.csv", "sweep.svg"]
    svg = (tmp_path / "sweep.svg").read_text()
    assert "<!-- empty sweep -->" in svg and _markers(tmp_path / "sweep.svg") == 0
    with open(tmp_path / "sweep.csv") as fh:
        assert len(list(csv.reader(fh))) == 1
    with pytest.raises(FileNotFoundError):
        cli.render_report(tmp_path / "missing")


def test_invalid_grid_size_names_field(tmp_path, capsys):
    code, _, _ = _run(tmp_path, {**BASE, "mode": "classify", "grid": {"M": 1000}})
    assert code == cli.EXIT_INVALID
    assert "$.grid.M" in capsys.readouterr().err


def test_schema_violation_names_field(tmp_path, capsys):
    code, _, _ = _run(tmp_path, {**BASE, "mode": "classify", "theta": 3.0})
    assert code == cli.EXIT_INVALID
    assert "$.theta" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path):
    cfg = {**BASE, "mode": "sufficient", "data": {"kind": "constant", "value": 1.0},
           "sufficient": {"beta": 0.9, "delta": 0.1, "eps": 1.0, "T": 0.01}}
    code, out, res = _run(tmp_path, cfg)
    assert code == cli.EXIT_NUMERICAL
    assert res["error"]["type"] == "SolvabilityError"
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == 3


def test_evolve_writes_history_plot(tmp_path):
    cfg = {**BASE, "mode": "evolve", "grid": {"L": 4.0, "M": 128},
           "data": {"kind": "indicator"},
           "time": {"T": 0.05, "dt": 0.01, "scheme": "history", "refine": "never"}}
    code, out, res = _run(tmp_path, cfg)
    assert code == cli.EXIT_OK
    assert res["solve"]["verdict"] == "Converged"
    assert "<svg" in (out / "evolve.svg").read_text()


def test_manifest_hash_ignores_output_location(tmp_path):
    cfg = {**BASE, "mode": "classify"}
    _, a, _ = _run(tmp_path, cfg, name="a")
    _, b, _ = _run(tmp_path, cfg, name="b")
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"] == cli.config_hash(cli.load_config(cfg))
    assert ma["outputs"] == mb["outputs"]


def test_necessary_constant_mode(tmp_path):
    cfg = {**BASE, "nonlinearity": {"family": "power", "p": 2}, "mode": "necessary",
           "data": {"kind": "constant", "value": 0.5}, "necessary": {"Tstar": 3.0}}
    code, _, res = _run(tmp_path, cfg)
    assert code == cli.EXIT_OK
    assert res["necessary"]["kind"] == "NecessaryViolated"
    assert res["necessary"]["witness"]["violation_time"] == pytest.approx(2.0)


def test_sufficient_reports_supersolution(tmp_path):
    cfg = {**BASE, "mode": "sufficient", "grid": {"L": 2.0, "M": 64},
           "data": {"kind": "constant", "value": 1.0},
           "sufficient": {"beta": 0.45, "delta": 0.1, "eps": 1.0, "T": 0.05, "steps": 10}}
    code, _, res = _run(tmp_path, cfg)
    assert code == cli.EXIT_OK
    s = res["sufficient"]
    assert s["kind"] == "SufficientHolds"
    assert s["supersolution"]["holds"] and s["supersolution"]["kappa"] == 2.0


def test_console_entry_point(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**BASE, "mode": "classify"}))
    proc = subprocess.run([sys.executable, "-m", "frac_heat_lab.cli", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "frac_heat_lab.cli", str(tmp_path / "none.json")],
                         capture_output=True, text=True)
    assert bad.returncode == 2
