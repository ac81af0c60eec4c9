import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from finsler_holonomy.cli import (
    SCHEMA,
    build_parser,
    dumps_report,
    load_config,
    loads_report,
    main,
    run_command,
    strip_timings,
)
from finsler_holonomy.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
GOLDEN = Path(__file__).parent / "golden"


def _close(a, b, path="$"):
    if isinstance(a, dict):
        assert isinstance(b, dict) and set(a) == set(b), path
        for k in a:
            _close(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert isinstance(b, list) and len(a) == len(b), path
        for i, (u, v) in enumerate(zip(a, b)):
            _close(u, v, f"{path}[{i}]")
    elif isinstance(a, float) and not isinstance(b, bool) and isinstance(b, (int, float)):
        if math.isnan(a):
            assert math.isnan(b), path
        else:
            assert b == pytest.approx(a, rel=1e-7, abs=1e-12), path
    else:
        assert a == b, path


@pytest.mark.parametrize("name,command", [("euclidean_inspect", "inspect"), ("s3_algebra", "algebra"),
                                          ("euclidean_transport", "transport")])
def test_golden_reports(name, command):
    rep, code = run_command(command, load_config(CONFIGS / f"{name}.toml"))
    assert code == 0
    got = json.loads(dumps_report(strip_timings(rep)))
    want = json.loads((GOLDEN / f"{name}.json").read_text())
    _close(want, got)


def test_report_roundtrip_and_schema():
    rep, _ = run_command("inspect", load_config(CONFIGS / "sphere_inspect.toml"))
    text = dumps_report(rep)
    back = loads_report(text)
    assert back["schema"] == SCHEMA and back["status"] == "ok"
    assert dumps_report(back) == text
    for key in ("schema_version", "tool", "command", "config", "results", "flags", "files", "error", "timings"):
        assert key in back
    with pytest.raises(ConfigError):
        loads_report(json.dumps({"schema": "other"}))
    with pytest.raises(ConfigError):
        loads_report(json.dumps({"schema": SCHEMA, "schema_version": 99}))


def test_inspect_oracle_on_sphere():
    rep, _ = run_command("inspect", load_config(CONFIGS / "sphere_inspect.toml"))
    for pt in rep["results"]["points"]:
        assert pt["oracle"]["curvature_residual"] <= 1e-10


def test_determinism_modulo_timings():
    cfg = load_config(CONFIGS / "s3_algebra.toml")
    a, _ = run_command("algebra", cfg)
    b, _ = run_command("algebra", cfg)
    assert dumps_report(strip_timings(a)) == dumps_report(strip_timings(b))


def test_seed_override_changes_echo():
    cfg = load_config(CONFIGS / "euclidean_inspect.toml")
    rep, _ = run_command("inspect", cfg, seed=7)
    assert rep["config"]["seed"] == 7
    rep, code = run_command("inspect", cfg, seed=-1)
    assert code == 2


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\nfamily=")
    assert main(["inspect", "--config", str(bad)]) == 2
    assert main(["inspect", "--config", str(tmp_path / "missing.toml")]) == 2

    unknown = tmp_path / "unknown.toml"
    unknown.write_text('[model]\nfamily = "euclidean"\ndim = 2\ncolour = 1\n[inspect]\npoints = [[0.0, 0.0]]\n')
    out = tmp_path / "u.json"
    assert main(["inspect", "--config", str(unknown), "--out", str(out)]) == 2
    rep = loads_report(out.read_text())
    assert rep["error"]["type"] == "ConfigError" and "colour" in rep["error"]["message"]

    out = tmp_path / "d.json"
    assert main(["inspect", "--config", str(CONFIGS / "randers_degenerate.toml"), "--out", str(out)]) == 3
    rep = loads_report(out.read_text())
    assert rep["status"] == "error" and rep["exit_code"] == 3
    assert rep["error"]["diagnostics"]["x"] == [0.0, 0.0]
    assert "not positive definite" in rep["error"]["message"]


def test_unknown_top_level_key():
    cfg = load_config(CONFIGS / "euclidean_inspect.toml")
    cfg["algebra"] = {}
    _, code = run_command("inspect", cfg)
    assert code == 2


def test_holonomy_command_writes_csv(tmp_path):
    out = tmp_path / "h.json"
    code = main(["holonomy", "--config", str(CONFIGS / "sphere_holonomy.toml"), "--out", str(out), "--threads", "2"])
    assert code == 0
    rep = loads_report(out.read_text())
    assert rep["files"]
    for f in rep["files"]:
        lines = (tmp_path / f).read_text().splitlines()
        assert lines[0] == "h,max_err,ratio"
    loops = rep["results"]["loops"][0]
    assert loops["csv"] in rep["files"]
    assert all(3.7 <= row["ratio"] <= 4.3 for row in loops["table"][1:])
    tri = rep["results"]["triangles"][0]
    assert abs(tri["angle"] - math.pi / 2) <= 1e-6


def test_threads_do_not_change_results(tmp_path):
    cfg = load_config(CONFIGS / "sphere_holonomy.toml")
    a, _ = run_command("holonomy", cfg, threads=1, out=str(tmp_path / "a.json"))
    b, _ = run_command("holonomy", cfg, threads=3, out=str(tmp_path / "a.json"))
    a, b = strip_timings(a), strip_timings(b)
    a["config"].pop("threads"), b["config"].pop("threads")
    assert dumps_report(a) == dumps_report(b)


def test_parser_requires_config():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["inspect"])


def test_module_entry_point(tmp_path):
    out = tmp_path / "r.json"
    proc = subprocess.run([sys.executable, "-m", "finsler_holonomy", "inspect", "--config",
                           str(CONFIGS / "euclidean_inspect.toml"), "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert loads_report(out.read_text())["command"] == "inspect"
