import json
import os
import subprocess
import sys

import numpy as np
import pytest

from psido import cli
from psido import experiments as X
from psido import quantize as Q

CONFIGS = os.path.join(os.path.dirname(X.__file__), "configs")


def write_config(tmp_path, name, text):
    path = tmp_path / f"{name}.toml"
    path.write_text(text)
    return str(path)


SEMINORM_UNIT = """\
experiment = "seminorm"
check = "value"
seed = 0

[weight]
kind = "sinh_hyperbolic"
r_min = 0.05
r_max = 60.0

[symbol]
text = "1"
m = 0.0
sigma = 1.0
M = 2
r_window = [1.0, 10.0]
expected = 1.0
"""

CONSTANT_PARAMETRIX = """\
experiment = "parametrix"
check = "constant_coefficients"
seed = 2
z = [{z}, 0.0]
chi = "1"
N = [0, 1]

[weight]
kind = "constant"

[operator.coeff]
"2,0" = "1"
"0,2" = "1"

[grid]
n_r = 64
n_theta = 8
r_min = 0.0
r_max = 16.0
"""


def test_list_is_stable(capsys):
    assert cli.main(["list"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["list"]) == 0
    assert capsys.readouterr().out == first
    lines = first.splitlines()
    assert len(lines) == 9
    modules = {line.split("[")[1].split("]")[0] for line in lines}
    assert modules == {"symbols", "quantize", "parametrix", "blocks", "manifold"}


def test_run_seminorm_unit(tmp_path, capsys):
    cfg = write_config(tmp_path, "unit", SEMINORM_UNIT)
    out = tmp_path / "out"
    assert cli.main(["run", cfg, "--output-dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("PASS  seminorm_value")
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] and report["seed"] == 0
    assert report["criteria"][0]["measured"]["value"] == pytest.approx(1.0, rel=1e-12)


def test_reports_are_deterministic(tmp_path):
    cfg = write_config(tmp_path, "cc", CONSTANT_PARAMETRIX.format(z=-1.0))
    reports = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        assert cli.main(["run", cfg, "--output-dir", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        rep.pop("timestamp")
        reports.append(rep)
        assert (out / "constant_coefficients.csv").exists()
    assert reports[0] == reports[1]


def test_default_output_directory(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, "unit", SEMINORM_UNIT)
    monkeypatch.chdir(tmp_path)
    assert cli.main(["run", cfg]) == 0
    assert (tmp_path / "results" / "unit" / "report.json").exists()


def test_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path, "bad", "experiment = [unclosed\n")
    assert cli.main(["run", bad]) == cli.EXIT_PARSE
    noseed = write_config(tmp_path, "noseed", SEMINORM_UNIT.replace("seed = 0\n", ""))
    assert cli.main(["run", noseed]) == cli.EXIT_PARSE
    unknown = write_config(tmp_path, "unknown", 'experiment = "nope"\nseed = 1\n')
    assert cli.main(["run", unknown]) == cli.EXIT_PARSE
    badsym = write_config(tmp_path, "badsym", SEMINORM_UNIT.replace('text = "1"',
                                                                     'text = "(+ 1"'))
    assert cli.main(["run", badsym, "--output-dir", str(tmp_path / "o")]) == cli.EXIT_PARSE
    # z on the symbol range: the ellipticity certificate fails
    onrange = write_config(tmp_path, "onrange", CONSTANT_PARAMETRIX.format(z=0.5))
    assert cli.main(["run", onrange, "--output-dir", str(tmp_path / "o")]) == cli.EXIT_NUMERIC
    assert cli.main(["run", str(tmp_path / "missing.toml")]) == cli.EXIT_PARSE
    capsys.readouterr()


def test_failed_criterion_exits_one(tmp_path, capsys):
    cfg = write_config(tmp_path, "wrong", SEMINORM_UNIT.replace("expected = 1.0",
                                                                "expected = 2.0"))
    assert cli.main(["run", cfg, "--output-dir", str(tmp_path / "o")]) == cli.EXIT_FAIL
    assert capsys.readouterr().out.startswith("FAIL")


def test_grid_info(tmp_path, capsys):
    grid = Q.Grid(2, 32, 8, 0.5, 12.5, pad=0.25)
    path = tmp_path / "u.bin"
    Q.write_grid_function(path, Q.random_bandlimited(grid, 0))
    assert cli.main(["grid-info", str(path)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n_r"] == 32 and info["samples"] == 256 and info["complete"]
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    assert cli.main(["grid-info", str(path)]) == cli.EXIT_PARSE
    assert not json.loads(capsys.readouterr().out)["complete"]
    path.write_bytes(b"garbage")
    assert cli.main(["grid-info", str(path)]) == cli.EXIT_PARSE


@pytest.mark.slow
def test_remainder_decay_artifacts(tmp_path, capsys):
    out = tmp_path / "rd"
    cfg = os.path.join(CONFIGS, "c04_remainder_decay.toml")
    assert cli.main(["run", cfg, "--output-dir", str(out)]) == 0
    capsys.readouterr()
    lines = (out / "remainder_decay.csv").read_text().splitlines()
    assert lines[0] == "N,y,residual"
    rows = [line.split(",") for line in lines[1:]]
    assert {r[0] for r in rows} == {"0", "1"}
    assert all(np.isfinite(float(r[2])) for r in rows)
    assert (out / "plot_residual_N0.csv").read_text().startswith("x,y")
    meta = json.loads((out / "plot_residual_N1.meta.json").read_text())
    assert meta == {"x": "y", "y": "residual"}


def test_console_entry_point_with_thread_cap(tmp_path):
    env = dict(os.environ, PSIDO_THREADS="1")
    out = subprocess.run([sys.executable, "-m", "psido.cli", "list"], capture_output=True,
                         text=True, env=env, check=True)
    assert out.stdout == X.catalog_text()


@pytest.mark.parametrize("name", X.shipped_configs())
def test_shipped_configs_validate(name):
    X.validate_config(X.shipped_config(name))
