import csv
import subprocess
import sys

import pytest
import yaml

from blockpd.cli import available_presets, load_config, main
from blockpd.stepper import ConfigurationError

QUAD = {
    "name": "quad_small",
    "problem": {"name": "quadratic_saddle", "parameters": {"primal_sizes": [3, 3], "dual_sizes": [2, 2]}},
    "algorithm": "full_dual_v1",
    "regime": "acc",
    "constants": {"kappa": 0.05, "delta": 0.05, "tau0": 0.5, "acc_fraction": 0.5},
    "sampling": {"mode": "bernoulli_independent", "probabilities": [0.5, 0.5]},
    "max_iter": 200,
    "log_every": 10,
    "seeds": [0, 1],
    "reference": {"mode": "closed_form"},
}


def _write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _data_lines(path):
    return [line for line in path.read_text().splitlines() if not line.startswith("#")]


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", _write(tmp_path, QUAD), "--output-dir", str(out)]) == 0
    for name in ("run_0.csv", "run_1.csv", "summary.csv", "diagnostics.txt"):
        assert (out / name).exists()
    rows = list(csv.DictReader(_data_lines(out / "run_0.csv")))
    assert rows[0]["iter"] == "0"
    assert rows[-1]["iter"] == "200"
    assert float(rows[-1]["dist2_plain"]) < float(rows[0]["dist2_plain"])
    diag = (out / "diagnostics.txt").read_text()
    assert "metric_check" in diag and "rate_fit" in diag
    assert "quad_small seed=0 ok" in capsys.readouterr().out


def test_outputs_are_byte_identical_apart_from_header(tmp_path):
    cfg = _write(tmp_path, QUAD)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", cfg, "--output-dir", str(a)]) == 0
    assert main(["run", cfg, "--output-dir", str(b)]) == 0
    for name in ("run_0.csv", "run_1.csv", "summary.csv"):
        assert _data_lines(a / name) == _data_lines(b / name)


def test_overrides(tmp_path):
    out = tmp_path / "o"
    assert main(["run", _write(tmp_path, QUAD), "--output-dir", str(out), "--seed-override", "7",
                 "--max-iter-override", "20"]) == 0
    assert (out / "run_7.csv").exists() and not (out / "run_0.csv").exists()
    rows = list(csv.DictReader(_data_lines(out / "run_7.csv")))
    assert rows[-1]["iter"] == "20"


@pytest.mark.parametrize(
    "patch",
    [
        {"constants": {"kappa": 1.2, "delta": 0.05, "tau0": 0.5}},
        {"bogus_key": 1},
        {"problem": {"name": "quadratic_saddle", "parameters": {"not_a_parameter": 1}}},
        {"problem": {"name": "unknown_problem"}},
        {"algorithm": "full_primal", "sampling": {"mode": "full"}, "regime": "warp"},
    ],
)
def test_invalid_configs_exit_with_two(tmp_path, patch, capsys):
    cfg = dict(QUAD, **patch)
    assert main(["run", _write(tmp_path, cfg), "--output-dir", str(tmp_path / "x")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_compare_marks_unfinished_variants(tmp_path, capsys):
    fast = dict(QUAD, name="long")
    slow = dict(QUAD, name="short", max_iter=10)
    out = tmp_path / "cmp"
    code = main(["compare", _write(tmp_path, fast, "a.yaml"), _write(tmp_path, slow, "b.yaml"), "--output-dir", str(out)])
    assert code == 0
    text = (out / "compare.csv").read_text()
    lines = _data_lines(out / "compare.csv")
    assert lines[0] == "rank,variant,seed_0,seed_1"
    assert lines[1].startswith("1,long,")
    assert lines[2] == "2,short,DNF,DNF"
    assert text.startswith("# targets")


def test_output_root_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("BLOCKPD_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = dict(QUAD, max_iter=10)
    assert main(["run", _write(tmp_path, cfg)]) == 0
    assert (tmp_path / "root" / "quad_small" / "run_0.csv").exists()


def test_check_command(tmp_path, capsys):
    assert main(["check", _write(tmp_path, QUAD), "--output-dir", str(tmp_path / "c")]) == 0
    out = capsys.readouterr().out
    for tag in ("[jacobian_fd]", "[adjoint]", "[kappa_margin]", "[metric"):
        assert tag in out


def test_presets_load():
    names = available_presets()
    assert {"dti_d1", "dti_d4", "quadratic_full_dual_acc2", "tv1d_acc"} <= set(names)
    for n in names:
        load_config(n)
    with pytest.raises(ConfigurationError):
        load_config("no_such_preset")


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "blockpd", "presets"], capture_output=True, text=True, check=True)
    assert "dti_d4" in res.stdout


def test_dti_preset_runs_briefly(tmp_path):
    out = tmp_path / "d"
    assert main(["run", "dti_d4", "--output-dir", str(out), "--seed-override", "0", "--max-iter-override", "20"]) == 0
    rows = list(csv.DictReader(_data_lines(out / "run_0.csv")))
    assert float(rows[-1]["objective"]) < float(rows[0]["objective"])


def test_norm_tracking_section(tmp_path):
    cfg = {
        "name": "tracked",
        "problem": {"name": "dti", "parameters": {"dims": [3, 3, 3], "block_setup": "d2"}},
        "regime": "fixed",
        "max_iter": 20,
        "log_every": 5,
        "reference": {"mode": "none"},
        "norm_tracking": {"window": 5, "reinit": True},
    }
    assert main(["run", _write(tmp_path, cfg), "--output-dir", str(tmp_path / "t")]) == 0
    rows = list(csv.DictReader(_data_lines(tmp_path / "t" / "run_0.csv")))
    assert all(float(r["kappa_margin"]) >= -1e-12 for r in rows[1:])
    bad = dict(cfg, regime="acc2")
    assert main(["run", _write(tmp_path, bad, "bad.yaml"), "--output-dir", str(tmp_path / "u")]) == 2
    bad = dict(cfg, norm_tracking={"window": 0})
    assert main(["run", _write(tmp_path, bad, "bad2.yaml"), "--output-dir", str(tmp_path / "v")]) == 2
