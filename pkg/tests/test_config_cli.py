import csv

import pytest

from robustfilter.cli import main
from robustfilter.config import ConfigError, ExperimentConfig, parse_config_text, render_config

FAST = """
model.tau = 4
model.steps_per_block = 128
grid.size = 60
truncation.iota = 0.9
run.blocks = 3
"""


def _write(tmp_path, text, name="c.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_parse_and_render_round_trip():
    cfg = parse_config_text(FAST + "run.seeds = 2..4\ntruncation.sweep = 1, 2, 3, 4\nrun.force = yes\n")
    assert cfg.model.tau == 4.0 and cfg.seeds == (2, 3, 4) and cfg.force
    assert cfg.delta_sweep == (1.0, 2.0, 3.0, 4.0)
    assert parse_config_text(render_config(cfg)) == cfg
    assert parse_config_text(render_config(ExperimentConfig())) == ExperimentConfig()


@pytest.mark.parametrize("text,msg", [
    ("model.h 2", "expected"),
    ("model.nope = 1", "unknown key"),
    ("model.tau = two", "bad value"),
    ("model.tau = -1", "positive"),
    ("truncation.sweep = 3, 2, 4, 5", "increasing"),
    ("model.steps_per_block = 10", "100"),
])
def test_parse_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config_text(text)


def test_comments_and_blank_lines_are_ignored():
    assert parse_config_text("# header\n\nmodel.h = 2  # trailing\n").model.h == 2.0


def test_simulate_writes_path_and_config(tmp_path):
    c = _write(tmp_path, FAST)
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(c), "--seed", "5", "--out", str(out)]) == 0
    rows = _rows(out / "path.csv")
    assert rows[0] == ["t", "y", "x", "w"] and len(rows) == 3 * 128 + 2
    echoed = parse_config_text((out / "config.txt").read_text())
    assert echoed.seeds == (5,) and echoed.model.tau == 4.0


def test_runs_are_reproducible(tmp_path):
    c = _write(tmp_path, FAST)
    for d in ("a", "b"):
        assert main(["filter", "--config", str(c), "--seed", "1", "--out", str(tmp_path / d)]) == 0
    for f in ("filter.csv", "filter_truncated.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert _rows(tmp_path / "a" / "filter.csv")[0] == ["k", "grid_index", "x", "weight"]


def test_coeffs_command(tmp_path):
    c = _write(tmp_path, FAST)
    assert main(["coeffs", "--config", str(c), "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "coeffs.csv")
    assert rows[0][:2] == ["k", "theta"] and len(rows) == 4


def test_verify_exit_codes(tmp_path):
    good = _write(tmp_path, FAST, "good.txt")
    bad = _write(tmp_path, "model.tau = 2\ntruncation.iota = 0.75\n", "bad.txt")
    assert main(["verify", "hypotheses", "--config", str(good), "--out", str(tmp_path / "g")]) == 0
    assert main(["verify", "--suite", "hypotheses", "--config", str(bad), "--out", str(tmp_path / "b")]) == 1
    assert _rows(tmp_path / "b" / "hypotheses.csv")[0] == ["inequality", "margin", "pass"]
    assert main(["verify", "nosuch", "--out", str(tmp_path / "n")]) == 2
    assert main(["verify", "--out", str(tmp_path / "n")]) == 2


def test_usage_errors(tmp_path, capsys):
    assert main(["frobnicate"]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.txt"), "--out", str(tmp_path)]) == 2
    bad = _write(tmp_path, "model.h = x\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_sweep_refuses_failing_hypotheses(tmp_path):
    c = _write(tmp_path, "model.tau = 2\nmodel.steps_per_block = 128\n")
    assert main(["sweep", "--config", str(c), "--out", str(tmp_path)]) == 2
    assert not (tmp_path / "sweep.csv").exists()


def test_sweep_and_stability_outputs(tmp_path):
    c = _write(tmp_path, FAST + "run.blocks = 4\nrun.seeds = 0,1\nrun.burn_in = 1\n")
    code = main(["sweep", "--config", str(c), "--out", str(tmp_path)])
    assert code in (0, 1)
    assert _rows(tmp_path / "sweep.csv")[0] == ["delta", "delta_sq_over_h", "sup_mean_tv", "mean_escape", "log_T"]
    assert len(_rows(tmp_path / "sweep.csv")) == 5
    assert _rows(tmp_path / "escape_0.csv")[0] == ["k", "t", "tv", "hilbert", "escape_mass", "seed"]
    code = main(["stability", "--config", str(c), "--out", str(tmp_path)])
    assert code in (0, 1)
    rows = _rows(tmp_path / "stability.csv")
    assert rows[0] == ["k", "t", "tv", "hilbert", "escape_mass", "seed"] and len(rows) == 1 + 2 * 4
    assert len(_rows(tmp_path / "slopes.csv")) == 3
