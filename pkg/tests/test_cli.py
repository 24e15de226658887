import csv
import json

import pytest

from subnet_tune.bench import AggregateReport
from subnet_tune.cli import main, sweep_strategies, UsageError

TINY = {
    "pretrain": {"task": {"name": "src", "num_classes": 3, "in_dim": 6, "teacher_hidden": 8, "seed": 1},
                 "samples": 300, "epochs": 1, "opt": {"lr": 0.2, "batch_size": 32}},
    "tasks": [{"name": "a", "num_classes": 2, "in_dim": 6, "teacher_hidden": 8, "seed": 1, "head_seed": 1,
               "metric": "mcc"},
              {"name": "b", "num_classes": 3, "in_dim": 6, "teacher_hidden": 8, "seed": 1, "head_seed": 2}],
    "sizes": [30],
    "strategies": [{"kind": "vanilla"}, {"kind": "dps_dense", "p": 0.3, "ur": 0.25}],
    "seeds": [0, 1],
    "opt": {"lr": 0.1, "batch_size": 16},
    "epochs": 1,
    "model": {"hidden": [6]},
    "pool_size": 100,
    "eval_samples": 20,
}


def write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def test_run_writes_artifacts(tmp_path, capsys):
    cfg = write(tmp_path, "exp.json", TINY)
    out = tmp_path / "res"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    for name in ("manifest.json", "report.json", "log.txt", "tables/scores.csv", "tables/timing.csv",
                 "tables/ood.csv", "tables/cases.csv"):
        assert (out / name).is_file(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1] and manifest["config"]["sizes"] == [30]
    rep = AggregateReport.load(out / "report.json")
    assert len(rep.records) == 2 * 1 * 2 * 2
    assert "x1.00" in capsys.readouterr().out


def test_run_refuses_non_empty_out(tmp_path, capsys):
    cfg = write(tmp_path, "exp.json", TINY)
    out = tmp_path / "res"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["run", "--config", cfg, "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["run", "--config", cfg, "--out", str(out), "--force"]) == 0


def test_missing_config_names_path(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "malformed" in capsys.readouterr().err
    cfg = write(tmp_path, "unk.json", {**TINY, "colour": "red"})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o2")]) == 2
    assert "colour" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--bogus"])
    assert exc.value.code == 2


def test_threads_flag_and_env(tmp_path, monkeypatch):
    cfg = write(tmp_path, "exp.json", TINY)
    monkeypatch.setenv("SUBNET_TUNE_THREADS", "2")
    out = tmp_path / "r"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["threads"] == 2
    out2 = tmp_path / "r2"
    assert main(["run", "--config", cfg, "--out", str(out2), "--threads", "1"]) == 0
    assert json.loads((out2 / "manifest.json").read_text())["threads"] == 1
    monkeypatch.setenv("SUBNET_TUNE_THREADS", "many")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "r3")]) == 2
    # process pool and inline runs give identical scores
    a, b = AggregateReport.load(out / "report.json"), AggregateReport.load(out2 / "report.json")
    assert [r.score for r in a.records] == [r.score for r in b.records]


def test_seed_override(tmp_path):
    cfg = write(tmp_path, "exp.json", TINY)
    out = tmp_path / "r"
    assert main(["run", "--config", cfg, "--out", str(out), "--seed", "7"]) == 0
    assert json.loads((out / "manifest.json").read_text())["seeds"] == [7, 8]


def test_sweep_grid_sizes():
    grid = {"strategies": ["dps_mix"], "p": [0.1, 0.2, 0.3, 0.4, 0.5], "ur": [0.05, 0.1, 0.2]}
    assert len(sweep_strategies(grid)) == 15
    grid = {"strategies": ["vanilla", "mixout", "dps_dense"], "p": [0.1, 0.3], "ur": [0.1, 0.2]}
    assert [s.name for s in sweep_strategies(grid)] == [
        "vanilla", "mixout(p=0.1)", "mixout(p=0.3)",
        "dps_dense(p=0.1,ur=0.1)", "dps_dense(p=0.1,ur=0.2)", "dps_dense(p=0.3,ur=0.1)", "dps_dense(p=0.3,ur=0.2)",
    ]
    with pytest.raises(UsageError):
        sweep_strategies({"strategies": [], "p": [0.1], "ur": [0.1]})
    with pytest.raises(UsageError):
        sweep_strategies({"strategies": ["dps_mix"], "p": [], "ur": [0.1]})


def test_sweep_end_to_end(tmp_path):
    cfg = write(tmp_path, "sweep.json", {**TINY, "grid": {"strategies": ["dps_mix"], "p": [0.1, 0.3], "ur": [0.25]}})
    out = tmp_path / "sw"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    cells = sorted(p.name for p in (out / "cells").iterdir())
    assert cells == ["dps_mix_p_0.1_ur_0.25", "dps_mix_p_0.3_ur_0.25"]
    for c in cells:
        rep = AggregateReport.load(out / "cells" / c / "report.json")
        assert rep.strategies[0] == "vanilla" and len(rep.strategies) == 2
    with open(out / "tables" / "per_p_distribution.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["p"] for r in rows if r["kind"] == "dps_mix"} == {"0.1", "0.3"}
    assert all(r["vanilla_median"] for r in rows)
    assert (out / "tables" / "sweep_summary.csv").is_file()


def test_empty_sweep_grid(tmp_path, capsys):
    cfg = write(tmp_path, "sweep.json", {**TINY, "grid": {"strategies": []}})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "no strategies" in capsys.readouterr().err


def test_compare_and_report(tmp_path, capsys):
    cfg_a = write(tmp_path, "a.json", {**TINY, "strategies": [{"kind": "vanilla"}]})
    cfg_b = write(tmp_path, "b.json", {**TINY, "strategies": [{"kind": "dps_dense", "p": 0.3, "ur": 0.25}]})
    assert main(["run", "--config", cfg_a, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg_b, "--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b" / "report.json"),
                 "--out", str(tmp_path / "cmp")]) == 0
    text = capsys.readouterr().out
    vanilla_line = [line for line in text.splitlines() if line.startswith("vanilla") and "x" in line]
    assert vanilla_line and "x1.00" in vanilla_line[-1]
    with open(tmp_path / "cmp" / "compare_scores.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][-2:] == ["d_mean", "d_std"] and rows[1][-2:] == ["+0.00", "+0.00"]
    assert main(["report", str(tmp_path / "a")]) == 0
    assert "cases" in capsys.readouterr().out
    assert main(["compare", str(tmp_path / "a")]) == 2


def test_compare_rejects_disjoint_tasks(tmp_path, capsys):
    other = {**TINY, "tasks": [dict(TINY["tasks"][1], name="c")], "strategies": [{"kind": "vanilla"}]}
    assert main(["run", "--config", write(tmp_path, "a.json", TINY), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", write(tmp_path, "c.json", other), "--out", str(tmp_path / "c")]) == 0
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "c")]) == 2
    err = capsys.readouterr().err
    assert "('c', 30)" in err and "('a', 30)" in err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--archs", "3", "--seed", "1"]) == 0
    assert "6/6 passed" in capsys.readouterr().out
