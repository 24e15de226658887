import math
import random

import numpy as np
import pytest

from subnet_tune.bench import (
    AggregateReport,
    ExperimentConfig,
    ModelSpec,
    PretrainConfig,
    RunRecord,
    Shift,
    TaskSpec,
    aggregate,
    apply_shift,
    bayes_accuracy_two_gaussians,
    case_analysis,
    default_benchmark,
    failed_run_flag,
    format_cell,
    generate_task,
    metric_accuracy,
    metric_mcc,
    metric_mse,
    predict,
    run_experiment,
)
from subnet_tune.net import build_mlp
from subnet_tune.strategies import StrategyConfig, make_strategy
from subnet_tune.tensor import make_rng
from subnet_tune.trainer import OptimizerConfig, train


def tiny_config(**over):
    src = TaskSpec(name="src", num_classes=3, in_dim=6, teacher_hidden=8, seed=1)
    cfg = dict(
        pretrain=PretrainConfig(task=src, samples=600, epochs=2, opt=OptimizerConfig(lr=0.2, batch_size=32)),
        tasks=[TaskSpec(name="a", num_classes=2, in_dim=6, teacher_hidden=8, seed=1, head_seed=1, metric="mcc"),
               TaskSpec(name="b", num_classes=3, in_dim=6, teacher_hidden=8, seed=1, head_seed=2)],
        sizes=[40, 80],
        strategies=[StrategyConfig("vanilla"), StrategyConfig("dps_mix", p=0.3, ur=0.25)],
        seeds=[0, 1, 2],
        opt=OptimizerConfig(lr=0.1, batch_size=16),
        epochs=2,
        model=ModelSpec(hidden=[8]),
        pool_size=200,
        eval_samples=50,
    )
    cfg.update(over)
    return ExperimentConfig(**cfg)


def test_mcc_worked_example():
    preds = [1] * 6 + [0] * 2 + [0] * 3 + [1] * 1
    targets = [1] * 6 + [1] * 2 + [0] * 3 + [0] * 1
    assert metric_mcc(preds, targets) == pytest.approx(0.47809, abs=1e-5)


def test_mcc_degenerate_and_perfect():
    assert metric_mcc([1, 1, 1], [1, 0, 1]) == 0.0
    assert metric_mcc([0, 1, 1], [0, 1, 1]) == 1.0
    assert metric_mcc([1, 0], [0, 1]) == -1.0
    with pytest.raises(ValueError):
        metric_mcc([0, 2], [0, 1])


def test_accuracy_and_mse():
    assert metric_accuracy([1, 0, 2, 2], [1, 1, 2, 0]) == 0.5
    assert metric_mse([1.0, 3.0], [0.0, 1.0]) == 2.5
    with pytest.raises(ValueError):
        metric_accuracy([1, 2], [1])


def test_case_analysis_strict_majority():
    table = np.zeros((10, 3), dtype=bool)
    table[:6, 0] = True  # 6 of 10 right: easy
    table[:5, 1] = True  # 5 of 10: neither
    table[:4, 2] = True  # 6 of 10 wrong: hard
    assert case_analysis(table) == {"easy_fraction": pytest.approx(1 / 3), "hard_fraction": pytest.approx(1 / 3)}


def test_failed_run_flag_directions():
    assert failed_run_flag(0.70, 0.71) and not failed_run_flag(0.71, 0.71)
    assert failed_run_flag(0.3, 0.2, higher_is_better=False)
    assert not failed_run_flag(0.1, 0.2, higher_is_better=False)


def test_shift_identity_and_ood_difference():
    x = make_rng(0).normal(size=(5, 4))
    assert apply_shift(x, Shift()) is x
    moved = apply_shift(x, Shift(offset=1.0, angle=0.3))
    assert not np.allclose(moved, x)
    np.testing.assert_allclose(apply_shift(x, Shift(offset=0.0, angle=2 * math.pi)), x, atol=1e-12)


def test_teacher_tasks_share_features_but_not_labels():
    a = TaskSpec(name="a", num_classes=2, seed=3, head_seed=1)
    b = TaskSpec(name="b", num_classes=2, seed=3, head_seed=2)
    da, db = generate_task(a, 500, make_rng(0)), generate_task(b, 500, make_rng(0))
    np.testing.assert_array_equal(da.inputs, db.inputs)
    assert 0.2 < np.mean(da.targets) < 0.8
    assert np.mean(da.targets != db.targets) > 0.1


def test_mixture_is_learnable_near_bayes():
    spec = TaskSpec(name="m", generator="mixture", num_classes=2, in_dim=8, seed=4, separation=4.0)
    train_set, test_set = generate_task(spec, 2000, make_rng(1)), generate_task(spec, 2000, make_rng(2))
    model = build_mlp(8, [16], 2, make_rng(3))
    cfg = OptimizerConfig(lr=0.1, total_steps=500, batch_size=32)
    trained, _ = train(model, train_set, make_strategy(StrategyConfig()), cfg, make_rng(4))
    acc = metric_accuracy(predict(trained, test_set.inputs), test_set.targets)
    bayes = bayes_accuracy_two_gaussians(4.0)
    assert bayes == pytest.approx(0.97725, abs=1e-5)
    assert acc > 0.95 and acc <= bayes + 0.02


def test_format_cell():
    assert format_cell(0.7012, 0.0153, "accuracy") == "70.12 1.53"
    assert format_cell(0.25, 0.01, "mse") == "0.25 0.01"
    assert format_cell(None, None, "mcc") == "-"


def test_config_round_trip_and_validation():
    cfg = default_benchmark()
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    assert len(cfg.tasks) == 2 and cfg.sizes == [500, 1000] and len(cfg.seeds) == 10
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ValueError):
        tiny_config(seeds=[])
    with pytest.raises(ValueError):
        tiny_config(sizes=[500])


def test_duplicate_strategy_labels():
    cfg = tiny_config(strategies=[StrategyConfig("vanilla"), StrategyConfig("vanilla")])
    assert cfg.labels == ["vanilla", "vanilla#2"]


@pytest.fixture(scope="module")
def tiny_report():
    return run_experiment(tiny_config())


def test_experiment_cells_complete(tiny_report):
    rep = tiny_report
    assert len(rep.cells) == 2 * 2 * 2
    assert len(rep.records) == 2 * 2 * 2 * 3
    for c in rep.cells:
        assert c["runs"] == 3 and c["aborted"] == 0
        assert c["score"]["n"] == 3 and c["score"]["std"] >= 0
    assert rep.averages["vanilla"]["time_ratio"] == 1.0
    assert rep.timing_table()[1][1] == "x1.00"


def test_report_round_trip(tiny_report, tmp_path):
    tiny_report.save(tmp_path / "r.json")
    back = AggregateReport.load(tmp_path / "r.json")
    assert back.to_dict() == tiny_report.to_dict()
    paths = tiny_report.write_tables(tmp_path / "tables")
    assert sorted(p.name for p in paths) == ["cases.csv", "ood.csv", "scores.csv", "timing.csv"]


def test_paired_runs_share_subsamples(tiny_report):
    # at p=0 DPS Mix reduces to vanilla, so paired runs must agree exactly
    cfg = tiny_config(strategies=[StrategyConfig("vanilla"), StrategyConfig("dps_mix", p=0.0)], seeds=[5])
    rep = run_experiment(cfg)
    for task in ("a", "b"):
        for size in (40, 80):
            v = rep.cell("vanilla", task, size)["score"]["mean"]
            d = rep.cell("dps_mix(p=0,ur=0.1)", task, size)["score"]["mean"]
            assert v == d
    assert rep.cell("vanilla", "a", 40)["score"]["single_seed"]


def test_aggregate_is_seed_order_invariant(tiny_report):
    cfg = tiny_config()
    recs = list(tiny_report.records)
    random.Random(0).shuffle(recs)
    shuffled = aggregate(cfg, recs)
    for a, b in zip(tiny_report.cells, shuffled.cells):
        assert a["score"]["mean"] == b["score"]["mean"]
        assert a["score"]["std"] == pytest.approx(b["score"]["std"], abs=1e-15)


def test_aborted_runs_are_reported():
    cfg = tiny_config(seeds=[0, 1])
    recs = [RunRecord("vanilla", "a", 40, 0, score=0.5, ood_score=0.4, correct="10"),
            RunRecord("vanilla", "a", 40, 1, aborted=True, error="TrainingDiverged: boom")]
    rep = aggregate(cfg, recs)
    c = rep.cell("vanilla", "a", 40)
    assert c["aborted"] == 1 and c["score"]["n"] == 1 and c["score"]["single_seed"]
