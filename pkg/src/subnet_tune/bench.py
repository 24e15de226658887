"""Synthetic pretrain-then-fine-tune benchmark.

A frozen random "teacher" network defines the labelling. The source task and
the fine-tuning tasks share the teacher's hidden features but use different
read-outs, so a model pretrained on the source task carries features the
fine-tuning tasks can reuse. Out-of-domain sets keep the labelling function
and move the input distribution (mean offset plus a rotation).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .net import MlpModel, build_mlp, clone_as_pretrained, forward, replace_head
from .strategies import StrategyConfig, make_strategy
from .tensor import make_rng
from .trainer import Dataset, OptimizerConfig, TrainingDiverged, train

log = logging.getLogger(__name__)

METRICS = ("accuracy", "mcc", "mse")
HIGHER_IS_BETTER = {"accuracy": True, "mcc": True, "mse": False}


@dataclass
class Shift:
    offset: float = 0.0  # added along the normalised all-ones direction
    angle: float = 0.0  # radians, rotation in the plane of the first two inputs

    @property
    def identity(self) -> bool:
        return self.offset == 0.0 and self.angle == 0.0


@dataclass
class TaskSpec:
    name: str = "task"
    kind: str = "classification"
    num_classes: int = 2
    generator: str = "teacher"  # or "mixture"
    in_dim: int = 16
    teacher_hidden: int = 32
    seed: int = 0  # teacher features / mixture means
    head_seed: int = 0  # teacher read-out
    noise: float = 0.0  # label flip prob (classification) or output noise std
    separation: float = 4.0  # mixture: distance between class means
    metric: str = "accuracy"
    shift: Shift = field(default_factory=Shift)

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = Shift(**self.shift)
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"task kind must be classification or regression, got {self.kind!r}")
        if self.generator not in ("teacher", "mixture"):
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.kind == "classification" and self.num_classes < 2:
            raise ValueError("classification needs at least 2 classes")
        if self.generator == "mixture" and self.kind != "classification":
            raise ValueError("the mixture generator only makes classification tasks")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric == "mcc" and (self.kind != "classification" or self.num_classes != 2):
            raise ValueError("mcc needs a binary classification task")
        if self.metric == "mse" and self.kind != "regression":
            raise ValueError("mse is a regression metric")
        if self.in_dim < 2:
            raise ValueError("in_dim must be at least 2")
        if not 0.0 <= self.noise:
            raise ValueError("noise must be non-negative")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.kind == "classification" else 1

    def shifted(self, shift: Shift) -> "TaskSpec":
        d = asdict(self)
        d["shift"] = shift
        return TaskSpec(**d)


class _Teacher:
    def __init__(self, spec: TaskSpec):
        frng = make_rng(spec.seed)
        self.a = frng.normal(size=(spec.in_dim, spec.teacher_hidden)) * (1.5 / math.sqrt(spec.in_dim))
        self.c = frng.normal(size=(1, spec.teacher_hidden)) * 0.5
        hrng = np.random.Generator(np.random.PCG64([spec.seed, spec.head_seed, 1]))
        self.b = hrng.normal(size=(spec.teacher_hidden, spec.out_dim)) / math.sqrt(spec.teacher_hidden)
        ref = hrng.normal(size=(4096, spec.in_dim))
        out = self._raw(ref)
        # centre the read-out so classes are roughly balanced / outputs unit scale
        self.shift = out.mean(axis=0, keepdims=True)
        self.scale = out.std() if spec.kind == "regression" else 1.0

    def _raw(self, x):
        return np.tanh(x @ self.a + self.c) @ self.b

    def __call__(self, x):
        return (self._raw(x) - self.shift) / self.scale


def _mixture_means(spec: TaskSpec) -> np.ndarray:
    rng = make_rng(spec.seed)
    if spec.num_classes == 2:
        u = rng.normal(size=spec.in_dim)
        u /= np.linalg.norm(u)
        return np.stack([-u, u]) * (spec.separation / 2)
    means = rng.normal(size=(spec.num_classes, spec.in_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means * (spec.separation / 2)


def apply_shift(x: np.ndarray, shift: Shift) -> np.ndarray:
    if shift.identity:
        return x
    x = x.copy()
    c, s = math.cos(shift.angle), math.sin(shift.angle)
    x0, x1 = x[:, 0].copy(), x[:, 1].copy()
    x[:, 0] = c * x0 - s * x1
    x[:, 1] = s * x0 + c * x1
    return x + shift.offset / math.sqrt(x.shape[1])


def generate_task(spec: TaskSpec, n: int, rng: np.random.Generator) -> Dataset:
    """``n`` i.i.d. examples of ``spec``; the shift moves inputs only."""
    if n < 1:
        raise ValueError("need at least one example")
    if spec.generator == "mixture":
        y = rng.integers(0, spec.num_classes, size=n)
        x = _mixture_means(spec)[y] + rng.normal(size=(n, spec.in_dim))
        x = apply_shift(x, spec.shift)
    else:
        x = apply_shift(rng.normal(size=(n, spec.in_dim)), spec.shift)
        out = _Teacher(spec)(x)
        if spec.kind == "classification":
            y = out.argmax(axis=1)
        else:
            y = out[:, 0]
    if spec.noise > 0:
        if spec.kind == "classification":
            flip = rng.random(n) < spec.noise
            y = np.where(flip, rng.integers(0, spec.num_classes, size=n), y)
        else:
            y = y + rng.normal(0.0, spec.noise, size=n)
    return Dataset(x, y)


def bayes_accuracy_two_gaussians(separation: float) -> float:
    """Bayes-optimal accuracy for two unit-covariance Gaussians ``separation`` apart."""
    return 0.5 * (1.0 + math.erf(separation / 2 / math.sqrt(2)))


# ---------------------------------------------------------------- metrics


def metric_accuracy(preds, targets) -> float:
    preds, targets = np.asarray(preds), np.asarray(targets)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets differ in length")
    return float(np.mean(preds == targets))


def metric_mcc(preds, targets) -> float:
    """Matthews correlation for binary labels; 0 when a marginal is empty."""
    preds, targets = np.asarray(preds), np.asarray(targets)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets differ in length")
    if not (np.isin(preds, (0, 1)).all() and np.isin(targets, (0, 1)).all()):
        raise ValueError("mcc needs binary 0/1 labels")
    tp = float(np.sum((preds == 1) & (targets == 1)))
    tn = float(np.sum((preds == 0) & (targets == 0)))
    fp = float(np.sum((preds == 1) & (targets == 0)))
    fn = float(np.sum((preds == 0) & (targets == 1)))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def metric_mse(preds, targets) -> float:
    preds, targets = np.asarray(preds, float), np.asarray(targets, float)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets differ in length")
    return float(np.mean((preds - targets) ** 2))


_METRIC_FNS = {"accuracy": metric_accuracy, "mcc": metric_mcc, "mse": metric_mse}


def predict(model: MlpModel, inputs) -> np.ndarray:
    out = forward(model, inputs)
    return out.argmax(axis=1) if model.head == "classification" else out[:, 0]


def evaluate(model: MlpModel, data: Dataset, metric: str, correct_tol: float = 0.5) -> tuple[float, np.ndarray]:
    """Metric value plus a per-example correctness vector.

    Regression examples count as correct when ``|error| <= correct_tol``.
    """
    preds = predict(model, data.inputs)
    score = _METRIC_FNS[metric](preds, data.targets)
    if model.head == "classification":
        correct = preds == data.targets
    else:
        correct = np.abs(preds - data.targets) <= correct_tol
    return score, correct


def case_analysis(correctness) -> dict[str, float]:
    """Fractions of examples right (easy) or wrong (hard) in a strict
    majority of runs. ``correctness`` is runs x examples; a tie is neither."""
    c = np.asarray(correctness, dtype=bool)
    if c.ndim != 2 or c.shape[1] == 0:
        raise ValueError("need a runs x examples correctness table with examples")
    runs = c.shape[0]
    right = c.sum(axis=0)
    wrong = runs - right
    return {
        "easy_fraction": float(np.mean(2 * right > runs)),
        "hard_fraction": float(np.mean(2 * wrong > runs)),
    }


def failed_run_flag(strategy_mean: float, vanilla_mean: float, higher_is_better: bool = True) -> bool:
    """True when the strategy's mean score is strictly worse than vanilla's."""
    if higher_is_better:
        return strategy_mean < vanilla_mean
    return strategy_mean > vanilla_mean


# ---------------------------------------------------------------- configs


@dataclass
class ModelSpec:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"


@dataclass
class PretrainConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    samples: int = 20000
    epochs: int = 3
    opt: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(kind="sgd", lr=0.1, batch_size=64))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.task, dict):
            self.task = TaskSpec(**self.task)
        if isinstance(self.opt, dict):
            self.opt = OptimizerConfig.from_dict(self.opt)


@dataclass
class ExperimentConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    tasks: list[TaskSpec] = field(default_factory=lambda: [TaskSpec()])
    sizes: list[int] = field(default_factory=lambda: [500, 1000])
    strategies: list[StrategyConfig] = field(default_factory=lambda: [StrategyConfig()])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 3
    model: ModelSpec = field(default_factory=ModelSpec)
    pool_size: int = 4000
    eval_samples: int = 2000
    ood_shift: Shift = field(default_factory=lambda: Shift(offset=1.5, angle=0.6))
    correct_tol: float = 0.5

    def __post_init__(self):
        if isinstance(self.pretrain, dict):
            self.pretrain = PretrainConfig(**self.pretrain)
        self.tasks = [TaskSpec(**t) if isinstance(t, dict) else t for t in self.tasks]
        self.strategies = [StrategyConfig(**s) if isinstance(s, dict) else s for s in self.strategies]
        if isinstance(self.opt, dict):
            self.opt = OptimizerConfig.from_dict(self.opt)
        if isinstance(self.model, dict):
            self.model = ModelSpec(**self.model)
        if isinstance(self.ood_shift, dict):
            self.ood_shift = Shift(**self.ood_shift)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.tasks:
            raise ValueError("at least one fine-tuning task is required")
        if not self.strategies:
            raise ValueError("at least one strategy is required")
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("subsample sizes must be positive")
        if max(self.sizes) > self.pool_size:
            raise ValueError(f"subsample size {max(self.sizes)} exceeds pool of {self.pool_size}")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError("task names must be unique")
        for t in self.tasks:
            if t.in_dim != self.pretrain.task.in_dim:
                raise ValueError(f"task {t.name} input width differs from the pretraining task")
        self.labels = _unique_labels(self.strategies)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["opt"] = self.opt.to_dict()
        d["pretrain"]["opt"] = self.pretrain.opt.to_dict()
        d["strategies"] = [s.to_dict() for s in self.strategies]
        for s, label in zip(d["strategies"], self.labels):
            s["label"] = label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)


def _unique_labels(strategies: list[StrategyConfig]) -> list[str]:
    seen: dict[str, int] = {}
    labels = []
    for s in strategies:
        base = s.name
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    return labels


def default_benchmark() -> ExperimentConfig:
    """Desk-scale default: two fine-tuning tasks sharing the source teacher's
    features, sizes 500/1000, ten paired seeds."""
    source = TaskSpec(name="source", num_classes=4, seed=7, head_seed=0, noise=0.0)
    tasks = [
        TaskSpec(name="binary", num_classes=2, seed=7, head_seed=1, noise=0.2, metric="mcc"),
        TaskSpec(name="three_way", num_classes=3, seed=7, head_seed=2, noise=0.2, metric="accuracy"),
    ]
    return ExperimentConfig(
        pretrain=PretrainConfig(task=source, samples=20000, epochs=20,
                                opt=OptimizerConfig(kind="sgd", lr=0.2, batch_size=64)),
        tasks=tasks,
        sizes=[500, 1000],
        strategies=[
            StrategyConfig("vanilla"),
            StrategyConfig("dps_mix", p=0.1, ur=0.1),
            StrategyConfig("dps_mix", p=0.3, ur=0.1),
        ],
        seeds=list(range(10)),
        opt=OptimizerConfig(kind="sgd", lr=0.3, batch_size=16, warmup_fraction=0.1),
        epochs=10,
    )


# ---------------------------------------------------------------- running


def pretrain_then_snapshot(model_spec: ModelSpec, cfg: PretrainConfig, data: Dataset | None = None) -> MlpModel:
    """Train on the source task and freeze the result as the pretrained anchor."""
    rng_data, rng_init, rng_train = (np.random.Generator(np.random.PCG64(s))
                                     for s in np.random.SeedSequence(cfg.seed).spawn(3))
    if data is None:
        data = generate_task(cfg.task, cfg.samples, rng_data)
    model = build_mlp(cfg.task.in_dim, model_spec.hidden, cfg.task.out_dim, rng_init,
                      model_spec.activation, cfg.task.kind)
    steps = cfg.epochs * math.ceil(len(data) / cfg.opt.batch_size)
    opt = OptimizerConfig.from_dict({**cfg.opt.to_dict(), "total_steps": steps})
    trained, tlog = train(model, data, make_strategy(StrategyConfig("vanilla")), opt, rng_train)
    if not np.isfinite(tlog.steps[-1].loss):
        raise TrainingDiverged("pretraining diverged")
    return clone_as_pretrained(trained)


@dataclass
class RunRecord:
    strategy: str
    task: str
    size: int
    seed: int
    score: float | None = None
    ood_score: float | None = None
    aborted: bool = False
    error: str | None = None
    train_time: float = 0.0
    phases: dict = field(default_factory=dict)
    grad_passes: int = 0
    final_loss: float | None = None
    correct: str = ""  # one '0'/'1' character per in-domain eval example

    def correct_vector(self) -> np.ndarray:
        return np.frombuffer(self.correct.encode(), dtype=np.uint8) == ord("1")


def _run_seed(seq) -> tuple[np.random.Generator, ...]:
    return tuple(np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seq).spawn(3))


def run_single(job: dict) -> RunRecord:
    """Fine-tune one (strategy, task, size, seed) cell member from the shared
    pretrained model. Failures become aborted records."""
    cfg: ExperimentConfig = job["config"]
    task: TaskSpec = job["task"]
    strat: StrategyConfig = job["strategy"]
    rec = RunRecord(job["label"], task.name, job["size"], job["seed"])
    # subsample, head init and data order depend only on (task, size, seed): runs are paired
    r_sub, r_head, r_train = _run_seed([job["task_index"], job["size"], job["seed"]])
    pool: Dataset = job["pool"]
    idx = r_sub.choice(len(pool), size=job["size"], replace=False)
    data = pool.subset(idx)
    model = replace_head(job["pretrained"], task.out_dim, r_head, task.kind)
    steps = cfg.epochs * math.ceil(job["size"] / cfg.opt.batch_size)
    opt = OptimizerConfig.from_dict({**cfg.opt.to_dict(), "total_steps": steps})
    try:
        trained, tlog = train(model, data, make_strategy(strat), opt, r_train)
    except (TrainingDiverged, ArithmeticError, ValueError) as exc:
        rec.aborted = True
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec
    rec.score, correct = evaluate(trained, job["test"], task.metric, cfg.correct_tol)
    rec.ood_score, _ = evaluate(trained, job["ood"], task.metric, cfg.correct_tol)
    rec.correct = "".join("1" if c else "0" for c in correct)
    rec.train_time = tlog.total_time
    rec.phases = dict(tlog.phases)
    rec.grad_passes = tlog.grad_passes
    rec.final_loss = tlog.steps[-1].loss
    return rec


def build_jobs(config: ExperimentConfig, pretrained: MlpModel) -> list[dict]:
    jobs = []
    for ti, task in enumerate(config.tasks):
        base = np.random.SeedSequence([1000 + ti, task.seed, task.head_seed])
        r_pool, r_test, r_ood = (np.random.Generator(np.random.PCG64(s)) for s in base.spawn(3))
        pool = generate_task(task, config.pool_size, r_pool)
        test = generate_task(task, config.eval_samples, r_test)
        ood = generate_task(task.shifted(config.ood_shift), config.eval_samples, r_ood)
        for size in config.sizes:
            for seed in config.seeds:
                for strat, label in zip(config.strategies, config.labels):
                    jobs.append({
                        "config": config, "task": task, "task_index": ti, "strategy": strat,
                        "label": label, "size": size, "seed": seed, "pool": pool,
                        "test": test, "ood": ood, "pretrained": pretrained,
                    })
    return jobs


def run_experiment(config: ExperimentConfig, threads: int = 1, pretrained: MlpModel | None = None) -> "AggregateReport":
    if pretrained is None:
        pretrained = pretrain_then_snapshot(config.model, config.pretrain)
    jobs = build_jobs(config, pretrained)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run_single, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        records = [run_single(j) for j in jobs]
    for r in records:
        if r.aborted:
            log.warning("run aborted: %s/%s/%d/seed %d: %s", r.strategy, r.task, r.size, r.seed, r.error)
    return aggregate(config, records)


# ---------------------------------------------------------------- aggregation


def _stats(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "min": None, "max": None, "n": 0, "single_seed": False}
    arr = np.array(values, dtype=float)
    # math.fsum keeps the mean independent of seed order
    mean = math.fsum(values) / len(values)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)) if len(values) > 1 else 0.0
    return {"mean": mean, "std": std, "min": float(arr.min()), "max": float(arr.max()),
            "n": len(values), "single_seed": len(values) == 1}


@dataclass
class AggregateReport:
    config: dict
    records: list[RunRecord]
    cells: list[dict]
    averages: dict[str, dict]
    vanilla: str | None

    def cell(self, strategy: str, task: str, size: int) -> dict:
        for c in self.cells:
            if (c["strategy"], c["task"], c["size"]) == (strategy, task, size):
                return c
        raise KeyError((strategy, task, size))

    @property
    def strategies(self) -> list[str]:
        return list(dict.fromkeys(c["strategy"] for c in self.cells))

    @property
    def columns(self) -> list[tuple[str, int]]:
        return list(dict.fromkeys((c["task"], c["size"]) for c in self.cells))

    def to_dict(self) -> dict:
        return {
            "format": "subnet_tune.report/1",
            "config": self.config,
            "vanilla": self.vanilla,
            "cells": self.cells,
            "averages": self.averages,
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateReport":
        return cls(d["config"], [RunRecord(**r) for r in d["records"]], d["cells"], d["averages"], d["vanilla"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "AggregateReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_tables(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, rows in (("scores", self.score_table("score")),
                           ("ood", self.score_table("ood")),
                           ("timing", self.timing_table()),
                           ("cases", self.case_table())):
            path = out / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerows(rows)
            written.append(path)
        return written

    def _metric(self, task: str) -> str:
        for t in self.config["tasks"]:
            if t["name"] == task:
                return t["metric"]
        return "accuracy"

    def _shared_metric(self) -> str | None:
        # the average is only scaled when every task reports on the same scale
        metrics = {t["metric"] for t in self.config["tasks"]}
        return "accuracy" if metrics <= {"accuracy", "mcc"} else None

    def score_table(self, which: str = "score") -> list[list[str]]:
        cols = self.columns
        header = ["method"] + [f"{t}@{s}" for t, s in cols] + ["avg"]
        rows = [header]
        for strat in self.strategies:
            row = [strat]
            for t, s in cols:
                st = self.cell(strat, t, s)[which]
                row.append(format_cell(st["mean"], st["std"], self._metric(t)))
            avg = self.averages[strat][which]
            row.append(format_cell(avg["mean"], avg["std"], self._shared_metric()))
            rows.append(row)
        return rows

    def timing_table(self) -> list[list[str]]:
        rows = [["method", "time_ratio", "mean_seconds"]]
        for strat in self.strategies:
            a = self.averages[strat]
            ratio = a.get("time_ratio")
            rows.append([strat, "-" if ratio is None else f"x{ratio:.2f}", f"{a['mean_time']:.4f}"])
        return rows

    def case_table(self) -> list[list[str]]:
        rows = [["method", "task", "size", "easy_fraction", "hard_fraction", "failed_run"]]
        for c in self.cells:
            cases = c.get("cases") or {}
            rows.append([c["strategy"], c["task"], c["size"],
                         _fmt(cases.get("easy_fraction")), _fmt(cases.get("hard_fraction")),
                         "" if c["failed_run"] is None else str(c["failed_run"]).lower()])
        return rows


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4f}"


def format_cell(mean, std, metric: str | None) -> str:
    if mean is None:
        return "-"
    scale = 100.0 if metric in ("accuracy", "mcc") else 1.0
    return f"{mean * scale:.2f} {std * scale:.2f}"


def aggregate(config: ExperimentConfig, records: list[RunRecord]) -> AggregateReport:
    labels = config.labels
    vanilla = next((lab for s, lab in zip(config.strategies, labels) if s.kind == "vanilla"), None)
    metric_of = {t.name: t.metric for t in config.tasks}
    cells = []
    for task in config.tasks:
        for size in config.sizes:
            for label in labels:
                runs = [r for r in records if (r.strategy, r.task, r.size) == (label, task.name, size)]
                ok = [r for r in runs if not r.aborted]
                cell = {
                    "strategy": label, "task": task.name, "size": size,
                    "metric": task.metric,
                    "runs": len(runs), "aborted": len(runs) - len(ok),
                    "score": _stats([r.score for r in ok]),
                    "ood": _stats([r.ood_score for r in ok]),
                    "mean_time": float(np.mean([r.train_time for r in ok])) if ok else None,
                    "cases": case_analysis([r.correct_vector() for r in ok]) if ok else None,
                    "correct_counts": (np.sum([r.correct_vector() for r in ok], axis=0).astype(int).tolist()
                                       if ok else []),
                }
                cells.append(cell)
    by_key = {(c["strategy"], c["task"], c["size"]): c for c in cells}
    for c in cells:
        c["failed_run"] = None
        c["time_ratio"] = None
        if vanilla is None:
            continue
        v = by_key[(vanilla, c["task"], c["size"])]
        if c["score"]["mean"] is not None and v["score"]["mean"] is not None:
            c["failed_run"] = failed_run_flag(c["score"]["mean"], v["score"]["mean"],
                                              HIGHER_IS_BETTER[metric_of[c["task"]]])
        if c["mean_time"] and v["mean_time"]:
            c["time_ratio"] = c["mean_time"] / v["mean_time"]

    averages = {}
    for label in labels:
        mine = [c for c in cells if c["strategy"] == label]
        entry = {}
        for which in ("score", "ood"):
            means = [c[which]["mean"] for c in mine if c[which]["mean"] is not None]
            stds = [c[which]["std"] for c in mine if c[which]["std"] is not None]
            entry[which] = {"mean": math.fsum(means) / len(means) if means else None,
                            "std": math.fsum(stds) / len(stds) if stds else None}
        times = [c["mean_time"] for c in mine if c["mean_time"] is not None]
        entry["mean_time"] = float(np.mean(times)) if times else 0.0
        averages[label] = entry
    for label, entry in averages.items():
        entry["failed_run"] = None
        entry["time_ratio"] = None
        if vanilla is None:
            continue
        v = averages[vanilla]
        directions = {HIGHER_IS_BETTER[m] for m in metric_of.values()}
        if len(directions) == 1 and entry["score"]["mean"] is not None and v["score"]["mean"] is not None:
            entry["failed_run"] = failed_run_flag(entry["score"]["mean"], v["score"]["mean"], directions.pop())
        if v["mean_time"]:
            entry["time_ratio"] = entry["mean_time"] / v["mean_time"]
    return AggregateReport(config.to_dict(), records, cells, averages, vanilla)
