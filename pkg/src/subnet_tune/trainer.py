"""Optimisation loop with SGD/AdamW, linear warmup-decay and global-norm clipping."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .net import Batch, MlpModel, backward, loss_forward
from .strategies import Strategy
from .tensor import Matrix

PHASES = ("forward", "backward", "strategy_overhead", "optimizer")


class TrainingDiverged(RuntimeError):
    """A step produced a non-finite gradient or weight."""


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.1
    weight_decay: float = 0.0  # decoupled; adamw only
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = float("inf")
    warmup_fraction: float = 0.0
    total_steps: int = 100
    schedule: str = "linear"  # or "constant"
    batch_size: int = 16

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adamw', got {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        if self.schedule not in ("linear", "constant"):
            raise ValueError("schedule must be 'linear' or 'constant'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        if not np.isfinite(self.clip_norm):
            d["clip_norm"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        if d.get("clip_norm") is None:
            d.pop("clip_norm", None)
        return cls(**d)


def lr_at(config: OptimizerConfig, t: int) -> float:
    """Learning rate for 1-based step ``t``: linear ramp, then linear decay to 0."""
    total = config.total_steps
    if not 1 <= t <= total:
        raise ValueError(f"step {t} outside 1..{total}")
    if config.schedule == "constant":
        return config.lr
    warmup = int(config.warmup_fraction * total)
    if t <= warmup:
        return config.lr * t / warmup
    return config.lr * (total - t) / (total - warmup)


def clip_grads(grads: list[Matrix], max_norm: float) -> tuple[list[Matrix], float]:
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class Optimizer:
    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.state: dict[str, tuple[Matrix, Matrix]] = {}
        self.steps = 0

    def step(self, params, lr: float, update_masks: dict[str, Matrix] | None = None) -> float:
        """Apply one update; entries whose update mask is 0 are left untouched,
        optimiser moments included. Returns the pre-clip gradient norm."""
        cfg = self.config
        grads, norm = clip_grads([p.grad for p in params], cfg.clip_norm)
        if not np.isfinite(norm):
            raise TrainingDiverged("non-finite gradient norm")
        self.steps += 1
        for p, g in zip(params, grads):
            mask = None if update_masks is None else update_masks.get(p.name)
            if cfg.kind == "sgd":
                new = p.value - lr * g
            else:
                new = self._adamw(p, g, lr, mask)
            if mask is not None:
                new = np.where(mask > 0, new, p.value)
            if not np.all(np.isfinite(new)):
                raise TrainingDiverged(f"non-finite update in {p.name}")
            p.value = new
        return norm

    def _adamw(self, p, g, lr, mask) -> Matrix:
        cfg = self.config
        b1, b2 = cfg.betas
        m, v = self.state.get(p.name, (np.zeros_like(g), np.zeros_like(g)))
        m_new = b1 * m + (1 - b1) * g
        v_new = b2 * v + (1 - b2) * g * g
        if mask is not None:
            m_new = np.where(mask > 0, m_new, m)
            v_new = np.where(mask > 0, v_new, v)
        self.state[p.name] = (m_new, v_new)
        m_hat = m_new / (1 - b1 ** self.steps)
        v_hat = v_new / (1 - b2 ** self.steps)
        decayed = p.value - lr * cfg.weight_decay * p.value
        return decayed - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def optimizer_step(params, config: OptimizerConfig, state: Optimizer | None = None, lr: float | None = None,
                   update_masks=None) -> Optimizer:
    """Functional wrapper: one step of ``config``'s optimiser on ``params``."""
    state = state or Optimizer(config)
    state.step(params, config.lr if lr is None else lr, update_masks)
    return state


@dataclass
class StepRecord:
    t: int
    stage: str
    loss: float
    grad_norm: float
    refresh: bool
    lr: float


@dataclass
class TrainLog:
    strategy: str
    steps: list[StepRecord] = field(default_factory=list)
    phases: dict[str, float] = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))
    total_time: float = 0.0
    grad_passes: int = 0

    @property
    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "steps": len(self.steps),
            "first_loss": self.steps[0].loss if self.steps else None,
            "final_loss": self.steps[-1].loss if self.steps else None,
            "refreshes": sum(s.refresh for s in self.steps),
            "grad_passes": self.grad_passes,
            "total_time": self.total_time,
            "phases": dict(self.phases),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "stage", "loss", "grad_norm", "refresh", "lr"])
            for s in self.steps:
                w.writerow([s.t, s.stage, repr(s.loss), repr(s.grad_norm), int(s.refresh), repr(s.lr)])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


@dataclass
class Dataset:
    inputs: Matrix
    targets: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.inputs, self.targets)
        return Batch(self.inputs[idx], self.targets[idx])

    def batches(self, size: int) -> list[Batch]:
        """Consecutive batches in stored order, last partial batch kept."""
        return [self.batch(slice(i, i + size)) for i in range(0, len(self), size)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx])


def iterate_batches(data: Dataset, batch_size: int, rng: np.random.Generator):
    """Endless stream of batches; reshuffled once per epoch."""
    while True:
        order = rng.permutation(len(data))
        for i in range(0, len(data), batch_size):
            yield data.batch(order[i:i + batch_size])


def train(model: MlpModel, data: Dataset, strategy: Strategy, config: OptimizerConfig,
          rng: np.random.Generator, on_step=None) -> tuple[MlpModel, TrainLog]:
    """Run ``config.total_steps`` steps of ``strategy`` on a copy of ``model``.

    ``rng`` drives data order only; mask sampling draws from a child stream
    so strategies that sample masks see the same batches as those that don't.
    ``on_step(t, model)`` is called after each update.
    """
    model = model.copy()
    data_rng = rng
    mask_rng = np.random.Generator(np.random.PCG64(rng.integers(2**63)))
    opt = Optimizer(config)
    log = TrainLog(strategy.config.name)
    phases = log.phases
    clock = time.perf_counter

    t0 = clock()
    strategy.start(model, data.batches(config.batch_size), config.total_steps, mask_rng)
    mark = clock()
    phases["strategy_overhead"] += mark - t0

    stream = iterate_batches(data, config.batch_size, data_rng)
    callback_time = 0.0
    for t in range(1, config.total_steps + 1):
        events = strategy.begin_step(model)
        mixed = strategy.mixed_weights(model)
        now = clock()
        phases["strategy_overhead"] += now - mark
        mark = now

        loss, tape = loss_forward(model, next(stream), mixed)
        now = clock()
        phases["forward"] += now - mark
        mark = now

        backward(model, tape)
        now = clock()
        phases["backward"] += now - mark
        mark = now

        update = strategy.after_backward(model)
        now = clock()
        phases["strategy_overhead"] += now - mark
        mark = now

        lr = lr_at(config, t)
        norm = opt.step(model.params(), lr, update)
        strategy.after_step(model)
        stage = strategy.stage
        log.steps.append(StepRecord(
            t, stage.value if stage else "-", loss, norm,
            any(e.kind == "refresh" for e in events), lr,
        ))
        now = clock()
        phases["optimizer"] += now - mark
        mark = now
        if on_step is not None:
            on_step(t, model)
            mark = clock()
            callback_time += mark - now

    log.total_time = clock() - t0 - callback_time
    log.grad_passes = config.total_steps + strategy.grad_passes
    return model, log
