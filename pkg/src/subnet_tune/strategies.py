"""Update strategies: which weights feed forward, which entries step.

Every strategy plugs into the training loop through the same hooks:

``start``          once, before the first step (CHILD-TUNING_D's pre-pass)
``begin_step``     advance the stage clock, refresh masks
``mixed_weights``  pre-forward: weights to run the network at, or None
``after_backward`` chain rule through mixing, accumulate importance, mask
                   the gradient; returns per-tensor update masks or None
``after_step``     post-step repair (unused by the built-in strategies)

Only tensors flagged ``maskable`` are ever mixed or masked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masks import MaskSet, ranked_mask, ranked_mask_dense, ranked_mask_mix, reset, zeros_like
from .net import Batch, MlpModel, backward, loss_and_grads, loss_forward
from .schedule import Event, Stage, StageSchedule
from .tensor import DimensionError, Matrix, bernoulli_mask

KINDS = ("vanilla", "mixout", "child_tuning_d", "dps_dense", "dps_mix")
DPS_KINDS = ("dps_dense", "dps_mix")


@dataclass
class StrategyConfig:
    kind: str = "vanilla"
    p: float = 0.0
    ur: float = 0.1
    penalty_boundary: int = 50
    accumulate: str = "squared"  # DPS Mix Stage I: "squared" or "raw"
    label: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"p must lie in [0, 1), got {self.p}")
        if self.kind in DPS_KINDS and not 0.0 < self.ur <= 0.5:
            raise ValueError(f"ur must lie in (0, 0.5], got {self.ur}")
        if self.accumulate not in ("squared", "raw"):
            raise ValueError("accumulate must be 'squared' or 'raw'")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "vanilla":
            return "vanilla"
        if self.kind in DPS_KINDS:
            return f"{self.kind}(p={self.p:g},ur={self.ur:g})"
        return f"{self.kind}(p={self.p:g})"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "p": self.p,
            "ur": self.ur,
            "penalty_boundary": self.penalty_boundary,
            "accumulate": self.accumulate,
            "label": self.name,
        }


def mix_weights(w: Matrix, anchor: Matrix, mask: Matrix, p: float) -> Matrix:
    """``(M*W + (1-M)*A - p*A) / (1-p)``: swap dropped entries for the anchor
    and rescale so the expectation over Bernoulli(1-p) masks is ``W``."""
    if p >= 1.0:
        raise ValueError("mixing needs p < 1")
    # same value for a 0/1 mask, arranged so that W == anchor returns the
    # anchor bit-for-bit and p == 0 returns W bit-for-bit
    kept = w if p == 0.0 else anchor + (w - anchor) / (1.0 - p)
    return np.where(mask > 0, kept, anchor)


def mixed_inputs(model: MlpModel, masks: dict[str, Matrix], anchors: dict[str, Matrix], p: float) -> dict[str, Matrix]:
    return {
        t.name: mix_weights(t.value, anchors[t.name], masks[t.name], p)
        for t in model.maskable()
    }


def chain_through_mix(model: MlpModel, masks: dict[str, Matrix], p: float) -> None:
    """Turn gradients w.r.t. mixed weights into gradients w.r.t. ``W``."""
    for t in model.maskable():
        t.grad = t.grad * (masks[t.name] / (1.0 - p))


def mixed_loss_and_grads(model: MlpModel, batch: Batch, masks, anchors, p: float) -> float:
    """Loss at the mixed weights; ``grad`` holds d(loss)/d(W)."""
    loss = loss_and_grads(model, batch, mixed_inputs(model, masks, anchors, p))
    chain_through_mix(model, masks, p)
    return loss


def _check_masks(model: MlpModel, masks) -> None:
    for t in model.maskable():
        if t.name not in masks:
            raise DimensionError(f"mask missing for {t.name}")
        if masks[t.name].shape != t.shape:
            raise DimensionError(f"{t.name}: mask {masks[t.name].shape} vs tensor {t.shape}")


def apply_vanilla(model: MlpModel, lr: float) -> None:
    """Plain SGD on every parameter from the gradients already in ``grad``."""
    for t in model.params():
        t.value = t.value - lr * t.grad


def apply_mixout_step(model: MlpModel, batch: Batch, masks, p: float, lr: float) -> float:
    """One SGD step at Mixout weights anchored on the pretrained snapshot."""
    _check_masks(model, masks)
    anchors = {t.name: t.pretrained for t in model.maskable()}
    loss = mixed_loss_and_grads(model, batch, masks, anchors, p)
    apply_vanilla(model, lr)
    return loss


def apply_childtuning_step(model: MlpModel, batch: Batch, fixed_mask, lr: float) -> float:
    """One SGD step with the gradient multiplied by a fixed mask."""
    _check_masks(model, fixed_mask)
    loss = loss_and_grads(model, batch)
    for t in model.maskable():
        t.grad = t.grad * fixed_mask[t.name]
    apply_vanilla(model, lr)
    return loss


def childtuning_prepass(model: MlpModel, batches: list[Batch], p: float) -> MaskSet:
    """Rank parameters by squared gradients summed over every batch at the
    current (pretrained) weights. Weights are not touched."""
    if not batches:
        raise ValueError("pre-pass needs a non-empty training set")
    acc = zeros_like(model.maskable())
    for batch in batches:
        loss_and_grads(model, batch)
        for t in model.maskable():
            acc[t.name] += t.grad * t.grad
    mask = ranked_mask(acc, p)
    return MaskSet(mask.masks, "fixed")


class Strategy:
    kind = "vanilla"

    def __init__(self, config: StrategyConfig | None = None):
        self.config = config or StrategyConfig(self.kind)
        self.p = self.config.p
        self.rng: np.random.Generator | None = None
        self.grad_passes = 0

    @property
    def stage(self) -> Stage | None:
        return None

    def start(self, model: MlpModel, batches: list[Batch], total_steps: int, rng: np.random.Generator) -> None:
        self.rng = rng

    def begin_step(self, model: MlpModel) -> list[Event]:
        return []

    def mixed_weights(self, model: MlpModel) -> dict[str, Matrix] | None:
        return None

    def after_backward(self, model: MlpModel) -> dict[str, Matrix] | None:
        return None

    def after_step(self, model: MlpModel) -> None:
        pass

    def sgd_step(self, model: MlpModel, batch: Batch, lr: float) -> float:
        """Run every hook around one plain SGD step (no clipping)."""
        self.begin_step(model)
        loss, tape = loss_forward(model, batch, self.mixed_weights(model))
        backward(model, tape)
        update = self.after_backward(model)
        for t in model.params():
            stepped = t.value - lr * t.grad
            if update is not None and t.name in update:
                stepped = np.where(update[t.name] > 0, stepped, t.value)
            t.value = stepped
        self.after_step(model)
        return loss


class Vanilla(Strategy):
    kind = "vanilla"


class Mixout(Strategy):
    """Fresh Bernoulli(1-p) mask every step, anchored on the pretrained weights."""

    kind = "mixout"

    def begin_step(self, model):
        self.masks = {t.name: bernoulli_mask(t.shape, 1.0 - self.p, self.rng) for t in model.maskable()}
        return []

    def mixed_weights(self, model):
        anchors = {t.name: t.pretrained for t in model.maskable()}
        return mixed_inputs(model, self.masks, anchors, self.p)

    def after_backward(self, model):
        chain_through_mix(model, self.masks, self.p)
        return None


class ChildTuningD(Strategy):
    """Fixed mask from a full-data squared-gradient pre-pass."""

    kind = "child_tuning_d"

    def start(self, model, batches, total_steps, rng):
        super().start(model, batches, total_steps, rng)
        self.mask = childtuning_prepass(model, batches, self.p)
        self.grad_passes += len(batches)

    def after_backward(self, model):
        for t in model.maskable():
            t.grad = t.grad * self.mask[t.name]
        return self.mask.masks


class DPSDense(Strategy):
    """Full updates while accumulating squared gradients (Stage I), then
    updates restricted to the top-ranked entries (Stage II)."""

    kind = "dps_dense"

    def start(self, model, batches, total_steps, rng):
        super().start(model, batches, total_steps, rng)
        self.schedule = StageSchedule(total_steps, self.config.ur)
        self.gam = zeros_like(model.maskable())
        if not self.gam:
            raise ValueError("DPS needs at least one maskable tensor")
        self.mask: MaskSet | None = None
        self.events: list[Event] = []

    @property
    def stage(self):
        return self.schedule.stage

    def _refresh(self, model) -> None:
        self.mask = ranked_mask_dense(self.gam, self.p)
        reset(self.gam)

    def begin_step(self, model):
        self.events = self.schedule.advance()
        for ev in self.events:
            if ev.kind == "cycle":
                self._new_cycle()
            elif ev.kind == "refresh":
                self._refresh(model)
        return self.events

    def _new_cycle(self) -> None:
        reset(self.gam)

    def after_backward(self, model):
        if self.schedule.stage is Stage.I:
            for t in model.maskable():
                self.gam[t.name] += t.grad * t.grad
            return None
        for t in model.maskable():
            t.grad = t.grad * self.mask[t.name]
        return self.mask.masks


class DPSMix(DPSDense):
    """Mixout-style Stage I that also counts how often each entry is kept;
    Stage II trains the frequency-penalised top entries, anchored on the
    weights at the start of the stage."""

    kind = "dps_mix"

    def start(self, model, batches, total_steps, rng):
        super().start(model, batches, total_steps, rng)
        self.fam = zeros_like(model.maskable())
        self.anchor: dict[str, Matrix] = {}
        self.step_masks: dict[str, Matrix] = {}

    def _new_cycle(self):
        reset(self.gam)
        reset(self.fam)

    def _refresh(self, model):
        gam = self.gam
        if self.config.accumulate == "raw":
            gam = {n: np.abs(g) for n, g in gam.items()}
        self.mask = ranked_mask_mix(gam, self.fam, self.schedule.us, self.p, self.config.penalty_boundary)
        self.anchor = {t.name: t.value.copy() for t in model.maskable()}
        reset(self.gam)
        reset(self.fam)

    def begin_step(self, model):
        events = super().begin_step(model)
        if self.schedule.stage is Stage.I:
            self.step_masks = {
                t.name: bernoulli_mask(t.shape, 1.0 - self.p, self.rng) for t in model.maskable()
            }
        return events

    def mixed_weights(self, model):
        if self.schedule.stage is Stage.I:
            anchors = {t.name: t.pretrained for t in model.maskable()}
            return mixed_inputs(model, self.step_masks, anchors, self.p)
        return mixed_inputs(model, self.mask.masks, self.anchor, self.p)

    def after_backward(self, model):
        if self.schedule.stage is Stage.I:
            chain_through_mix(model, self.step_masks, self.p)
            for t in model.maskable():
                m = self.step_masks[t.name]
                g = t.grad * m
                self.gam[t.name] += g * g if self.config.accumulate == "squared" else g
                self.fam[t.name] += m
            return None
        chain_through_mix(model, self.mask.masks, self.p)
        return self.mask.masks


_REGISTRY = {cls.kind: cls for cls in (Vanilla, Mixout, ChildTuningD, DPSDense, DPSMix)}


def make_strategy(config: StrategyConfig) -> Strategy:
    return _REGISTRY[config.kind](config)
