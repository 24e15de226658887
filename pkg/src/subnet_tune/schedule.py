"""Cyclic two-stage step clock.

Each cycle is ``2 * us`` steps long: a Stage I of ``us`` steps in which the
whole network trains while importance is accumulated, then a Stage II of
``us`` steps in which only the selected subnetwork trains. Steps are
1-based; the mask for a Stage II is derived on its first step.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple


class Stage(str, enum.Enum):
    I = "I"
    II = "II"


class Event(NamedTuple):
    kind: str  # "cycle" | "stage" | "refresh"
    value: int | str | None = None

    def __str__(self) -> str:
        return self.kind if self.value is None else f"{self.kind}:{self.value}"


def stage_steps(ms: int, ur: float) -> int:
    """Steps per stage, ``ms * ur`` rounded half-up, at least 1."""
    return max(1, math.floor(ms * ur + 0.5))


@dataclass
class StageSchedule:
    ms: int
    ur: float
    us: int = field(init=False)
    n: int = field(init=False)
    t: int = 0

    def __post_init__(self):
        if self.ms < 1:
            raise ValueError("total steps must be at least 1")
        if not 0.0 < self.ur < 1.0:
            raise ValueError(f"update ratio must lie in (0, 1), got {self.ur}")
        self.us = stage_steps(self.ms, self.ur)
        self.n = self.ms // (2 * self.us)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.ms:
            raise ValueError(f"step {t} outside 1..{self.ms}")

    def stage_of(self, t: int) -> Stage:
        self._check(t)
        return Stage.I if math.ceil(t / self.us) % 2 == 1 else Stage.II

    def is_refresh(self, t: int) -> bool:
        self._check(t)
        return math.ceil(t / self.us) % 2 == 0 and (t - 1) % self.us == 0

    def cycle_of(self, t: int) -> int:
        self._check(t)
        return (t - 1) // (2 * self.us)

    @property
    def k(self) -> int:
        return self.cycle_of(self.t) if self.t else 0

    @property
    def stage(self) -> Stage:
        return self.stage_of(self.t) if self.t else Stage.I

    def events_at(self, t: int) -> list[Event]:
        self._check(t)
        events = []
        if (t - 1) % (2 * self.us) == 0:
            events.append(Event("cycle", self.cycle_of(t)))
        if (t - 1) % self.us == 0:
            events.append(Event("stage", self.stage_of(t).value))
        if self.is_refresh(t):
            events.append(Event("refresh"))
        return events

    def advance(self) -> list[Event]:
        """Move to the next step and return the events that fire on it."""
        if self.t >= self.ms:
            raise RuntimeError(f"schedule exhausted after {self.ms} steps")
        self.t += 1
        return self.events_at(self.t)
