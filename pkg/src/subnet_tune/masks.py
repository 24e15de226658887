"""Importance accumulators and ranked mask selection.

All accumulators and masks are dicts keyed by tensor name. Ranking is global
across every tensor in the dict: tensors are visited in ascending name order,
entries in row-major order, and ties at the cut keep the earlier entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DimensionError, Matrix

PROVENANCES = ("bernoulli", "ranked", "fixed")


@dataclass
class MaskSet:
    masks: dict[str, Matrix]
    provenance: str = "ranked"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown mask provenance {self.provenance!r}")

    def __getitem__(self, name: str) -> Matrix:
        return self.masks[name]

    def __iter__(self):
        return iter(self.masks)

    def items(self):
        return self.masks.items()

    def values(self):
        return self.masks.values()

    def ones(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    def size(self) -> int:
        return sum(m.size for m in self.masks.values())


def keep_count(n: int, p: float) -> int:
    """Number of entries kept when dropping fraction ``p`` of ``n``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop fraction must lie in [0, 1), got {p}")
    # rounding first stops (1 - 0.3) * 10 = 7.000000000000001 from ceiling to 8
    return min(n, math.ceil(round((1.0 - p) * n, 9)))


def zeros_like(tensors) -> dict[str, Matrix]:
    return {t.name: np.zeros_like(t.value) for t in tensors}


def reset(acc: dict[str, Matrix]) -> None:
    for arr in acc.values():
        arr.fill(0.0)


def ranked_mask(scores: dict[str, Matrix], p: float) -> MaskSet:
    """Keep the top ``ceil((1 - p) * N)`` entries of ``scores`` globally."""
    if not scores:
        raise ValueError("cannot rank an empty accumulator")
    names = sorted(scores)
    flat = np.concatenate([scores[n].reshape(-1) for n in names])
    if not np.all(np.isfinite(flat)):
        raise ValueError("scores must be finite")
    k = keep_count(flat.size, p)
    order = np.argsort(-flat, kind="stable")
    chosen = np.zeros(flat.size)
    chosen[order[:k]] = 1.0
    masks, start = {}, 0
    for n in names:
        size = scores[n].size
        masks[n] = chosen[start:start + size].reshape(scores[n].shape)
        start += size
    return MaskSet(masks, "ranked")


def ranked_mask_dense(gam: dict[str, Matrix], p: float) -> MaskSet:
    return ranked_mask(gam, p)


def mix_scores(gam: dict[str, Matrix], fam: dict[str, Matrix], us: int, boundary: int = 50) -> dict[str, Matrix]:
    """Mean accumulated importance per update, frequency-penalised when
    ``us >= boundary``. Entries never updated score 0."""
    if not gam or not fam:
        raise ValueError("cannot score empty accumulators")
    if set(gam) != set(fam):
        raise ValueError("GAM and FAM cover different tensors")
    out = {}
    for name, g in gam.items():
        f = fam[name]
        if g.shape != f.shape:
            raise DimensionError(f"{name}: GAM {g.shape} vs FAM {f.shape}")
        seen = f > 0
        score = np.zeros_like(g)
        score[seen] = g[seen] / f[seen]
        if us >= boundary:
            score[seen] *= np.exp(-f[seen] / us)
        out[name] = score
    return out


def ranked_mask_mix(gam, fam, us: int, p: float, boundary: int = 50) -> MaskSet:
    return ranked_mask(mix_scores(gam, fam, us, boundary), p)


def dump_state(path, **groups: dict[str, Matrix] | MaskSet) -> dict:
    """Write accumulators/masks as JSON keyed by group then tensor name."""
    out = {}
    for group, tensors in groups.items():
        if isinstance(tensors, MaskSet):
            out[group] = {
                "provenance": tensors.provenance,
                "tensors": {n: m.tolist() for n, m in tensors.items()},
            }
        else:
            out[group] = {"tensors": {n: m.tolist() for n, m in tensors.items()}}
    if path is not None:
        Path(path).write_text(json.dumps(out))
    return out


def load_state(path) -> dict:
    raw = json.loads(Path(path).read_text())
    out = {}
    for group, body in raw.items():
        tensors = {n: np.array(v, dtype=np.float64) for n, v in body["tensors"].items()}
        if "provenance" in body:
            out[group] = MaskSet(tensors, body["provenance"])
        else:
            out[group] = tensors
    return out
