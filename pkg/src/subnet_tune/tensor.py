"""Dense float64 matrices, seeded randomness and the parameter-block type.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape and finiteness checks the rest of the package relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Matrix = np.ndarray


class DimensionError(ValueError):
    """Raised when matrix shapes do not line up."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation would produce NaN or Inf."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator (period 2**128) for ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn(rng_or_seed, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators.

    Children of the same seed are identical across calls, which lets one run
    keep separate streams for data order and mask sampling.
    """
    if isinstance(rng_or_seed, np.random.Generator):
        seq = rng_or_seed.bit_generator.seed_seq
    else:
        seq = np.random.SeedSequence(int(rng_or_seed))
    return [np.random.Generator(np.random.PCG64(s)) for s in seq.spawn(n)]


def as_matrix(data, name: str = "matrix") -> Matrix:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D data, got {m.ndim}-D")
    return m


def _check_finite(m: Matrix, what: str) -> Matrix:
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{what} produced non-finite values")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul needs 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape} do not chain")
    return _check_finite(a @ b, "matmul")


_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def elementwise(a: Matrix, b: Matrix, op: str) -> Matrix:
    if op not in _OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise DimensionError(f"elementwise {op}: {a.shape} vs {b.shape}")
    if op == "div" and np.any(b == 0):
        raise ZeroDivisionError("elementwise div: divisor has zero entries")
    return _check_finite(_OPS[op](a, b), f"elementwise {op}")


def bernoulli_mask(shape, keep_prob: float, rng: np.random.Generator) -> Matrix:
    """Binary matrix whose entries are independently 1 with ``keep_prob``."""
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in [0, 1], got {keep_prob}")
    # random() is in [0, 1): keep_prob=1 gives all ones, keep_prob=0 all zeros
    return (rng.random(shape) < keep_prob).astype(np.float64)


def gaussian_init(shape, mean: float, std: float, rng: np.random.Generator) -> Matrix:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return np.full(shape, float(mean))
    return rng.normal(mean, std, size=shape)


@dataclass
class ParamTensor:
    """A named parameter block.

    ``value`` is the live weight, ``pretrained`` the frozen snapshot the
    regularising strategies anchor to, ``grad`` the last computed gradient.
    """

    name: str
    value: Matrix
    pretrained: Matrix | None = None
    grad: Matrix | None = None
    maskable: bool = False
    _frozen: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.value = as_matrix(self.value, self.name).copy()
        if self.pretrained is None:
            self.pretrained = self.value.copy()
        else:
            self.pretrained = as_matrix(self.pretrained, self.name).copy()
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if not (self.value.shape == self.pretrained.shape == self.grad.shape):
            raise DimensionError(f"{self.name}: value/pretrained/grad shapes differ")
        if self._frozen:
            self.pretrained.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def snapshot(self) -> None:
        """Copy the current value into ``pretrained`` and make it read-only."""
        snap = self.value.copy()
        snap.setflags(write=False)
        self.pretrained = snap
        self._frozen = True

    def __deepcopy__(self, memo) -> "ParamTensor":
        return self.copy()

    def copy(self) -> "ParamTensor":
        return ParamTensor(
            self.name,
            self.value.copy(),
            self.pretrained.copy(),
            self.grad.copy(),
            self.maskable,
            self._frozen,
        )
