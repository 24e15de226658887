"""Feed-forward network with hand-written reverse-mode gradients."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DimensionError, Matrix, NonFiniteError, ParamTensor, as_matrix, gaussian_init

ACTIVATIONS = ("tanh", "relu", "identity")
HEADS = ("classification", "regression")


def _act(kind: str, z: Matrix) -> Matrix:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(kind: str, z: Matrix, a: Matrix) -> Matrix:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class Layer:
    weight: ParamTensor  # (in_dim, out_dim); forward is x @ W + b
    bias: ParamTensor  # (1, out_dim)
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class Batch:
    inputs: Matrix
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs, "inputs")
        self.targets = np.asarray(self.targets).reshape(-1)
        if self.inputs.shape[0] < 1:
            raise DimensionError("batch must hold at least one example")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise DimensionError(
                f"{self.inputs.shape[0]} inputs but {self.targets.shape[0]} targets"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]


class MlpModel:
    """Stack of dense layers; the last layer is the task head.

    Hidden-layer weights are maskable. Biases and the head are always
    updated in full by every strategy.
    """

    def __init__(self, layers: list[Layer], head: str = "classification"):
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if not layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError(
                    f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (1, layer.out_dim):
                raise DimensionError(f"{layer.bias.name}: bias shape {layer.bias.shape}")
        names = [p.name for layer in layers for p in (layer.weight, layer.bias)]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        if head == "regression" and layers[-1].out_dim != 1:
            raise DimensionError("regression head must have a single output")
        self.layers = layers
        self.head = head

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def param_dict(self) -> dict[str, ParamTensor]:
        return {p.name: p for p in self.params()}

    def maskable(self) -> list[ParamTensor]:
        return [p for p in self.params() if p.maskable]

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)


def build_mlp(
    in_dim: int,
    hidden: list[int],
    out_dim: int,
    rng: np.random.Generator,
    activation: str = "tanh",
    head: str = "classification",
) -> MlpModel:
    """Randomly initialised MLP with 1/sqrt(fan_in) Gaussian weights."""
    dims = [in_dim, *hidden, out_dim]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        prefix = "head" if last else f"layer{i}"
        w = gaussian_init((d_in, d_out), 0.0, 1.0 / np.sqrt(d_in), rng)
        layers.append(
            Layer(
                ParamTensor(f"{prefix}.weight", w, maskable=not last),
                ParamTensor(f"{prefix}.bias", np.zeros((1, d_out))),
                "identity" if last else activation,
            )
        )
    return MlpModel(layers, head)


def replace_head(model: MlpModel, out_dim: int, rng: np.random.Generator, head: str | None = None) -> MlpModel:
    """Copy of ``model`` with a freshly initialised task head.

    The new head's pretrained snapshot is its own initial value.
    """
    body = copy.deepcopy(model.layers[:-1])
    d_in = model.layers[-1].in_dim
    w = gaussian_init((d_in, out_dim), 0.0, 1.0 / np.sqrt(d_in), rng)
    new = Layer(
        ParamTensor("head.weight", w),
        ParamTensor("head.bias", np.zeros((1, out_dim))),
        "identity",
    )
    new.weight.snapshot()
    new.bias.snapshot()
    return MlpModel([*body, new], head or model.head)


@dataclass
class Tape:
    """Activations kept from a forward pass for the backward pass."""

    inputs: list[Matrix]
    pre: list[Matrix]
    post: list[Matrix]
    weights: list[Matrix]
    dout: Matrix | None = None


def _weights_for(model: MlpModel, weights: dict[str, Matrix] | None) -> list[Matrix]:
    if not weights:
        return [layer.weight.value for layer in model.layers]
    return [weights.get(layer.weight.name, layer.weight.value) for layer in model.layers]


def _run(model: MlpModel, inputs: Matrix, weights: dict[str, Matrix] | None) -> Tape:
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != model.in_dim:
        raise DimensionError(f"input width {x.shape[1]} != model in_dim {model.in_dim}")
    ws = _weights_for(model, weights)
    tape = Tape([], [], [], ws)
    a = x
    for layer, w in zip(model.layers, ws):
        tape.inputs.append(a)
        z = a @ w + layer.bias.value
        a = _act(layer.activation, z)
        tape.pre.append(z)
        tape.post.append(a)
    return tape


def forward(model: MlpModel, inputs: Matrix, weights: dict[str, Matrix] | None = None) -> Matrix:
    """Logits (classification) or scalar outputs (regression), one row each.

    ``weights`` optionally overrides weight matrices by tensor name; the
    mixing strategies use it to run the network at mixed weights.
    """
    return _run(model, inputs, weights).post[-1]


def _loss(model: MlpModel, out: Matrix, targets: np.ndarray) -> tuple[float, Matrix]:
    n = out.shape[0]
    if model.head == "classification":
        labels = targets.astype(np.int64)
        if labels.min() < 0 or labels.max() >= out.shape[1]:
            raise DimensionError("class label out of range for the head")
        shifted = out - out.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        loss = -log_p[np.arange(n), labels].mean()
        dout = np.exp(log_p)
        dout[np.arange(n), labels] -= 1.0
        dout /= n
    else:
        resid = out[:, 0] - targets.astype(np.float64)
        loss = np.mean(resid * resid)
        dout = (2.0 / n) * resid.reshape(-1, 1)
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    return float(loss), dout


def loss_forward(model: MlpModel, batch: Batch, weights: dict[str, Matrix] | None = None) -> tuple[float, Tape]:
    tape = _run(model, batch.inputs, weights)
    loss, tape.dout = _loss(model, tape.post[-1], batch.targets)
    return loss, tape


def backward(model: MlpModel, tape: Tape) -> None:
    """Write d(loss)/d(weights used in the forward pass) into each ``grad``."""
    delta = tape.dout
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dz = delta * _act_grad(layer.activation, tape.pre[i], tape.post[i])
        layer.weight.grad = tape.inputs[i].T @ dz
        layer.bias.grad = dz.sum(axis=0, keepdims=True)
        if i:
            delta = dz @ tape.weights[i].T


def loss_and_grads(model: MlpModel, batch: Batch, weights: dict[str, Matrix] | None = None) -> float:
    """Mean cross-entropy or mean squared error; gradients land in ``grad``."""
    loss, tape = loss_forward(model, batch, weights)
    backward(model, tape)
    return loss


def loss_only(model: MlpModel, batch: Batch, weights: dict[str, Matrix] | None = None) -> float:
    return _loss(model, forward(model, batch.inputs, weights), batch.targets)[0]


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def failed(self) -> list[str]:
        return [name for name, e in self.errors.items() if e > self.tol]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def check_gradients(
    loss_fn,
    params: dict[str, Matrix],
    analytic: dict[str, Matrix],
    h: float = 1e-6,
    tol: float = 1e-4,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``loss_fn()``.

    ``params`` are perturbed in place and restored. The error of an entry is
    ``|a - n| / max(|a|, |n|, abs_floor / tol)``, so an entry passes when it
    is within ``tol`` relative or ``abs_floor`` absolute.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    denom_floor = abs_floor / tol
    errors = {}
    for name, arr in params.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), denom_floor)
        errors[name] = float(np.max(np.abs(a - numeric) / denom))
    return GradCheckReport(errors, tol)


def gradient_check(
    model: MlpModel,
    batch: Batch,
    h: float = 1e-6,
    tol: float = 1e-4,
    analytic: dict[str, Matrix] | None = None,
) -> GradCheckReport:
    """Finite-difference check of ``loss_and_grads`` on every parameter.

    Pass ``analytic`` to check a supplied gradient instead of recomputing it.
    """
    if analytic is None:
        loss_and_grads(model, batch)
        analytic = {p.name: p.grad.copy() for p in model.params()}
    params = {p.name: p.value for p in model.params()}
    return check_gradients(lambda: loss_only(model, batch), params, analytic, h, tol)


def clone_as_pretrained(model: MlpModel) -> MlpModel:
    """Copy of ``model`` whose pretrained snapshot is its current weights."""
    new = model.copy()
    for p in new.params():
        p.snapshot()
    return new


def model_to_dict(model: MlpModel) -> dict:
    return {
        "format": "subnet_tune.mlp/1",
        "head": model.head,
        "layers": [
            {
                "activation": layer.activation,
                "params": [
                    {
                        "name": p.name,
                        "shape": list(p.shape),
                        "maskable": p.maskable,
                        "value": p.value.reshape(-1).tolist(),
                        "pretrained": p.pretrained.reshape(-1).tolist(),
                    }
                    for p in (layer.weight, layer.bias)
                ],
            }
            for layer in model.layers
        ],
    }


def model_from_dict(data: dict) -> MlpModel:
    layers = []
    for spec in data["layers"]:
        tensors = []
        for p in spec["params"]:
            shape = tuple(p["shape"])
            t = ParamTensor(
                p["name"],
                np.array(p["value"], dtype=np.float64).reshape(shape),
                np.array(p["pretrained"], dtype=np.float64).reshape(shape),
                maskable=p["maskable"],
                _frozen=True,
            )
            tensors.append(t)
        layers.append(Layer(tensors[0], tensors[1], spec["activation"]))
    return MlpModel(layers, data["head"])


def save_model(model: MlpModel, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text()))
