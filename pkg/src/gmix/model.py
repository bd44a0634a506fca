"""Multilayer perceptron: architecture, initialization, forward pass, flat view.

Flat parameter ordering is layer-major; within a layer the weight matrix
(shape ``in x out``) comes first in row-major order, then the bias.  Every
vector that lives in weight space (perturbations, gradients, per-example
gradients) uses this ordering.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError, ValidationError

LOSSES = ("cross_entropy", "mse")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    output_dim: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValidationError(f"all layer widths must be >= 1: {self}")
        if self.output_dim < 2:
            raise ValidationError("output_dim (class count) must be >= 2")
        if self.activation != "relu":
            raise ValidationError("only the ReLU activation is supported")

    @property
    def layer_shapes(self) -> list:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def total_dim(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


@dataclass(frozen=True)
class ModelParams:
    spec: MlpSpec
    layers: tuple  # ((W, b), ...) with W of shape (in, out)

    @property
    def total_dim(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, tuple((w.copy(), b.copy()) for w, b in self.layers))


def init_model(spec: MlpSpec, seed) -> ModelParams:
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in spec.layer_shapes:
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(spec, tuple(layers))


def params_to_vector(params: ModelParams) -> np.ndarray:
    parts = []
    for w, b in params.layers:
        parts.append(w.reshape(-1))
        parts.append(b)
    return np.concatenate(parts)


def vector_to_params(vec, spec: MlpSpec) -> ModelParams:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size != spec.total_dim:
        raise ShapeError(f"parameter vector has length {vec.size}, expected {spec.total_dim}")
    layers = []
    pos = 0
    for fan_in, fan_out in spec.layer_shapes:
        w = vec[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy()
        pos += fan_in * fan_out
        b = vec[pos:pos + fan_out].copy()
        pos += fan_out
        layers.append((w, b))
    return ModelParams(spec, tuple(layers))


def add_scaled(params: ModelParams, vec, scale: float) -> ModelParams:
    """Parameters whose flat view is ``params + scale * vec``; ``params`` is untouched."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (params.total_dim,):
        raise ShapeError(f"vector has shape {vec.shape}, expected ({params.total_dim},)")
    return vector_to_params(params_to_vector(params) + scale * vec, params.spec)


class ForwardPass(NamedTuple):
    losses: T.Tensor      # (batch,)
    mean_loss: T.Tensor   # scalar
    logits: T.Tensor      # (batch, classes)
    leaves: list          # [W0, b0, W1, b1, ...]
    inputs: T.Tensor


def _check_batch(spec: MlpSpec, x: np.ndarray, y: np.ndarray):
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"features have shape {x.shape}, model expects (*, {spec.input_dim})")
    if y.shape != (x.shape[0], spec.output_dim):
        raise ShapeError(f"labels have shape {y.shape}, expected ({x.shape[0]}, {spec.output_dim})")


def _loss_fn(loss: str):
    if loss == "cross_entropy":
        return T.softmax_cross_entropy
    if loss == "mse":
        return T.squared_error
    raise ValidationError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def _run_layers(x: T.Tensor, layer_tensors: Sequence) -> T.Tensor:
    h = x
    last = len(layer_tensors) - 1
    for i, (w, b) in enumerate(layer_tensors):
        h = T.linear(h, w, b)
        if i < last:
            h = T.relu(h)
    return h


def forward_losses(params: ModelParams, batch, loss: str = "cross_entropy",
                   input_grad: bool = False, track: bool = True) -> ForwardPass:
    """Per-example losses, their mean and the logits for ``batch``.

    ``batch`` needs ``x`` (features) and ``y`` (soft label rows).  With
    ``track=True`` each weight is a fresh leaf requiring grad.
    """
    x = np.asarray(batch.x, dtype=np.float64)
    y = np.asarray(batch.y, dtype=np.float64)
    _check_batch(params.spec, x, y)
    leaves = []
    layer_tensors = []
    for w, b in params.layers:
        wt, bt = T.Tensor(w, requires_grad=track), T.Tensor(b, requires_grad=track)
        leaves += [wt, bt]
        layer_tensors.append((wt, bt))
    inputs = T.Tensor(x, requires_grad=input_grad)
    logits = _run_layers(inputs, layer_tensors)
    losses = _loss_fn(loss)(logits, T.Tensor(y))
    return ForwardPass(losses, T.mean(losses), logits, leaves, inputs)


def forward_flat(flat: T.Tensor, spec: MlpSpec, batch, loss: str = "cross_entropy") -> T.Tensor:
    """Mean loss with parameters taken from a flat tensor (for gradient checks)."""
    x = np.asarray(batch.x, dtype=np.float64)
    y = np.asarray(batch.y, dtype=np.float64)
    _check_batch(spec, x, y)
    layer_tensors = []
    pos = 0
    for fan_in, fan_out in spec.layer_shapes:
        w = T.segment(flat, pos, (fan_in, fan_out))
        pos += fan_in * fan_out
        b = T.segment(flat, pos, (fan_out,))
        pos += fan_out
        layer_tensors.append((w, b))
    logits = _run_layers(T.Tensor(x), layer_tensors)
    return T.mean(_loss_fn(loss)(logits, T.Tensor(y)))


def leaf_grad_vector(leaves: Sequence[T.Tensor]) -> np.ndarray:
    return np.concatenate([
        (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        for t in leaves
    ])


def loss_and_grad(params: ModelParams, batch, weights=None, loss: str = "cross_entropy"):
    """One forward and one backward pass.

    Differentiates the batch mean, or ``sum_i weights[i] * l_i`` when
    ``weights`` is given.  Returns ``(per_example_losses, grad_vector)``.
    """
    fp = forward_losses(params, batch, loss=loss)
    if weights is None:
        target = fp.mean_loss
    else:
        target = T.tensor_sum(T.mul(fp.losses, np.asarray(weights, dtype=np.float64)))
    T.backward(target)
    return fp.losses.data.copy(), leaf_grad_vector(fp.leaves)


def subset_mean_grad(fp: ForwardPass, rows) -> np.ndarray:
    """Gradient of the mean loss over ``rows`` of an existing tracked forward pass.

    One backward pass; the other rows receive an exactly zero upstream gradient.
    """
    T.backward(T.mean(T.take_rows(fp.losses, rows)))
    return leaf_grad_vector(fp.leaves)


def losses_only(params: ModelParams, batch, loss: str = "cross_entropy") -> np.ndarray:
    with T.no_grad():
        return forward_losses(params, batch, loss=loss, track=False).losses.data.copy()


def losses_and_factors(params: ModelParams, batch, loss: str = "cross_entropy"):
    """Per-example losses plus per-layer ``(input, upstream)`` factors.

    One backward pass on the summed loss, so row ``i`` of each upstream factor
    is the gradient of ``l_i`` alone.
    """
    fp = forward_losses(params, batch, loss=loss)
    T.backward(T.tensor_sum(fp.losses), collect_factors=True)
    factors = [fp.leaves[2 * i].factors for i in range(len(params.layers))]
    return fp.losses.data.copy(), factors


def factor_grads(factors) -> np.ndarray:
    """Materialize the ``(batch, d)`` matrix of per-example gradients."""
    cols = []
    for a, d in factors:
        cols.append((a[:, :, None] * d[:, None, :]).reshape(a.shape[0], -1))
        cols.append(d)
    return np.concatenate(cols, axis=1)


def factor_row_mean(factors, rows) -> np.ndarray:
    """Mean of the per-example gradients over ``rows``, without materializing them."""
    rows = np.asarray(rows, dtype=np.intp)
    n = rows.size
    parts = []
    for a, d in factors:
        ar, dr = a[rows], d[rows]
        parts.append((ar.T @ dr).reshape(-1) / n)
        parts.append(dr.sum(axis=0) / n)
    return np.concatenate(parts)


def factor_dots(factors, vec, spec: MlpSpec) -> np.ndarray:
    """``<g_i, vec>`` for every example ``i``, without materializing ``g_i``."""
    ref = vector_to_params(vec, spec)
    out = np.zeros(factors[0][0].shape[0])
    for (a, d), (vw, vb) in zip(factors, ref.layers):
        out += ((a @ vw) * d).sum(axis=1) + d @ vb
    return out


def per_example_grads(params: ModelParams, batch, loss: str = "cross_entropy"):
    losses, factors = losses_and_factors(params, batch, loss=loss)
    return losses, factor_grads(factors)


def predict_logits(params: ModelParams, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def predict(params: ModelParams, x) -> np.ndarray:
    # argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(predict_logits(params, x), axis=1)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   8 bytes  magic b"GMIXCKPT"
#   u32      format version
#   u32      header length n
#   n bytes  UTF-8 JSON header {input_dim, hidden_dims, output_dim, seed, epoch, total_dim}
#   8*d      float64 parameter vector in canonical order

CHECKPOINT_MAGIC = b"GMIXCKPT"
CHECKPOINT_VERSION = 1


class Checkpoint(NamedTuple):
    params: ModelParams
    seed: int
    epoch: int


def save_checkpoint(path, params: ModelParams, seed: int, epoch: int) -> None:
    spec = params.spec
    header = json.dumps({
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "output_dim": spec.output_dim,
        "seed": int(seed),
        "epoch": int(epoch),
        "total_dim": spec.total_dim,
    }, sort_keys=True).encode()
    body = params_to_vector(params).astype("<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(body)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    spec = MlpSpec(header["input_dim"], tuple(header["hidden_dims"]), header["output_dim"])
    body = raw[16 + hlen:]
    if len(body) != 8 * spec.total_dim:
        raise CheckpointError(f"{path}: expected {spec.total_dim} parameters, found {len(body) // 8}")
    vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return Checkpoint(vector_to_params(vec, spec), header["seed"], header["epoch"])
