"""Dense feed-forward models with per-example backpropagation.

Everything privacy-related in this package operates on flat 64-bit parameter
vectors, so the model here is deliberately small: ReLU hidden layers, identity
output layer, softmax cross-entropy loss, and an explicit per-example backward
pass. Parameter vectors are plain 1-D float64 numpy arrays; the flattening
order is fixed (per layer: weights row-major, then bias) so checkpoints and
masks are portable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Batch
from .errors import ConfigurationError, FormatError, NumericError

CHECKPOINT_FORMAT_VERSION = 1

# A per-example gradient set: one flat parameter vector per batch example.
PerExampleGrads = list


@dataclass
class MlpModel:
    """Fully-connected ReLU network.

    weights[k] has shape (layer_dims[k+1], layer_dims[k]); biases[k] has
    length layer_dims[k+1]. Hidden layers use ReLU, the output layer is
    identity (logits feed a softmax cross-entropy loss).
    """

    layer_dims: tuple
    weights: list
    biases: list

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_dims=tuple(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def parameter_count(layer_dims) -> int:
    """Flat parameter count of the topology without building a model."""
    dims = tuple(int(d) for d in layer_dims)
    return sum((dims[k] + 1) * dims[k + 1] for k in range(len(dims) - 1))


def init_mlp(layer_dims, seed: int) -> MlpModel:
    """Build a model with Kaiming-uniform weights and zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ConfigurationError(f"layer_dims must be >= 2 positive sizes, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layer_dims=dims, weights=weights, biases=biases)


def flatten_params(model: MlpModel) -> np.ndarray:
    """Concatenate parameters: layers in order, weights row-major then bias."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten_params(layer_dims, flat: np.ndarray) -> MlpModel:
    """Inverse of flatten_params for the given topology."""
    dims = tuple(int(d) for d in layer_dims)
    flat = np.asarray(flat, dtype=np.float64)
    expected = sum((dims[k] + 1) * dims[k + 1] for k in range(len(dims) - 1))
    if flat.ndim != 1 or flat.size != expected:
        raise ConfigurationError(
            f"flat parameter vector has {flat.size} entries, topology {dims} needs {expected}"
        )
    weights, biases, offset = [], [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        n = fan_out * fan_in
        weights.append(flat[offset : offset + n].reshape(fan_out, fan_in).copy())
        offset += n
        biases.append(flat[offset : offset + fan_out].copy())
        offset += fan_out
    return MlpModel(layer_dims=dims, weights=weights, biases=biases)


def forward(model: MlpModel, batch: Batch) -> np.ndarray:
    """Logits for every example in the batch, shape (batch, output_dim)."""
    if batch.features.shape[1] != model.layer_dims[0]:
        raise ConfigurationError(
            f"feature width {batch.features.shape[1]} != input dim {model.layer_dims[0]}"
        )
    a = batch.features
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        a = z if k == last else np.maximum(z, 0.0)
    return a


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    # Max subtraction keeps exp() in range for large logits.
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mean_loss(model: MlpModel, batch: Batch) -> float:
    """Mean softmax cross-entropy over the batch."""
    logits = forward(model, batch)
    log_probs = _log_softmax(logits)
    losses = -log_probs[np.arange(len(batch.labels)), batch.labels]
    value = float(losses.mean())
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    return value


def accuracy(model: MlpModel, batch: Batch) -> float:
    """Fraction of examples whose argmax logit matches the label."""
    logits = forward(model, batch)
    return float((logits.argmax(axis=1) == batch.labels).mean())


def _backprop_single(model: MlpModel, x: np.ndarray, label: int):
    """Loss and flat gradient for one example.

    Returns (loss, grad) where grad is the exact gradient of this example's
    own cross-entropy loss with respect to the flattened parameters.
    """
    last = len(model.weights) - 1
    activations = [x]
    pre = []
    a = x
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = w @ a + b
        pre.append(z)
        a = z if k == last else np.maximum(z, 0.0)
        activations.append(a)

    log_probs = _log_softmax(activations[-1])
    loss = -log_probs[label]
    if not np.isfinite(loss):
        raise NumericError("non-finite per-example loss")

    delta = np.exp(log_probs)
    delta[label] -= 1.0
    grad_parts = [None] * (2 * len(model.weights))
    for k in range(last, -1, -1):
        grad_parts[2 * k] = np.outer(delta, activations[k]).ravel()
        grad_parts[2 * k + 1] = delta.copy()
        if k > 0:
            delta = model.weights[k].T @ delta
            delta = delta * (pre[k - 1] > 0.0)
    return float(loss), np.concatenate(grad_parts)


def loss_and_grad_per_example(model: MlpModel, batch: Batch):
    """Mean loss plus one flat gradient per example.

    The per-example backward pass is a plain loop: each returned gradient is
    the gradient of that example's own loss, so clipping can be applied per
    data item before anything is aggregated.
    """
    if batch.labels.min() < 0 or batch.labels.max() >= model.layer_dims[-1]:
        raise ConfigurationError("labels outside [0, num_classes)")
    losses = []
    grads = []
    for j in range(len(batch.labels)):
        loss, grad = _backprop_single(model, batch.features[j], int(batch.labels[j]))
        losses.append(loss)
        grads.append(grad)
    return float(np.mean(losses)), grads


def finite_difference_gradient(model: MlpModel, example: Batch, step: float) -> np.ndarray:
    """Central-difference gradient of a single example's loss.

    Independent of the backprop path: evaluates the loss at theta +/- step
    along every coordinate. O(parameter_count) forward passes, so only for
    small oracle models.
    """
    if step <= 0:
        raise ConfigurationError("step must be positive")
    if len(example.labels) != 1:
        raise ConfigurationError("finite differences expect a batch of one example")
    theta = flatten_params(model)
    grad = np.empty_like(theta)
    for k in range(theta.size):
        bumped = theta.copy()
        bumped[k] = theta[k] + step
        up = mean_loss(unflatten_params(model.layer_dims, bumped), example)
        bumped[k] = theta[k] - step
        down = mean_loss(unflatten_params(model.layer_dims, bumped), example)
        grad[k] = (up - down) / (2.0 * step)
    return grad


def apply_update(model: MlpModel, aggregate: np.ndarray, learning_rate: float, batch_total: int) -> MlpModel:
    """One gradient step: theta - lr * aggregate / batch_total.

    `aggregate` is the summed (clipped, masked) gradient over all examples in
    the round; `batch_total` is the total example count it was summed over.
    Returns a new model; the input is not modified.
    """
    aggregate = np.asarray(aggregate, dtype=np.float64)
    if aggregate.ndim != 1 or aggregate.size != model.parameter_count:
        raise ConfigurationError(
            f"aggregate dim {aggregate.size} != parameter count {model.parameter_count}"
        )
    if batch_total < 1:
        raise ConfigurationError("batch_total must be >= 1")
    theta = flatten_params(model)
    theta = theta - learning_rate * aggregate / float(batch_total)
    return unflatten_params(model.layer_dims, theta)


def checkpoint_dumps(model: MlpModel) -> str:
    """JSON checkpoint text: {layer_dims, flat_params, format_version}."""
    return json.dumps(
        {
            "layer_dims": list(model.layer_dims),
            "flat_params": flatten_params(model).tolist(),
            "format_version": CHECKPOINT_FORMAT_VERSION,
        }
    )


def checkpoint_loads(text: str) -> MlpModel:
    try:
        payload = json.loads(text)
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {payload.get('format_version')}")
        return unflatten_params(payload["layer_dims"], np.array(payload["flat_params"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc


def save_checkpoint(model: MlpModel, path) -> None:
    Path(path).write_text(checkpoint_dumps(model))


def load_checkpoint(path) -> MlpModel:
    try:
        return checkpoint_loads(Path(path).read_text())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
