"""Minimal dense-network stack: tanh MLPs with hand-written reverse-mode
gradients and a bias-corrected Adam optimizer.

Everything is double precision and value-semantic: operations return new
parameter containers instead of mutating their inputs, so callers own all
synchronization.  No autodiff graph, no GPU, no convolutions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_HEADER = "isb-lab-ckpt-v1"


@dataclass
class MlpParams:
    """Weights and biases of a dense network.

    ``weights[i]`` has shape (fan_in, fan_out); ``biases[i]`` has shape
    (fan_out,).  Hidden layers apply tanh, the output layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )


@dataclass
class MlpGrads:
    """Gradient container shaped exactly like the MlpParams it belongs to."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


def init_mlp(layer_sizes: list[int], rng: np.random.Generator) -> MlpParams:
    """Create an MLP with uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output dimension")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _check_params(params: MlpParams) -> None:
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w.shape[1] != b.shape[0]:
            raise ValueError(f"layer {i}: weight fan-out {w.shape[1]} != bias size {b.shape[0]}")
        if i + 1 < len(params.weights) and params.weights[i + 1].shape[0] != w.shape[1]:
            raise ValueError(
                f"layer {i + 1}: fan-in {params.weights[i + 1].shape[0]} "
                f"incompatible with previous fan-out {w.shape[1]}"
            )


def _forward_cached(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    """Return post-activation values per layer, activations[0] being the input."""
    acts = [x]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w + b
        acts.append(z if i == last else np.tanh(z))
    return acts


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"{what} has length {x.shape[0]}, expected {dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ValueError(f"{what} has width {x.shape[1]}, expected {dim}")
        return x, False
    raise ValueError(f"{what} must be a vector or a matrix, got ndim={x.ndim}")


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass.  Accepts a single input vector or a (batch, dim) matrix."""
    xb, squeeze = _as_batch(x, params.input_dim, "input")
    out = _forward_cached(params, xb)[-1]
    return out[0] if squeeze else out


def mlp_backward(
    params: MlpParams, x: np.ndarray, output_grad: np.ndarray
) -> tuple[MlpGrads, np.ndarray]:
    """Exact reverse-mode gradients of sum(output * output_grad).

    Returns gradients for every weight and bias plus the gradient with
    respect to the input.  For batched inputs the parameter gradients are
    summed over the batch and the input gradient keeps the batch shape.
    """
    xb, squeeze = _as_batch(x, params.input_dim, "input")
    gb, gsqueeze = _as_batch(output_grad, params.output_dim, "output_grad")
    if squeeze != gsqueeze or xb.shape[0] != gb.shape[0]:
        raise ValueError("input and output_grad batch shapes do not match")

    acts = _forward_cached(params, xb)
    w_grads: list[np.ndarray] = [np.empty(0)] * len(params.weights)
    b_grads: list[np.ndarray] = [np.empty(0)] * len(params.biases)
    delta = gb
    for i in range(len(params.weights) - 1, -1, -1):
        w_grads[i] = acts[i].T @ delta
        b_grads[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    input_grad = delta[0] if squeeze else delta
    return MlpGrads(w_grads, b_grads), input_grad


@dataclass
class AdamState:
    """Adam moments plus hyperparameters for one parameter set."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not (0 < self.epsilon < 1e-2):
            raise ValueError("epsilon must be a small positive number")


def adam_init(params: MlpParams, learning_rate: float = 3e-4, **kwargs) -> AdamState:
    zeros = lambda arrs: [np.zeros_like(a) for a in arrs]
    return AdamState(
        zeros(params.weights) + zeros(params.biases),
        zeros(params.weights) + zeros(params.biases),
        learning_rate=learning_rate,
        **kwargs,
    )


def _adam_arrays(
    values: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    names: list[str],
) -> tuple[list[np.ndarray], AdamState]:
    for g, name in zip(grads, names):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    t = state.step_count + 1
    b1, b2, eps, lr = state.beta1, state.beta2, state.epsilon, state.learning_rate
    new_vals, new_m, new_v = [], [], []
    for val, g, m, v in zip(values, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_vals.append(val - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_vals, AdamState(new_m, new_v, t, lr, b1, b2, eps)


def adam_step(
    params: MlpParams, grads: MlpGrads, state: AdamState
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns new params and advanced state."""
    n = len(params.weights)
    names = [f"layer {i} weights" for i in range(n)] + [f"layer {i} bias" for i in range(n)]
    new_vals, new_state = _adam_arrays(
        params.weights + params.biases, grads.weights + grads.biases, state, names
    )
    new_params = MlpParams(
        new_vals[:n], new_vals[n:], params.hidden_activation, params.output_activation
    )
    return new_params, new_state


@dataclass
class VectorAdam:
    """Adam for a single flat parameter array (e.g. a policy's log-std)."""

    state: AdamState

    @classmethod
    def create(cls, shape: tuple[int, ...], learning_rate: float = 3e-4) -> "VectorAdam":
        zeros = [np.zeros(shape)]
        return cls(AdamState(zeros, [np.zeros(shape)], learning_rate=learning_rate))

    def step(self, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        new_vals, self.state = _adam_arrays([value], [grad], self.state, ["vector"])
        return new_vals[0]


def save_checkpoint(path: str | Path, params: MlpParams) -> None:
    """Write parameters as JSON: header, layer shapes, then row-major values."""
    _check_params(params)
    payload = {
        "format": CHECKPOINT_HEADER,
        "layer_shapes": [list(w.shape) for w in params.weights],
        "weights": [w.ravel().tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "hidden_activation": params.hidden_activation,
        "output_activation": params.output_activation,
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> MlpParams:
    payload = json.loads(Path(path).read_text())
    header = payload.get("format")
    if header != CHECKPOINT_HEADER:
        raise ValueError(f"unsupported checkpoint format {header!r}")
    weights = [
        np.asarray(flat, dtype=float).reshape(shape)
        for flat, shape in zip(payload["weights"], payload["layer_shapes"])
    ]
    biases = [np.asarray(b, dtype=float) for b in payload["biases"]]
    params = MlpParams(
        weights, biases, payload["hidden_activation"], payload["output_activation"]
    )
    _check_params(params)
    for i, arrs in enumerate(zip(params.weights, params.biases)):
        for a in arrs:
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite parameter entries in layer {i}")
    return params
