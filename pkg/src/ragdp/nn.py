"""Fixed-topology dense networks with per-example reverse-mode gradients.

Parameters are flattened layer by layer, weights before bias, each weight
matrix in row-major ``(out, in)`` order. Every gradient vector in the package
uses this layout, so serialized gradients compare across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class DimensionError(ValueError):
    """Input width does not match what a layer expects."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite loss {value!r} for example {index}")
        self.index = index
        self.value = value


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class DenseNet:
    """Stack of dense layers evaluated in float64."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ValueError("a DenseNet needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise DimensionError(
                    f"layer {i} expects {layers[i].in_dim} inputs but layer "
                    f"{i - 1} produces {layers[i - 1].out_dim}"
                )
        self.layers = list(layers)

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        hidden_activation: str = "tanh",
        output_activation: str = "identity",
        rng: np.random.Generator | None = None,
    ) -> "DenseNet":
        """He/Glorot-scaled random init for ``sizes = [in, h1, ..., out]``."""
        rng = np.random.default_rng(0) if rng is None else rng
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            act = output_activation if last else hidden_activation
            gain = 2.0 if act == "relu" else 1.0
            w = rng.normal(0.0, np.sqrt(gain / n_in), size=(n_out, n_in))
            layers.append(Layer(w, np.zeros(n_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def get_params(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers]
        )

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.parameter_count,):
            raise DimensionError(
                f"expected {self.parameter_count} parameters, got {flat.shape}"
            )
        pos = 0
        for l in self.layers:
            n = l.weight.size
            l.weight = flat[pos : pos + n].reshape(l.weight.shape).copy()
            pos += n
            l.bias = flat[pos : pos + l.out_dim].copy()
            pos += l.out_dim

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def _check_input(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.input_dim:
            raise DimensionError(
                f"layer 0 expects input dim {self.input_dim}, got {x.shape[-1]}"
            )

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        for l in self.layers:
            x = _activate(x @ l.weight.T + l.bias, l.activation)
        return x

    __call__ = forward

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Batched forward keeping ``(input, preact, output)`` per layer."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._check_input(x)
        cache = []
        for l in self.layers:
            z = x @ l.weight.T + l.bias
            a = _activate(z, l.activation)
            cache.append((x, z, a))
            x = a
        return x, cache

    def backward(
        self, cache: list, grad_out: np.ndarray, per_example: bool = True
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backpropagate ``dL/doutput`` (one row per example).

        Returns ``(param_grads, input_grads)``. With ``per_example`` the
        parameter gradients have shape ``(n, parameter_count)``, otherwise
        they are summed over the batch into one vector.
        """
        delta = np.atleast_2d(grad_out)
        n = delta.shape[0]
        pieces = []
        for l, (a_in, z, a) in zip(reversed(self.layers), reversed(cache)):
            delta = delta * _activation_grad(z, a, l.activation)
            if per_example:
                gw = np.einsum("no,ni->noi", delta, a_in).reshape(n, -1)
                pieces.append(np.concatenate([gw, delta], axis=1))
            else:
                pieces.append(
                    np.concatenate([(delta.T @ a_in).ravel(), delta.sum(axis=0)])
                )
            delta = delta @ l.weight
        pieces.reverse()
        grads = np.concatenate(pieces, axis=1 if per_example else 0)
        return grads, delta


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


# A loss maps (outputs, targets), one row per example, to
# (per-example values, d value / d outputs).
Loss = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def half_squared_error(out, target):
    diff = out - target
    return 0.5 * np.sum(diff * diff, axis=-1), diff


def squared_error(out, target):
    diff = out - target
    return np.sum(diff * diff, axis=-1), 2.0 * diff


def per_example_gradients(
    net: DenseNet, loss: Loss, inputs: np.ndarray, targets: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Loss values ``(n,)`` and gradients ``(n, parameter_count)``."""
    out, cache = net.forward_cached(inputs)
    values, grad_out = loss(out, np.atleast_2d(targets))
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.argmax(bad))
        raise NonFiniteLossError(i, float(values[i]))
    grads, _ = net.backward(cache, grad_out, per_example=True)
    return values, grads


def per_example_gradient(
    net: DenseNet, loss: Loss, x: np.ndarray, target: np.ndarray
) -> tuple[float, np.ndarray]:
    values, grads = per_example_gradients(
        net, loss, np.atleast_2d(x), np.atleast_2d(target)
    )
    return float(values[0]), grads[0]


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.first_moment.shape != self.second_moment.shape:
            raise DimensionError("Adam moment vectors differ in length")

    @classmethod
    def fresh(cls, n_params: int, learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, learning_rate, **kw)


def adam_step(model, state: AdamState, grad: np.ndarray):
    """One bias-corrected Adam update, in place on ``model`` and ``state``.

    ``model`` is anything exposing ``get_params``/``set_params``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.first_moment.shape:
        raise DimensionError(
            f"gradient length {grad.shape} != parameter count "
            f"{state.first_moment.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient contains non-finite values")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    params = model.get_params() - state.learning_rate * m_hat / (
        np.sqrt(v_hat) + state.epsilon
    )
    model.set_params(params)
    state.first_moment, state.second_moment, state.step_count = m, v, t
    return model, state


def timestep_embedding(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(w_i t), ..., cos(w_i t), ...]``.

    Frequencies run geometrically from ``pi / T`` (half a turn over the
    horizon, which keeps the map injective on ``[0, T]``) up to roughly
    ``pi / T**(1/half)``. Accepts a scalar or an array of timesteps.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    half = dim // 2
    freqs = (np.pi / T) * float(T) ** (np.arange(half) / half)
    angles = np.multiply.outer(np.asarray(t, dtype=np.float64), freqs)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
