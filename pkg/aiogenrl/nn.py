"""Define a small dense/convolutional network engine with exact gradients.

Forward passes never keep state on the layers. Callers that need gradients
pass a :class:`Tape`, which records what backward needs; the same network can
therefore be evaluated concurrently by several readers.
"""
from copy import deepcopy
from dataclasses import dataclass, field
from enum import Enum
import logging
from math import ceil, floor
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .const import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
from .errors import NoForwardRecorded, ShapeMismatch

_LOGGER = logging.getLogger(__name__)

LayerGrads = tuple[np.ndarray, dict[str, np.ndarray]]


class Activation(str, Enum):
    """Supported element-wise and normalising activations."""

    TANH = "tanh"
    RELU = "relu"
    SOFTMAX = "softmax"
    IDENTITY = "identity"


def softmax(z: np.ndarray) -> np.ndarray:
    """Return the softmax over the last axis."""
    shifted = z - z.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Return the log-softmax over the last axis."""
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _activate(activation: Activation, z: np.ndarray) -> np.ndarray:
    if activation == Activation.TANH:
        return np.tanh(z)
    if activation == Activation.RELU:
        return np.maximum(z, 0.0)
    if activation == Activation.SOFTMAX:
        return softmax(z)
    return z


def _activate_backward(
    activation: Activation, z: np.ndarray, y: np.ndarray, grad_y: np.ndarray
) -> np.ndarray:
    if activation == Activation.TANH:
        return grad_y * (1.0 - y * y)
    if activation == Activation.RELU:
        return grad_y * (z > 0.0)
    if activation == Activation.SOFTMAX:
        return y * (grad_y - (grad_y * y).sum(axis=-1, keepdims=True))
    return grad_y


def glorot_uniform(
    rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple
) -> np.ndarray:
    """Draw weights uniformly in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class GradientSet:
    """Gradients for every parameter tensor, plus the input when recorded."""

    params: dict[str, np.ndarray]
    inputs: Optional[np.ndarray] = None

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "GradientSet":
        """Return an all-zero gradient set congruent with ``params``."""
        return cls({name: np.zeros_like(value) for name, value in params.items()})

    def global_norm(self) -> float:
        """Return the L2 norm over all parameter gradients."""
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.params.values())))

    def scaled(self, factor: float) -> "GradientSet":
        """Return a copy multiplied by ``factor``."""
        inputs = None if self.inputs is None else self.inputs * factor
        return GradientSet({k: v * factor for k, v in self.params.items()}, inputs)

    def is_finite(self) -> bool:
        """Return whether every entry is finite."""
        return all(np.all(np.isfinite(g)) for g in self.params.values())


class Tape:
    """Records the caches of one forward pass for a later backward pass."""

    def __init__(self) -> None:
        """Initialize."""
        self.owner: Optional["Sequential"] = None
        self.caches: list[Any] = []
        self.logits: bool = False
        self.squeeze: bool = False

    @property
    def recorded(self) -> bool:
        """Return whether a forward pass has been recorded."""
        return self.owner is not None


class Layer:
    """Base layer."""

    input_ndim: int = 2

    def parameters(self) -> dict[str, np.ndarray]:
        """Return the live parameter arrays by local name."""
        return {}

    def forward(self, x: np.ndarray, activate: bool = True) -> tuple[np.ndarray, Any]:
        """Return the output and the cache backward needs."""
        raise NotImplementedError

    def backward(self, cache: Any, grad_y: np.ndarray) -> LayerGrads:
        """Return the input gradient and the parameter gradients."""
        raise NotImplementedError


class DenseLayer(Layer):
    """Fully connected layer ``y = act(x W^T + b)`` with ``W`` of shape (out, in)."""

    def __init__(self, W: np.ndarray, b: np.ndarray, activation: Activation) -> None:
        """Initialize."""
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ShapeMismatch(
                f"Dense weights {W.shape} and bias {b.shape} are incongruent"
            )
        self.W: np.ndarray = W
        self.b: np.ndarray = b
        self.activation: Activation = Activation(activation)

    @classmethod
    def create(
        cls, n_in: int, n_out: int, activation: Activation, rng: np.random.Generator
    ) -> "DenseLayer":
        """Create a Glorot-initialised layer with zero bias."""
        W = glorot_uniform(rng, n_in, n_out, (n_out, n_in))
        return cls(W, np.zeros(n_out), activation)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x: np.ndarray, activate: bool = True) -> tuple[np.ndarray, Any]:
        if x.ndim != 2 or x.shape[1] != self.W.shape[1]:
            raise ShapeMismatch(
                f"Dense layer expects (*, {self.W.shape[1]}), got {x.shape}"
            )
        z = x @ self.W.T + self.b
        y = _activate(self.activation, z) if activate else z
        return y, (x, z, y, activate)

    def backward(self, cache: Any, grad_y: np.ndarray) -> LayerGrads:
        x, z, y, activate = cache
        grad_z = grad_y
        if activate:
            grad_z = _activate_backward(self.activation, z, y, grad_y)
        return grad_z @ self.W, {"W": grad_z.T @ x, "b": grad_z.sum(axis=0)}


class ConvLayer(Layer):
    """2-D cross-correlation with zero padding that preserves size at stride 1."""

    input_ndim = 4

    def __init__(
        self,
        kernels: np.ndarray,
        bias: np.ndarray,
        activation: Activation,
        stride: int = 1,
    ) -> None:
        """Initialize."""
        kernels = np.asarray(kernels, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if kernels.ndim != 4 or bias.shape != (kernels.shape[0],):
            raise ShapeMismatch(
                f"Conv kernels {kernels.shape} and bias {bias.shape} are incongruent"
            )
        if kernels.shape[2] % 2 == 0 or kernels.shape[3] % 2 == 0:
            raise ShapeMismatch(
                f"Conv kernel sizes must be odd, got {kernels.shape[2:]}"
            )
        if stride < 1:
            raise ShapeMismatch(f"Conv stride must be >= 1, got {stride}")
        self.kernels: np.ndarray = kernels
        self.bias: np.ndarray = bias
        self.activation: Activation = Activation(activation)
        self.stride: int = stride

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        activation: Activation,
        rng: np.random.Generator,
        stride: int = 1,
    ) -> "ConvLayer":
        """Create a Glorot-initialised layer with zero bias."""
        area = kernel_size * kernel_size
        kernels = glorot_uniform(
            rng,
            in_channels * area,
            out_channels * area,
            (out_channels, in_channels, kernel_size, kernel_size),
        )
        return cls(kernels, np.zeros(out_channels), activation, stride)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"K": self.kernels, "bias": self.bias}

    def _windows(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        kh, kw = self.kernels.shape[2:]
        padded = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
        return padded, windows[:, :, :: self.stride, :: self.stride]

    def forward(self, x: np.ndarray, activate: bool = True) -> tuple[np.ndarray, Any]:
        if x.ndim != 4 or x.shape[1] != self.kernels.shape[1]:
            raise ShapeMismatch(
                f"Conv layer expects (*, {self.kernels.shape[1]}, H, W), got {x.shape}"
            )
        padded, windows = self._windows(x)
        z = np.einsum("bchwij,ocij->bohw", windows, self.kernels, optimize=True)
        z += self.bias[None, :, None, None]
        y = _activate(self.activation, z) if activate else z
        return y, (x.shape, padded.shape, windows, z, y, activate)

    def backward(self, cache: Any, grad_y: np.ndarray) -> LayerGrads:
        x_shape, padded_shape, windows, z, y, activate = cache
        grad_z = grad_y
        if activate:
            grad_z = _activate_backward(self.activation, z, y, grad_y)
        kh, kw = self.kernels.shape[2:]
        out_h, out_w = grad_z.shape[2:]
        s = self.stride

        grad_k = np.einsum("bchwij,bohw->ocij", windows, grad_z, optimize=True)
        grad_padded = np.zeros(padded_shape)
        span_h = s * (out_h - 1) + 1
        span_w = s * (out_w - 1) + 1
        for i in range(kh):
            for j in range(kw):
                kernel = self.kernels[:, :, i, j]
                grad_padded[:, :, i : i + span_h : s, j : j + span_w : s] += np.einsum(
                    "bohw,oc->bchw", grad_z, kernel, optimize=True
                )
        top, left = kh // 2, kw // 2
        grad_x = grad_padded[:, :, top : top + x_shape[2], left : left + x_shape[3]]
        return grad_x, {"K": grad_k, "bias": grad_z.sum(axis=(0, 2, 3))}


class AdaptiveMeanPool(Layer):
    """Average over a fixed grid of bins regardless of the input size."""

    input_ndim = 4

    def __init__(self, output_size: tuple[int, int]) -> None:
        """Initialize."""
        self.output_size: tuple[int, int] = tuple(output_size)

    @staticmethod
    def _bins(size: int, count: int) -> list[tuple[int, int]]:
        return [
            (floor(i * size / count), ceil((i + 1) * size / count))
            for i in range(count)
        ]

    def forward(self, x: np.ndarray, activate: bool = True) -> tuple[np.ndarray, Any]:
        if x.ndim != 4:
            raise ShapeMismatch(f"Pooling expects (B, C, H, W), got {x.shape}")
        rows = self._bins(x.shape[2], self.output_size[0])
        cols = self._bins(x.shape[3], self.output_size[1])
        out = np.empty(x.shape[:2] + self.output_size)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
        return out, (x.shape, rows, cols)

    def backward(self, cache: Any, grad_y: np.ndarray) -> LayerGrads:
        x_shape, rows, cols = cache
        grad_x = np.zeros(x_shape)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                share = grad_y[:, :, i, j] / area
                grad_x[:, :, r0:r1, c0:c1] += share[:, :, None, None]
        return grad_x, {}


class Flatten(Layer):
    """Flatten everything but the batch axis."""

    input_ndim = 4

    def forward(self, x: np.ndarray, activate: bool = True) -> tuple[np.ndarray, Any]:
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache: Any, grad_y: np.ndarray) -> LayerGrads:
        return grad_y.reshape(cache), {}


class Sequential:
    """A chain of layers with exact reverse-mode gradients."""

    def __init__(self, layers: Sequence[Layer]) -> None:
        """Initialize."""
        self.layers: list[Layer] = list(layers)

    def parameters(self) -> dict[str, np.ndarray]:
        """Return the live parameter arrays, named ``"<layer index>.<name>"``."""
        return {
            f"{index}.{name}": value
            for index, layer in enumerate(self.layers)
            for name, value in layer.parameters().items()
        }

    def load_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        """Overwrite the parameters in place from ``params``.

        :raises ShapeMismatch: If a name is missing or a shape differs
        """
        own = self.parameters()
        if set(own) != set(params):
            differ = sorted(set(own) ^ set(params))
            raise ShapeMismatch(f"Parameter names differ: {differ}")
        for name, value in own.items():
            shape = np.shape(params[name])
            if value.shape != shape:
                raise ShapeMismatch(
                    f"Parameter {name} expects {value.shape}, got {shape}"
                )
            value[...] = params[name]

    def copy(self) -> "Sequential":
        """Return an independent copy."""
        return deepcopy(self)

    def forward(
        self, x: np.ndarray, tape: Optional[Tape] = None, *, logits: bool = False
    ) -> np.ndarray:
        """Run the network.

        :param x: A single input or a batch of inputs
        :type x: ``numpy.ndarray``
        :param tape: Records the pass for :meth:`backward` when given
        :type tape: :class:`Tape`, optional
        :param logits: Skip the final layer's activation
        :type logits: ``bool``
        :raises ShapeMismatch: If the input does not fit the first layer
        :rtype: ``numpy.ndarray``
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == self.layers[0].input_ndim - 1
        if squeeze:
            x = x[None]
        caches = []
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            x, cache = layer.forward(x, activate=not (logits and index == last))
            caches.append(cache)
        if tape is not None:
            tape.owner = self
            tape.caches = caches
            tape.logits = logits
            tape.squeeze = squeeze
        return x[0] if squeeze else x

    def backward(self, tape: Tape, grad_output: np.ndarray) -> GradientSet:
        """Back-propagate ``grad_output`` through the pass recorded on ``tape``.

        :raises NoForwardRecorded: If ``tape`` holds no pass of this network
        :rtype: :class:`GradientSet`
        """
        if tape is None or not tape.recorded or tape.owner is not self:
            raise NoForwardRecorded(
                "No forward pass of this network is recorded on the tape"
            )
        grad = np.asarray(grad_output, dtype=np.float64)
        if tape.squeeze:
            grad = grad[None]
        params: dict[str, np.ndarray] = {}
        for index in range(len(self.layers) - 1, -1, -1):
            grad, local = self.layers[index].backward(tape.caches[index], grad)
            for name, value in local.items():
                params[f"{index}.{name}"] = value
        ordered = {name: params[name] for name in self.parameters()}
        return GradientSet(ordered, grad[0] if tape.squeeze else grad)


def mlp(
    sizes: Sequence[int], activations: Sequence[Activation], rng: np.random.Generator
) -> Sequential:
    """Build a dense network with the given layer sizes and activations."""
    if len(activations) != len(sizes) - 1:
        raise ShapeMismatch(
            f"{len(sizes) - 1} layers need as many activations, got {len(activations)}"
        )
    return Sequential(
        [
            DenseLayer.create(n_in, n_out, activation, rng)
            for n_in, n_out, activation in zip(sizes[:-1], sizes[1:], activations)
        ]
    )


def _check_congruent(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> None:
    if set(params) != set(grads):
        differ = sorted(set(params) ^ set(grads))
        raise ShapeMismatch(f"Gradient names differ from parameters: {differ}")
    for name, value in params.items():
        shape = grads[name].shape
        if value.shape != shape:
            raise ShapeMismatch(
                f"Gradient {name} has shape {shape}, expected {value.shape}"
            )


def clip_grad_norm(grads: GradientSet, max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``.

    :return: The norm before clipping
    :rtype: ``float``
    """
    norm = grads.global_norm()
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for value in grads.params.values():
            value *= factor
    return norm


@dataclass
class AdamState:
    """Adam moments and step counter."""

    learning_rate: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState
) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    :raises ShapeMismatch: If the gradients are not congruent with the parameters
    """
    _check_congruent(params, grads)
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, value in params.items():
        grad = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            v = state.v[name] = np.zeros_like(value)
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        denominator = np.sqrt(v / correction2) + state.eps
        value -= state.learning_rate * (m / correction1) / denominator


class Adam:
    """Adam optimizer over a fixed parameter dictionary."""

    def __init__(self, params: Mapping[str, np.ndarray], learning_rate: float) -> None:
        """Initialize."""
        self.params: Mapping[str, np.ndarray] = params
        self.state: AdamState = AdamState(learning_rate=learning_rate)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        """Apply one update."""
        adam_step(self.params, grads, self.state)


class SGD:
    """Plain gradient descent over a fixed parameter dictionary."""

    def __init__(self, params: Mapping[str, np.ndarray], learning_rate: float) -> None:
        """Initialize."""
        self.params: Mapping[str, np.ndarray] = params
        self.learning_rate: float = learning_rate

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        """Apply one update."""
        _check_congruent(self.params, grads)
        for name, value in self.params.items():
            value -= self.learning_rate * grads[name]


def numerical_gradient(
    f: Callable[[], float], array: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Return the central finite-difference gradient of ``f`` w.r.t. ``array``.

    ``array`` is perturbed in place and restored entry by entry.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + h
        upper = f()
        flat[index] = original - h
        lower = f()
        flat[index] = original
        out[index] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Return the max-norm error of ``analytic`` relative to the larger gradient."""
    scale = max(
        float(np.max(np.abs(analytic), initial=0.0)),
        float(np.max(np.abs(numeric), initial=0.0)),
        1e-12,
    )
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale
