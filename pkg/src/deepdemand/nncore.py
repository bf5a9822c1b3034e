"""Small dense-network engine: ReLU MLPs, reverse-mode gradients, Adam.

Matrices are plain float64 numpy arrays. Weight matrices are stored
``(fan_out, fan_in)`` so a layer computes ``x @ W.T + b`` on a row batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptFileError, NumericError, ShapeError, VersionMismatchError

FORMAT_VERSION = 1
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``; identical draws on every platform."""
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(stream) & (2**64 - 1),))
    return np.random.Generator(np.random.PCG64(seq))


@dataclass
class MlpParams:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "identity"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output_activation,
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_sizes),
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.output_activation,
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "output_activation": self.output_activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        sizes = [int(s) for s in d["layer_sizes"]]
        weights, biases = [], []
        for i, (w, b) in enumerate(zip(d["weights"], d["biases"])):
            shape = (sizes[i + 1], sizes[i])
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.size != shape[0] * shape[1] or b.shape != (shape[0],):
                raise CorruptFileError(f"layer {i}: stored arrays do not match layer_sizes")
            weights.append(w.reshape(shape))
            biases.append(b)
        if len(weights) != len(sizes) - 1:
            raise CorruptFileError("layer count does not match layer_sizes")
        return cls(sizes, weights, biases, d.get("output_activation", "identity"))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


@dataclass
class ForwardCache:
    layer_sizes: tuple
    inputs: list[np.ndarray] = field(default_factory=list)  # activation entering each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of each layer
    output: np.ndarray | None = None


def init_params(layer_sizes, output_activation: str = "identity", rng: np.random.Generator | None = None) -> MlpParams:
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 3:
        raise ConfigError(f"need input, >=1 hidden and output layer sizes, got {sizes}")
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    if output_activation not in OUTPUT_ACTIVATIONS:
        raise ConfigError(f"unknown output activation {output_activation!r}")
    rng = rng if rng is not None else rng_stream(0)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(sizes, weights, biases, output_activation)


def _sigmoid(z):
    # split branches keep exp() from overflowing
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"input shape {x.shape} does not match input width {params.layer_sizes[0]}")
    cache = ForwardCache(tuple(params.layer_sizes))
    a = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(a)
        z = a @ w.T + b
        cache.pre.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
        elif params.output_activation == "sigmoid":
            a = _sigmoid(z)
        else:
            a = z
    cache.output = a
    return a, cache


def mlp_backward(params: MlpParams, cache: ForwardCache, grad_output: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Gradients of a scalar loss given ``dL/d(output)``."""
    if cache.layer_sizes != tuple(params.layer_sizes) or len(cache.pre) != params.n_layers:
        raise ShapeError("forward cache does not belong to these parameters")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(f"grad_output shape {g.shape} != output shape {cache.output.shape}")
    grads = params.zeros_like()
    last = params.n_layers - 1
    if params.output_activation == "sigmoid":
        g = g * cache.output * (1.0 - cache.output)
    for i in range(last, -1, -1):
        if i < last:
            g = g * (cache.pre[i] > 0.0)  # ReLU subgradient is 0 at 0
        grads.weights[i] = g.T @ cache.inputs[i]
        grads.biases[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return grads, g


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, lr: float) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise ShapeError("parameter, gradient and optimizer state layouts differ")
    for idx, g in enumerate(g_arrays):
        if g.shape != p_arrays[idx].shape:
            raise ShapeError(f"gradient {idx} has shape {g.shape}, expected {p_arrays[idx].shape}")
        if not np.all(np.isfinite(g)):
            kind = "weights" if idx % 2 == 0 else "biases"
            raise NumericError(f"non-finite gradient in layer {idx // 2} {kind}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def dumps_params(params: MlpParams) -> str:
    return json.dumps({"format_version": FORMAT_VERSION, "mlp": params.to_dict()})


def loads_params(text: str) -> MlpParams:
    try:
        blob = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"unreadable parameter file: {exc}") from exc
    if blob.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"parameter format {blob.get('format_version')!r}, expected {FORMAT_VERSION}")
    return MlpParams.from_dict(blob["mlp"])
