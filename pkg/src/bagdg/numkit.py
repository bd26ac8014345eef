"""Small deterministic numerical core.

Dense float64 numpy arrays play the role of matrices. Networks are fixed
stacks of affine layers with hand-written backward passes; there is no
autodiff graph. Weights are stored as ``(out, in)`` so a batch ``X`` of
shape ``(n, in)`` maps to ``X @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, NumericalError

EPS_CLIP = 1e-7
ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid", "softmax")

_ONE_BELOW = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional stream path.

    Different stream tuples give independent generators, so each seed (or
    each sub-task of a seed) can draw without caring about call order
    elsewhere.
    """
    if seed < 0:
        raise ContractError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


# -- scalar transforms -------------------------------------------------------


def sigmoid(l):
    l = np.asarray(l, dtype=np.float64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(l))
    out = np.where(l >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = np.clip(out, _TINY, _ONE_BELOW)
    return out if out.ndim else float(out)


def log_sigmoid(l):
    """log(sigmoid(l)) without rounding sigmoid first."""
    l = np.asarray(l, dtype=np.float64)
    out = np.minimum(l, 0.0) - np.log1p(np.exp(-np.abs(l)))
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0.0)) or np.any(~(p < 1.0)):
        bad = p[~((p > 0.0) & (p < 1.0))].ravel()[:3]
        raise ContractError(f"logit needs p strictly inside (0, 1), got {bad.tolist()}")
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def clip_prob(p, eps: float = EPS_CLIP):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return p if p.ndim else float(p)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits (row-wise)."""
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        e = np.exp(-np.abs(z))
        return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if name == "softmax":
        return softmax(z, axis=1)
    raise ContractError(f"unknown activation {name!r}")


def _activation_backward(name: str, z: np.ndarray, a: np.ndarray, grad_a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return grad_a
    if name == "relu":
        return grad_a * (z > 0)
    if name == "tanh":
        return grad_a * (1.0 - a * a)
    if name == "sigmoid":
        return grad_a * a * (1.0 - a)
    if name == "softmax":
        return softmax_backward(a, grad_a)
    raise ContractError(f"unknown activation {name!r}")


# -- layers ------------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ContractError(f"layer weight {w.shape} and bias {b.shape} do not fit")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class Mlp:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ContractError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ContractError(f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}")
        if any(layer.activation == "softmax" for layer in layers[:-1]):
            raise ContractError("softmax is only allowed on the last layer")
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def activations(self) -> tuple[str, ...]:
        return tuple(layer.activation for layer in self.layers)

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    def with_named(self, arrays: Mapping[str, np.ndarray], prefix: str) -> "Mlp":
        layers = []
        for i, layer in enumerate(self.layers):
            w = arrays.get(f"{prefix}.{i}.weight", layer.weight)
            b = arrays.get(f"{prefix}.{i}.bias", layer.bias)
            if np.shape(w) != layer.weight.shape or np.shape(b) != layer.bias.shape:
                raise ContractError(f"replacement arrays for {prefix}.{i} have the wrong shape")
            layers.append(Layer(w, b, layer.activation))
        return Mlp(tuple(layers))

    def n_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)


def init_mlp(sizes, activations, rng: np.random.Generator, gain: float = 1.0) -> Mlp:
    """Gaussian init with variance gain/fan_in, zero biases."""
    sizes = list(sizes)
    if len(activations) != len(sizes) - 1:
        raise ContractError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(gain / fan_in)
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Mlp(tuple(layers))


def zeros_like_mlp(mlp: Mlp) -> Mlp:
    return Mlp(tuple(Layer(np.zeros_like(l.weight), np.zeros_like(l.bias), l.activation) for l in mlp.layers))


@dataclass(frozen=True)
class ForwardCache:
    inputs: tuple[np.ndarray, ...]
    pre: tuple[np.ndarray, ...]
    post: tuple[np.ndarray, ...]


def forward(mlp: Mlp, X: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != mlp.in_dim:
        raise ContractError(f"input of shape {X.shape} does not fit an Mlp with input width {mlp.in_dim}")
    inputs, pre, post = [], [], []
    a = X
    for layer in mlp.layers:
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        a = _activate(layer.activation, z)
        pre.append(z)
        post.append(a)
    return a, ForwardCache(tuple(inputs), tuple(pre), tuple(post))


def backward(mlp: Mlp, cache: ForwardCache, upstream: np.ndarray) -> tuple[Mlp, np.ndarray]:
    """Gradients for every layer (as an Mlp of arrays) and for the input batch."""
    if len(cache.pre) != len(mlp.layers):
        raise ContractError("cache does not come from this network")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ContractError(f"upstream gradient {g.shape} does not match output {cache.post[-1].shape}")
    grads = [None] * len(mlp.layers)
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        gz = _activation_backward(layer.activation, cache.pre[i], cache.post[i], g)
        grads[i] = Layer(gz.T @ cache.inputs[i], gz.sum(axis=0), layer.activation)
        g = gz @ layer.weight
    return Mlp(tuple(grads)), g


# -- optimizer ---------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


def optim_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam step on the entries named in ``grads``.

    Parameters without a gradient entry are passed through untouched (same
    array object), which is how frozen blocks stay bit-identical.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ContractError(f"gradient for {name!r} has shape {np.shape(g)}, parameter has {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    t = state.t + 1
    m = dict(state.m)
    v = dict(state.v)
    out = dict(params)
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        m_prev = m.get(name, np.zeros_like(g))
        v_prev = v.get(name, np.zeros_like(g))
        m[name] = state.beta1 * m_prev + (1.0 - state.beta1) * g
        v[name] = state.beta2 * v_prev + (1.0 - state.beta2) * g * g
        out[name] = params[name] - state.step_size * (m[name] / c1) / (np.sqrt(v[name] / c2) + state.eps)
    return out, AdamState(state.step_size, state.beta1, state.beta2, state.eps, t, m, v)


# -- gradient checking -------------------------------------------------------

LossFn = Callable[[Mapping[str, np.ndarray]], "tuple[float, Mapping[str, np.ndarray]]"]


def grad_check(loss_fn: LossFn, params: Mapping[str, np.ndarray], step: float = 1e-5) -> float:
    """Worst relative gap between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)``; a parameter missing from
    ``grads`` is treated as having zero analytic gradient.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericalError("loss is not finite at the check point")
    worst = 0.0
    for name in sorted(params):
        base = params[name]
        analytic = np.asarray(grads.get(name, np.zeros_like(base)), dtype=np.float64)
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss_fn(params)[0]
            flat[idx] = orig - step
            down = loss_fn(params)[0]
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"loss not finite while perturbing {name}[{idx}]")
            numeric = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
