"""Small float64 MLPs with hand-written reverse mode, Adam, and diagonal Gaussian heads."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ValidationError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def sigmoid(x):
    # tanh form: overflow-free and faster than expit here
    out = np.multiply(x, 0.5)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


@dataclass
class Mlp:
    """Weights are stored (fan_in, fan_out) so a batch forward is ``x @ W + b``."""

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValidationError("layer sizes and parameter lists disagree")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ValidationError(f"layer {i} has shapes {W.shape}, {b.shape}")

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "Mlp":
        return Mlp(self.sizes, [np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def scaled(self, c: float) -> "Mlp":
        return Mlp(self.sizes, [c * W for W in self.weights], [c * b for b in self.biases])

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        sizes = d["sizes"]
        weights = [np.array(W, dtype=float).reshape(sizes[i], sizes[i + 1]) for i, W in enumerate(d["weights"])]
        return cls(sizes, weights, [np.array(b, dtype=float) for b in d["biases"]])


def mlp_init(sizes, seed) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.

    ``seed`` may be an int, a SeedSequence or a Generator.
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2:
        raise ValidationError("an MLP needs at least input and output sizes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, fan_out))
    return Mlp(sizes, weights, biases)


@dataclass
class Cache:
    inputs: list[np.ndarray]
    sizes: tuple[int, ...]


def mlp_forward(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Sigmoid hidden layers, linear output. ``x`` is (in,) or (batch, in)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.sizes[0]:
        raise ValidationError(f"input has size {x.shape[-1]}, network expects {params.sizes[0]}")
    inputs = []
    h = x
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ W + b
        if i < last:
            h = sigmoid(h)
    inputs.append(h)
    return h, Cache(inputs, params.sizes)


def mlp_backward(params: Mlp, cache: Cache, grad_out: np.ndarray) -> tuple[Mlp, np.ndarray]:
    """Parameter gradients and input gradient for a scalar loss with dL/d(out) = ``grad_out``."""
    if cache.sizes != params.sizes:
        raise ValidationError("cache was produced by a network with different sizes")
    g = np.asarray(grad_out, dtype=float)
    if g.shape != cache.inputs[-1].shape:
        raise ValidationError(f"output gradient shape {g.shape} != output shape {cache.inputs[-1].shape}")
    n = len(params.weights)
    dW, db = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            a = cache.inputs[i + 1]
            g = g * a * (1.0 - a)
        h = cache.inputs[i]
        if h.ndim == 1:
            dW[i] = np.outer(h, g)
            db[i] = g.copy()
        else:
            dW[i] = h.T @ g
            db[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return Mlp(params.sizes, dW, db), g


@dataclass
class AdamState:
    m: Mlp
    v: Mlp
    t: int = 0
    lr: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mlp, lr: float = 7e-4, **kw) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.lr, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        return {"m": self.m.to_dict(), "v": self.v.to_dict(), "t": self.t, "lr": self.lr,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(Mlp.from_dict(d["m"]), Mlp.from_dict(d["v"]), int(d["t"]), d["lr"], d["beta1"], d["beta2"], d["eps"])


def adam_step(params: Mlp, grads: Mlp, state: AdamState) -> tuple[Mlp, AdamState]:
    """Bias-corrected Adam; returns new objects and leaves the inputs untouched."""
    if grads.sizes != params.sizes:
        raise ValidationError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(a)) for a in grads.arrays()):
        raise NonFiniteError("non-finite gradient; update rejected")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    k = len(params.weights)

    def build(arrs):
        return Mlp(params.sizes, arrs[:k], arrs[k:])

    return build(new_p), AdamState(build(new_m), build(new_v), t, state.lr, b1, b2, state.eps)


@dataclass
class GaussianHead:
    mean: np.ndarray
    log_std: np.ndarray
    clamped: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_output(cls, out: np.ndarray) -> "GaussianHead":
        """Split an actor output of width 2d into mean and clamped log-std."""
        d = out.shape[-1] // 2
        raw = out[..., d:]
        ls = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return cls(out[..., :d], ls, (raw < LOG_STD_MIN) | (raw > LOG_STD_MAX))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def gaussian_log_prob(u, mean, log_std) -> np.ndarray:
    xi = (u - mean) / np.exp(log_std)
    return np.sum(-0.5 * xi * xi - log_std - HALF_LOG_2PI, axis=-1)


def gaussian_sample(head: GaussianHead, rng=None, noise=None):
    """Reparameterized sample u = mean + std * xi.

    Returns ``(u, log_prob, xi)``. Pass ``noise`` to fix xi explicitly.
    """
    xi = rng.standard_normal(head.mean.shape) if noise is None else np.asarray(noise, dtype=float)
    u = head.mean + head.std * xi
    logp = np.sum(-0.5 * xi * xi - head.log_std - HALF_LOG_2PI, axis=-1)
    return u, logp, xi


def write_json_atomic(path, payload: dict) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def save_checkpoint(path, params: Mlp, adam: AdamState | None = None) -> None:
    payload = params.to_dict()
    payload["adam"] = adam.to_dict() if adam is not None else None
    write_json_atomic(path, payload)


def load_checkpoint(path) -> tuple[Mlp, AdamState | None]:
    with open(path) as fh:
        d = json.load(fh)
    adam = AdamState.from_dict(d["adam"]) if d.get("adam") else None
    return Mlp.from_dict(d), adam
