"""Velocity fields: a small numpy MLP with hand-written backprop, plus closed forms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

ACTIVATIONS = ("silu", "tanh")
TIME_EMBEDDINGS = ("fourier", "linear")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return z / (1.0 + np.exp(-z))


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def _time_column(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        t = np.full(n, float(t))
    return t.reshape(n)


def _cond_block(cond, n: int, cond_dim: int) -> np.ndarray:
    if cond_dim == 0:
        return np.zeros((n, 0))
    if cond is None:
        raise ValueError(f"field expects a condition embedding of size {cond_dim}")
    c = np.asarray(cond, dtype=float)
    if c.ndim == 1:
        c = np.broadcast_to(c, (n, c.shape[0]))
    if c.shape != (n, cond_dim):
        raise ValueError(f"condition shape {c.shape} does not match ({n}, {cond_dim})")
    return c


@dataclass
class MLPField:
    """Fully connected velocity network v(x, t, c).

    Inputs are the state, a time embedding and the condition embedding,
    concatenated. All weights live in one flat ``params`` vector so that
    gradients, snapshots, and checkpoints are plain arrays.
    """

    dim: int = 2
    cond_dim: int = 0
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "silu"
    time_embedding: str = "fourier"
    params: np.ndarray = field(default=None, repr=False)

    condition_mode = "concat"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.time_embedding not in TIME_EMBEDDINGS:
            raise ValueError(f"unknown time embedding {self.time_embedding!r}")
        if self.params is None:
            self.params = np.zeros(self.n_params)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @classmethod
    def create(cls, dim=2, cond_dim=0, hidden=(64, 64), activation="silu",
               time_embedding="fourier", seed=0) -> "MLPField":
        f = cls(dim, cond_dim, tuple(hidden), activation, time_embedding)
        rng = np.random.default_rng(seed)
        chunks = []
        for fan_in, fan_out in f.layer_shapes:
            chunks.append(rng.standard_normal(fan_in * fan_out) / math.sqrt(fan_in))
            chunks.append(np.zeros(fan_out))
        f.params = np.concatenate(chunks)
        return f

    @property
    def n_time_features(self) -> int:
        return 3 if self.time_embedding == "fourier" else 1

    @property
    def n_inputs(self) -> int:
        return self.dim + self.n_time_features + self.cond_dim

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.n_inputs, *self.hidden, self.dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def architecture(self) -> dict:
        return {
            "kind": "mlp",
            "dim": self.dim,
            "cond_dim": self.cond_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "time_embedding": self.time_embedding,
            "condition_mode": self.condition_mode,
            "n_params": self.n_params,
        }

    def with_params(self, params) -> "MLPField":
        return replace(self, params=np.array(params, dtype=float))

    def copy(self) -> "MLPField":
        return self.with_params(self.params)

    def _layers(self, params) -> list[tuple[np.ndarray, np.ndarray]]:
        out, i = [], 0
        for fan_in, fan_out in self.layer_shapes:
            w = params[i:i + fan_in * fan_out].reshape(fan_in, fan_out)
            i += fan_in * fan_out
            out.append((w, params[i:i + fan_out]))
            i += fan_out
        return out

    def features(self, x, t, cond=None) -> np.ndarray:
        x = _as_batch(x)
        n = x.shape[0]
        tc = _time_column(t, n)
        if self.time_embedding == "fourier":
            tf = np.stack([tc, np.sin(2 * np.pi * tc), np.cos(2 * np.pi * tc)], axis=1)
        else:
            tf = tc[:, None]
        return np.concatenate([x, tf, _cond_block(cond, n, self.cond_dim)], axis=1)

    def forward(self, x, t, cond=None, params=None):
        """Evaluate the field and keep the activations needed by ``backward``."""
        p = self.params if params is None else params
        h = self.features(x, t, cond)
        cache = [h]
        layers = self._layers(p)
        for w, b in layers[:-1]:
            z = h @ w + b
            h = _act(self.activation, z)
            cache.append(z)
            cache.append(h)
        w, b = layers[-1]
        return h @ w + b, cache

    def backward(self, cache, grad_out, params=None) -> np.ndarray:
        """Vector-Jacobian product: gradient of sum(grad_out * v) w.r.t. params."""
        p = self.params if params is None else params
        layers = self._layers(p)
        grads = []
        g = np.asarray(grad_out, dtype=float)
        h = cache[-1]
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            grads.append((h.T @ g, g.sum(axis=0)))
            if li == 0:
                break
            g = g @ w.T
            z = cache[2 * li - 1]
            g = g * _act_grad(self.activation, z)
            h = cache[2 * li - 2]
        flat = []
        for gw, gb in reversed(grads):
            flat.append(gw.ravel())
            flat.append(gb)
        return np.concatenate(flat)

    def __call__(self, x, t, cond=None) -> np.ndarray:
        return self.forward(x, t, cond)[0]


@dataclass(frozen=True)
class AnalyticGaussianField:
    """Exact marginal velocity for x0 ~ N(0, I) and x1 ~ N(0, a^2 I) independent."""

    a: float
    dim: int = 2
    cond_dim = 0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("scale a must be positive")

    def gain(self, t):
        a2 = self.a ** 2
        return (t * a2 - (1.0 - t)) / ((1.0 - t) ** 2 + t ** 2 * a2)

    def marginal_variance(self, t):
        return (1.0 - t) ** 2 + t ** 2 * self.a ** 2

    def __call__(self, x, t, cond=None) -> np.ndarray:
        x = _as_batch(x)
        g = self.gain(_time_column(t, x.shape[0]))
        return g[:, None] * x


def analytic_gaussian_field(a: float, dim: int = 2) -> AnalyticGaussianField:
    return AnalyticGaussianField(float(a), dim)


@dataclass(frozen=True)
class ConstantField:
    velocity: tuple[float, ...]
    cond_dim = 0

    @property
    def dim(self) -> int:
        return len(self.velocity)

    def __call__(self, x, t, cond=None) -> np.ndarray:
        x = _as_batch(x)
        return np.broadcast_to(np.asarray(self.velocity, dtype=float), x.shape).copy()
