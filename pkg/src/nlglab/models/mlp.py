"""Dense MLP with a hand-written backward pass, and the conditional ScoreNet built on it."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..numerics import RngStream
from ..schedules import NoiseSchedule
from .conditions import token_indices, vocab_size


class Parameterization(enum.IntEnum):
    EPSILON = 0
    VELOCITY = 1


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def init_layers(widths, rng: RngStream):
    """Gaussian init with variance 1/fan_in. Weights are (out, in)."""
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.normal((fan_out, fan_in)) / np.sqrt(fan_in)
        layers.append((w, np.zeros(fan_out)))
    return layers


def mlp_forward(layers, x):
    """Forward pass; hidden layers use SiLU, the last layer is linear.

    Returns the output and the cache needed by :func:`mlp_backward`.
    """
    acts = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        if i < len(layers) - 1:
            pre.append(z)
            h = silu(z)
        else:
            h = z
        acts.append(h)
    return h, (acts, pre)


def mlp_backward(layers, cache, grad_out):
    """Gradients of a scalar loss given dL/d(output). Returns (layer grads, dL/dx)."""
    acts, pre = cache
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            g = g * silu_grad(pre[i])
        grads[i] = (g.T @ acts[i], g.sum(axis=0))
        g = g @ w
    return grads, g


def time_features(t, dim: int = 32) -> np.ndarray:
    """Sinusoidal features of normalized time ``t`` in [0, 1]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(200.0), half))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass(eq=False)
class ScoreNet:
    """Conditional denoiser over flat vectors.

    Input is ``x ++ time_features(t) ++ embed(y)``; the condition embedding is
    a linear map of the one-hot token (a learned table plus a shared bias).
    ``layers[0]`` is the embedding, the remaining layers form the MLP body.
    """

    layers: list
    parameterization: Parameterization
    schedule: NoiseSchedule
    num_classes: int
    time_dim: int = 32
    eval_counter: "EvalCounter | None" = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def cond_vocab_size(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def hidden_widths(self) -> list:
        return [w.shape[0] for w, _ in self.layers[1:-1]]

    @classmethod
    def initialize(cls, dim, num_classes, schedule, parameterization=Parameterization.EPSILON,
                   hidden=(128, 128, 128), embed_dim=16, time_dim=32, seed=0):
        rng = RngStream.derive(seed, "scorenet-init")
        vocab = vocab_size(num_classes)
        embed_w = rng.normal((embed_dim, vocab))
        layers = [(embed_w, np.zeros(embed_dim))]
        layers += init_layers([dim + time_dim + embed_dim, *hidden, dim], rng)
        return cls(layers, Parameterization(parameterization), schedule, int(num_classes), time_dim)

    def _inputs(self, x, t, idx):
        emb_w, emb_b = self.layers[0]
        emb = emb_w.T[idx] + emb_b
        feats = np.broadcast_to(time_features(t, self.time_dim), (len(x), self.time_dim)) \
            if np.ndim(t) == 0 else time_features(t, self.time_dim)
        return np.concatenate([x, feats, emb], axis=1)

    def forward_raw(self, x, t, idx):
        """Batched forward on normalized times ``t`` and vocab indices ``idx``."""
        inp = self._inputs(x, t, idx)
        out, cache = mlp_forward(self.layers[1:], inp)
        return out, (cache, idx)

    def backward_raw(self, cache, grad_out):
        mlp_cache, idx = cache
        body_grads, g_in = mlp_backward(self.layers[1:], mlp_cache, grad_out)
        g_emb = g_in[:, self.dim + self.time_dim:]
        gw = np.zeros_like(self.layers[0][0])
        np.add.at(gw.T, idx, g_emb)
        return [(gw, g_emb.sum(axis=0))] + body_grads

    def predict(self, x, step, y):
        """Model output (ε̂ or v̂) at schedule index ``step`` under condition(s) ``y``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[1] != self.dim:
            raise ValueError(f"input dim {xb.shape[1]} does not match model dim {self.dim}")
        t = self.schedule.time(step)
        idx = token_indices(y, len(xb), self.num_classes)
        out, _ = self.forward_raw(xb, t, idx)
        if self.eval_counter is not None:
            self.eval_counter.add(len(xb))
        return out[0] if single else out

    def copy(self) -> "ScoreNet":
        layers = [(w.copy(), b.copy()) for w, b in self.layers]
        return ScoreNet(layers, self.parameterization, self.schedule, self.num_classes, self.time_dim)

    def round_to_float32(self) -> "ScoreNet":
        """Round parameters to float32-representable values (checkpoint precision)."""
        self.layers = [(w.astype(np.float32).astype(np.float64), b.astype(np.float32).astype(np.float64))
                       for w, b in self.layers]
        return self


class EvalCounter:
    """Counts per-sample model evaluations."""

    def __init__(self):
        self.count = 0

    def add(self, n=1):
        self.count += int(n)

    def reset(self):
        self.count = 0
