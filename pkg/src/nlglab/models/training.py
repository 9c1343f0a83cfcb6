"""Denoising / velocity-matching training with momentum SGD, and the AutoG quality pair."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator

from .._validation import check_batch, check_labels
from ..errors import TrainingFailure
from ..numerics import RngStream
from ..schedules import NoiseSchedule, ScheduleKind, perturb_batch, rectified_flow, vp_cosine
from .conditions import token_index, NULL_TOKEN
from .mlp import Parameterization, ScoreNet

DEFAULT_ARCH = (128, 128, 128)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    batch_size: int = 256
    train_steps: int = 4000
    uncond_dropout_prob: float = 0.1
    seed: int = 0
    momentum: float = 0.9
    grad_clip: float = 1.0

    def __post_init__(self):
        if not 0 <= self.uncond_dropout_prob < 1:
            raise ValueError("uncond_dropout_prob must be in [0, 1)")
        if self.train_steps < 0 or self.batch_size < 1:
            raise ValueError("train_steps must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class ModelPair:
    """The two networks an edit direction or AutoG compares; ``d0`` may alias ``d1``."""

    d1: object
    d0: object

    def __post_init__(self):
        if self.d1.dim != self.d0.dim:
            raise ValueError("d1 and d0 must share the data dimension")
        if self.d1.schedule.sigma_max != self.d0.schedule.sigma_max:
            raise ValueError("d1 and d0 must share sigma_max")

    @classmethod
    def single(cls, model) -> "ModelPair":
        return cls(model, model)

    @property
    def aliased(self) -> bool:
        return self.d1 is self.d0

    @property
    def dim(self) -> int:
        return self.d1.dim

    @property
    def schedule(self) -> NoiseSchedule:
        return self.d1.schedule


def _lr_at(config: TrainConfig, step: int) -> float:
    # cosine decay to 5% of the base rate
    frac = step / max(config.train_steps, 1)
    return config.learning_rate * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac)))


def _fit(net: ScoreNet, x0, labels, config: TrainConfig, target_fn):
    if config.train_steps == 0:
        return net
    rng = RngStream.derive(config.seed, "train")
    sched = net.schedule
    n, dim = x0.shape
    null_idx = token_index(NULL_TOKEN, net.num_classes)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.layers]
    for it in range(config.train_steps):
        rows = rng.integers(0, n, size=config.batch_size)
        steps = rng.integers(0, sched.num_steps, size=config.batch_size)
        eps = rng.normal((config.batch_size, dim))
        drop = rng.uniform(config.batch_size) < config.uncond_dropout_prob
        xb = x0[rows]
        idx = np.where(drop, null_idx, labels[rows])
        xt = perturb_batch(sched, xb, steps, eps)
        t = sched.times(steps)
        out, cache = net.forward_raw(xt, t, idx)
        resid = out - target_fn(xb, eps)
        loss = float(np.mean(resid ** 2))
        if not math.isfinite(loss):
            raise TrainingFailure("training loss diverged", step=it)
        grads = net.backward_raw(cache, 2.0 * resid / resid.size)
        gnorm = math.sqrt(sum(float(np.sum(gw ** 2) + np.sum(gb ** 2)) for gw, gb in grads))
        scale = min(1.0, config.grad_clip / gnorm) if gnorm > 0 else 1.0
        lr = _lr_at(config, it)
        new_layers = []
        for (w, b), (gw, gb), (vw, vb) in zip(net.layers, grads, velocity):
            vw *= config.momentum
            vw += scale * gw
            vb *= config.momentum
            vb += scale * gb
            new_layers.append((w - lr * vw, b - lr * vb))
        net.layers = new_layers
    if not all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in net.layers):
        raise TrainingFailure("non-finite parameters after training", step=config.train_steps)
    return net.round_to_float32()


def _prepare(dataset, num_classes):
    x0, labels = dataset
    x0, _ = check_batch(x0, name="dataset")
    if len(x0) == 0:
        raise ValueError("dataset is empty")
    labels = check_labels(labels, len(x0))
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    if labels.max() >= k:
        raise ValueError(f"label {labels.max()} outside vocabulary of {k} classes")
    return x0, labels, k


def train_diffusion(dataset, schedule: NoiseSchedule, arch=DEFAULT_ARCH, config: TrainConfig = TrainConfig(),
                    num_classes=None) -> ScoreNet:
    """Fit an ε-prediction network by minimizing E||ε - ε̂(x_t, t, y)||²."""
    x0, labels, k = _prepare(dataset, num_classes)
    net = ScoreNet.initialize(x0.shape[1], k, schedule, Parameterization.EPSILON, hidden=tuple(arch),
                              seed=config.seed)
    net = net.round_to_float32()
    return _fit(net, x0, labels, config, lambda xb, eps: eps)


def train_flow(dataset, arch=DEFAULT_ARCH, config: TrainConfig = TrainConfig(), schedule=None,
               num_classes=None) -> ScoreNet:
    """Fit a velocity network on the straight path x_t = (1-t) x0 + t ε, target ε - x0."""
    schedule = rectified_flow() if schedule is None else schedule
    x0, labels, k = _prepare(dataset, num_classes)
    net = ScoreNet.initialize(x0.shape[1], k, schedule, Parameterization.VELOCITY, hidden=tuple(arch),
                              seed=config.seed)
    net = net.round_to_float32()
    return _fit(net, x0, labels, config, lambda xb, eps: eps - xb)


def reduced_arch(arch, ratio: float):
    return tuple(max(8, int(round(w * ratio))) if ratio < 1 else w for w in arch)


def make_quality_pair(dataset, schedule: NoiseSchedule, config: TrainConfig = TrainConfig(),
                      arch=DEFAULT_ARCH, budget_ratio: float = 0.1, num_classes=None) -> ModelPair:
    """Train a full-budget ``d1`` and a reduced-budget ``d0`` (fewer steps, narrower layers)."""
    if not 0 <= budget_ratio <= 1:
        raise ValueError("budget_ratio must be in [0, 1]")
    def fit(cfg, a):
        if schedule.kind == ScheduleKind.RECTIFIED_FLOW:
            return train_flow(dataset, a, cfg, schedule=schedule, num_classes=num_classes)
        return train_diffusion(dataset, schedule, a, cfg, num_classes=num_classes)

    d1 = fit(config, arch)
    small = replace(config, train_steps=int(round(config.train_steps * budget_ratio)))
    d0 = fit(small, reduced_arch(arch, budget_ratio))
    return ModelPair(d1, d0)


def epsilon_loss(model, x0, labels, schedule: NoiseSchedule, rng: RngStream, conditional=True):
    """Per-sample ε (or velocity) matching loss on fresh noise/time draws."""
    from .conditions import ConditionToken
    x0 = np.asarray(x0, dtype=np.float64)
    n, dim = x0.shape
    steps = rng.integers(0, schedule.num_steps, size=n)
    eps = rng.normal((n, dim))
    xt = perturb_batch(schedule, x0, steps, eps)
    target = eps - x0 if schedule.kind == ScheduleKind.RECTIFIED_FLOW else eps
    tokens = [ConditionToken.cls(int(c)) for c in labels] if conditional else NULL_TOKEN
    losses = np.empty(n)
    for s in np.unique(steps):
        rows = np.flatnonzero(steps == s)
        ys = [tokens[r] for r in rows] if conditional else tokens
        pred = model.predict(xt[rows], int(s), ys)
        losses[rows] = np.mean((pred - target[rows]) ** 2, axis=1)
    return losses


class DenoiserEstimator(BaseEstimator):
    """scikit-learn style wrapper: ``fit(X, y)`` trains a :class:`ScoreNet`.

    ``kind`` is ``"diffusion"`` (VP, ε-prediction) or ``"flow"`` (rectified flow, velocity).
    """

    def __init__(self, kind="diffusion", hidden=DEFAULT_ARCH, learning_rate=0.02, batch_size=256,
                 train_steps=4000, uncond_dropout_prob=0.1, momentum=0.9, random_state=0,
                 num_schedule_steps=None):
        self.kind = kind
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.train_steps = train_steps
        self.uncond_dropout_prob = uncond_dropout_prob
        self.momentum = momentum
        self.random_state = random_state
        self.num_schedule_steps = num_schedule_steps

    def _config(self):
        return TrainConfig(self.learning_rate, self.batch_size, self.train_steps,
                           self.uncond_dropout_prob, self.random_state, self.momentum)

    def fit(self, X, y):
        if self.kind == "diffusion":
            sched = vp_cosine(self.num_schedule_steps or 100)
            self.net_ = train_diffusion((X, y), sched, self.hidden, self._config())
        elif self.kind == "flow":
            sched = rectified_flow(self.num_schedule_steps or 101)
            self.net_ = train_flow((X, y), self.hidden, self._config(), schedule=sched)
        else:
            raise ValueError(f"unknown kind {self.kind!r}")
        self.n_features_in_ = self.net_.dim
        self.classes_ = np.arange(self.net_.num_classes)
        return self

    def predict(self, X, step, y):
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "net_")
        return self.net_.predict(X, step, y)

    def score(self, X, y):
        """Negative mean held-out matching loss (higher is better)."""
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "net_")
        X, _ = check_batch(X, self.n_features_in_)
        rng = RngStream.derive(self.random_state, "score")
        return -float(np.mean(epsilon_loss(self.net_, X, check_labels(y, len(X)), self.net_.schedule, rng)))
