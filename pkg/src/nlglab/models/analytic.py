"""Exact isotropic Gaussian-mixture model: closed-form scores, posteriors and model outputs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..schedules import NoiseSchedule, ScheduleKind
from .conditions import CLASS, ConditionToken, as_tokens
from .mlp import EvalCounter, Parameterization


@dataclass(eq=False)
class AnalyticMixtureModel:
    """Mixture of isotropic Gaussians with exact forward-process marginals.

    Component ``k`` is N(means[k], variances[k] * I) with weight ``weights[k]``
    and label ``labels[k]``. ``base_variance`` fills ``variances`` when those are
    not given; a zero variance gives a Dirac component. Model outputs use the
    parameterization a trained network on the same schedule would have.
    """

    means: np.ndarray
    weights: np.ndarray
    base_variance: float
    schedule: NoiseSchedule
    labels: list = None
    variances: np.ndarray = None
    eval_counter: EvalCounter | None = field(default=None, repr=False)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = len(self.means)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (k,):
            raise ValueError("one weight per component required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.variances is None:
            if self.base_variance < 0:
                raise ValueError("base_variance must be >= 0")
            self.variances = np.full(k, float(self.base_variance))
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.labels is None:
            self.labels = [ConditionToken.cls(i) for i in range(k)]
        self.labels = [ConditionToken.parse(t) for t in self.labels]
        if len(self.labels) != k:
            raise ValueError("one label per component required")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def parameterization(self) -> Parameterization:
        if self.schedule.kind == ScheduleKind.RECTIFIED_FLOW:
            return Parameterization.VELOCITY
        return Parameterization.EPSILON

    @property
    def num_classes(self) -> int:
        ids = [t.value for t in self.labels if t.tag == CLASS]
        return max(ids) + 1 if ids else 0

    # -- marginals -----------------------------------------------------------
    def _component_moments(self, step):
        """Per-component mean scale and variance of x at ``step`` (None = clean data)."""
        if step is None:
            return 1.0, self.variances.copy()
        s = self.schedule
        step = s.check_step(step)
        v = s.values[step]
        if s.kind == ScheduleKind.VARIANCE_PRESERVING:
            return np.sqrt(v), v * self.variances + (1.0 - v)
        if s.kind == ScheduleKind.VARIANCE_EXPLODING:
            return 1.0, self.variances + v ** 2
        return 1.0 - v, (1.0 - v) ** 2 * self.variances + v ** 2

    def _log_joint(self, x, step):
        """log(w_k N_k(x)) for every row of x, shape (B, K)."""
        scale, var = self._component_moments(step)
        if np.any(var <= 0):
            raise ValueError("marginal variance is zero at this step")
        diff = x[:, None, :] - scale * self.means[None, :, :]
        sq = np.einsum("bkd,bkd->bk", diff, diff)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw[None, :] - 0.5 * sq / var[None, :] - 0.5 * self.dim * np.log(2 * np.pi * var)[None, :]

    def _mask(self, token: ConditionToken) -> np.ndarray:
        if token.is_null:
            return np.ones(len(self.labels), dtype=bool)
        if token.tag == CLASS and token.value >= self.num_classes:
            raise ValueError(f"unknown class id {token.value}")
        mask = np.array([lab == token for lab in self.labels])
        if not mask.any():
            raise ValueError(f"no component carries label {token}")
        return mask

    def _batched(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[1] != self.dim:
            raise ValueError(f"input dim {xb.shape[1]} does not match model dim {self.dim}")
        return xb, single

    def _responsibilities(self, xb, step, tokens):
        lj = self._log_joint(xb, step)
        masks = np.stack([self._mask(t) for t in tokens])
        lj = np.where(masks, lj, -np.inf)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def log_density(self, x, step=None, y=None):
        xb, single = self._batched(x)
        tokens = as_tokens(y if y is not None else ConditionToken.null(), len(xb))
        lj = self._log_joint(xb, step)
        masks = np.stack([self._mask(t) for t in tokens])
        wsum = np.array([self.weights[m].sum() for m in masks])
        out = logsumexp(np.where(masks, lj, -np.inf), axis=1) - np.log(wsum)
        return out[0] if single else out

    def score(self, x, step=None, y=None):
        """Exact ∇_x log p_step(x | y); ``y=None`` or null is unconditional."""
        xb, single = self._batched(x)
        tokens = as_tokens(y if y is not None else ConditionToken.null(), len(xb))
        scale, var = self._component_moments(step)
        r = self._responsibilities(xb, step, tokens)
        comp = -(xb[:, None, :] - scale * self.means[None]) / var[None, :, None]
        out = np.einsum("bk,bkd->bd", r, comp)
        return out[0] if single else out

    def posterior(self, x, step, y):
        """Exact p(y | x) at ``step``; ``step=None`` means clean data."""
        return np.exp(self.log_posterior(x, step, y))

    def log_posterior(self, x, step, y):
        xb, single = self._batched(x)
        tokens = as_tokens(y, len(xb))
        if any(t.is_null for t in tokens):
            raise ValueError("posterior of the null condition is undefined")
        lj = self._log_joint(xb, step)
        masks = np.stack([self._mask(t) for t in tokens])
        out = logsumexp(np.where(masks, lj, -np.inf), axis=1) - logsumexp(lj, axis=1)
        return out[0] if single else out

    # -- model outputs -------------------------------------------------------
    def predict(self, x, step, y):
        """Exact ε̂ (VP/VE, ε̂ = -σ·score) or v̂ (rectified flow)."""
        xb, single = self._batched(x)
        tokens = as_tokens(y, len(xb))
        s = self.schedule
        step = s.check_step(step)
        if s.kind == ScheduleKind.RECTIFIED_FLOW:
            out = self._velocity(xb, step, tokens)
        else:
            out = -s.noise_scale(step) * self.score(xb, step, tokens)
        if self.eval_counter is not None:
            self.eval_counter.add(len(xb))
        return out[0] if single else out

    def _velocity(self, xb, step, tokens):
        t = self.schedule.values[step]
        scale, var = self._component_moments(step)
        r = self._responsibilities(xb, step, tokens)
        resid = xb[:, None, :] - scale * self.means[None]
        # E[eps | x, k] - E[x0 | x, k] for x = (1-t) x0 + t eps
        e_eps = (t / var)[None, :, None] * resid
        e_x0 = self.means[None] + ((1 - t) * self.variances / var)[None, :, None] * resid
        return np.einsum("bk,bkd->bd", r, e_eps - e_x0)

    def sample(self, n: int, rng, y=None):
        """Draw ``n`` clean samples, optionally restricted to label ``y``."""
        mask = self._mask(ConditionToken.parse(y)) if y is not None else np.ones(len(self.weights), bool)
        w = np.where(mask, self.weights, 0.0)
        w = w / w.sum()
        comp = rng.generator.choice(len(w), size=n, p=w)
        noise = rng.normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * noise, comp
