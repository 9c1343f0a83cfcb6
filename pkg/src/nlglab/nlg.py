"""Noise-level guidance: forward-only refinement of the initial noise.

Each aligning step forms an edit direction from two model outputs at the
highest noise level, clips its length, subtracts it from the noise, adds a
little fresh Gaussian noise and projects back onto the sphere of radius
``sigma_max * sqrt(dim)``. No gradients are taken.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_batch
from .errors import DegenerateInput, NumericalFailure
from .models.conditions import NULL_TOKEN, ConditionToken, as_tokens
from .models.training import ModelPair
from .numerics import RngStream, l2_norm, row_norms, sample_gaussian

DEFAULT_TAU = 0.5
AUTOGUIDE_TAU = 5.0
DEFAULT_STEPS = 20
DEFAULT_EXTRA_NOISE = 0.001


@dataclass(frozen=True)
class NLGConfig:
    steps: int = DEFAULT_STEPS
    clip_threshold: float = DEFAULT_TAU
    extra_noise_var: float = DEFAULT_EXTRA_NOISE
    sigma_max: float = 1.0
    dim: int = 2
    renormalize: bool = True
    clip: bool = True

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("steps must be a nonnegative integer")
        if not self.clip_threshold > 0:
            raise ValueError("clip_threshold must be positive")
        if not self.extra_noise_var >= 0:
            raise ValueError("extra_noise_var must be >= 0")
        if not self.sigma_max > 0 or int(self.dim) != self.dim or self.dim < 1:
            raise ValueError("sigma_max must be positive and dim a positive integer")

    @property
    def radius(self) -> float:
        return self.sigma_max * math.sqrt(self.dim)

    @classmethod
    def for_pair(cls, pair: ModelPair, **kwargs) -> "NLGConfig":
        return cls(sigma_max=pair.schedule.sigma_max, dim=pair.dim, **kwargs)


@dataclass
class StepRecord:
    d_norm_preclip: float
    clipped: bool
    n_norm_post: float
    probe_posterior: float | None = None


@dataclass
class AlignmentTrace:
    records: list = field(default_factory=list)
    model_eval_count: int = 0
    gradient_eval_count: int = 0

    @property
    def d_norms(self) -> np.ndarray:
        return np.array([r.d_norm_preclip for r in self.records])

    @property
    def probes(self) -> np.ndarray:
        return np.array([np.nan if r.probe_posterior is None else r.probe_posterior for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "d_norm_preclip", "clipped", "n_norm_post", "probe_posterior"])
        for i, r in enumerate(self.records):
            probe = "" if r.probe_posterior is None else repr(float(r.probe_posterior))
            writer.writerow([i, repr(float(r.d_norm_preclip)), int(r.clipped), repr(float(r.n_norm_post)), probe])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AlignmentTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        recs = [StepRecord(float(r["d_norm_preclip"]), r["clipped"] == "1", float(r["n_norm_post"]),
                           float(r["probe_posterior"]) if r["probe_posterior"] else None) for r in rows]
        return cls(recs)


def _clip_rows(d, norms, tau):
    scale = tau / norms
    out = d * scale[:, None]
    # rounding can leave a norm one ulp above tau; shrink until the bound holds
    over = row_norms(out) > tau
    while over.any():
        scale[over] = np.nextafter(scale[over], 0.0)
        out[over] = d[over] * scale[over][:, None]
        over = row_norms(out) > tau
    return out


def norm_clip(d, tau: float):
    """Rescale ``d`` to length ``tau`` when it is longer; shorter vectors pass through untouched."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    d = np.asarray(d, dtype=np.float64)
    norm = row_norms(d[None])[0]
    if norm <= tau:
        return d
    return _clip_rows(d[None], np.array([norm]), tau)[0]


def renormalize(n, sigma_max: float):
    """Project ``n`` onto the sphere of radius ``sigma_max * sqrt(dim)``."""
    n = np.asarray(n, dtype=np.float64)
    norm = l2_norm(n)
    if norm == 0:
        raise DegenerateInput("cannot renormalize a zero vector")
    return n * (sigma_max * math.sqrt(n.size) / norm)


def _check_pair(pair: ModelPair):
    if pair.d1.schedule.sigma_max != pair.d0.schedule.sigma_max:
        raise ValueError("d1 and d0 disagree on sigma_max")


def edit_direction(pair: ModelPair, y1, y0, n):
    """``D1(n | y1) - D0(n | y0)`` at each model's highest-noise step."""
    _check_pair(pair)
    d, _ = _edit_direction_batch(pair, y1, y0, n)
    return d


def _same_conditions(pair, y1s, y0s):
    return pair.aliased and all(a == b for a, b in zip(y1s, y0s))


def _edit_direction_batch(pair, y1, y0, n):
    nb, single = check_batch(n, pair.dim, name="n")
    y1s = as_tokens(y1, len(nb))
    y0s = as_tokens(y0, len(nb))
    out1 = pair.d1.predict(nb, pair.d1.schedule.max_step, y1s)
    if _same_conditions(pair, y1s, y0s):
        d, evals = out1 - out1, 1
    else:
        d, evals = out1 - pair.d0.predict(nb, pair.d0.schedule.max_step, y0s), 2
    return (d[0] if single else d), evals


def align_noise_batch(pair: ModelPair, y1, y0, config: NLGConfig, rngs, n_init=None, probe=None):
    """Run the aligning loop on a batch; row ``i`` draws from ``rngs[i]`` only.

    ``n_init`` (rows) replaces the initial N(0, sigma_max² I) draw when given.
    ``probe(N)`` returns one value per row, recorded after each step.
    Returns the aligned rows and one :class:`AlignmentTrace` per row.
    """
    _check_pair(pair)
    if config.dim != pair.dim:
        raise ValueError(f"config dim {config.dim} does not match model dim {pair.dim}")
    rngs = list(rngs)
    b = len(rngs)
    if n_init is None:
        n = np.stack([sample_gaussian(config.dim, config.sigma_max ** 2, r) for r in rngs])
    else:
        n, _ = check_batch(n_init, config.dim, name="n_init")
        n = n.copy()
        if len(n) != b:
            raise ValueError("one initial noise row per rng required")
    y1s = as_tokens(y1, b)
    y0s = as_tokens(y0, b)
    traces = [AlignmentTrace() for _ in range(b)]
    tau = config.clip_threshold
    for step in range(config.steps):
        d, evals = _edit_direction_batch(pair, y1s, y0s, n)
        if not np.all(np.isfinite(d)):
            raise NumericalFailure("non-finite edit direction", step=step)
        norms = row_norms(d)
        clipped = norms > tau if config.clip else np.zeros(b, dtype=bool)
        if clipped.any():
            d = d.copy()
            d[clipped] = _clip_rows(d[clipped], norms[clipped], tau)
        n = n - d
        if config.extra_noise_var > 0:
            n = n + np.stack([sample_gaussian(config.dim, config.extra_noise_var, r) for r in rngs])
        if config.renormalize:
            cur = row_norms(n)
            if np.any(cur == 0):
                raise DegenerateInput(f"noise collapsed to zero at step {step}")
            n = n * (config.radius / cur)[:, None]
        if not np.all(np.isfinite(n)):
            raise NumericalFailure("non-finite noise", step=step)
        post = row_norms(n)
        values = probe(n) if probe is not None else [None] * b
        for i, tr in enumerate(traces):
            tr.records.append(StepRecord(float(norms[i]), bool(clipped[i]), float(post[i]),
                                         None if values[i] is None else float(values[i])))
            tr.model_eval_count += evals
    return n, traces


def align_noise(pair: ModelPair, y1, y0, config: NLGConfig, rng: RngStream, n_init=None, probe=None):
    """Align a single noise vector. Returns ``(n, trace)``."""
    init = None if n_init is None else np.atleast_2d(n_init)
    y1 = ConditionToken.parse(y1)
    y0 = ConditionToken.parse(y0)
    wrapped = None if probe is None else (lambda nb: np.atleast_1d(probe(nb)))
    n, traces = align_noise_batch(pair, y1, y0, config, [rng], init, wrapped)
    return n[0], traces[0]


def steps_for_guidance_scale(w: float) -> int:
    """Aligning steps for CFG scale ``w``: linear from (1, 20) to (7.5, 2), clamped to [2, 20]."""
    if w < 1:
        raise ValueError("guidance scale must be >= 1")
    s = 20.0 + (w - 1.0) * (2.0 - 20.0) / (7.5 - 1.0)
    return int(min(20, max(2, math.floor(s + 0.5))))


class NoiseAligner(TransformerMixin, BaseEstimator):
    """Transformer that maps rows of initial noise to aligned noise.

    ``fit`` only validates the model pair and records its dimension; ``transform``
    runs the aligning loop with row ``i`` driven by stream ``(random_state, "align", i)``.
    """

    def __init__(self, pair=None, positive_cond=NULL_TOKEN, negative_cond=NULL_TOKEN, steps=DEFAULT_STEPS,
                 clip_threshold=DEFAULT_TAU, extra_noise_var=DEFAULT_EXTRA_NOISE, renormalize=True, clip=True,
                 random_state=0):
        self.pair = pair
        self.positive_cond = positive_cond
        self.negative_cond = negative_cond
        self.steps = steps
        self.clip_threshold = clip_threshold
        self.extra_noise_var = extra_noise_var
        self.renormalize = renormalize
        self.clip = clip
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.pair is None:
            raise ValueError("NoiseAligner needs a ModelPair")
        _check_pair(self.pair)
        self.config_ = NLGConfig(self.steps, self.clip_threshold, self.extra_noise_var,
                                 self.pair.schedule.sigma_max, self.pair.dim, self.renormalize, self.clip)
        self.n_features_in_ = self.pair.dim
        return self

    def sample_initial(self, count: int) -> np.ndarray:
        check_is_fitted(self, "config_")
        var = self.config_.sigma_max ** 2
        return np.stack([sample_gaussian(self.n_features_in_, var, RngStream.derive(self.random_state, "init", i))
                         for i in range(count)])

    def transform(self, X, y=None):
        """Align each row of ``X``; ``y`` optionally gives per-row positive conditions."""
        check_is_fitted(self, "config_")
        X, _ = check_batch(X, self.n_features_in_, name="X")
        y1 = self.positive_cond if y is None else y
        rngs = [RngStream.derive(self.random_state, "align", i) for i in range(len(X))]
        out, self.traces_ = align_noise_batch(self.pair, y1, self.negative_cond, self.config_, rngs, X)
        return out
