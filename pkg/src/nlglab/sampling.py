"""Reverse-process samplers and the batch generation driver."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_batch
from .errors import DegenerateInput, NumericalFailure
from .guidance import GuidanceSpec, guided_output
from .models.conditions import NULL_TOKEN, ConditionToken, as_tokens
from .models.training import ModelPair
from .nlg import NLGConfig, align_noise_batch
from .numerics import RngStream, row_norms, sample_gaussian
from .schedules import NoiseSchedule, ScheduleKind

KINDS = ("ancestral_vp", "deterministic_vp", "rf_euler")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "deterministic_vp"
    inference_steps: int = 20
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"sampler kind must be one of {KINDS}")
        if self.inference_steps < 1:
            raise ValueError("inference_steps must be positive")

    def evals_per_sample(self) -> int:
        return self.inference_steps * self.guidance.evals_per_step()


def default_kind(schedule: NoiseSchedule) -> str:
    return "rf_euler" if schedule.kind == ScheduleKind.RECTIFIED_FLOW else "deterministic_vp"


def _check_kind(schedule, cfg):
    rf = schedule.kind == ScheduleKind.RECTIFIED_FLOW
    if rf != (cfg.kind == "rf_euler"):
        raise ValueError(f"sampler {cfg.kind!r} does not fit a {schedule.kind.name} schedule")
    if cfg.inference_steps > schedule.num_steps:
        raise ValueError("inference_steps exceeds schedule length")


def sample_rows(pair: ModelPair, schedule: NoiseSchedule, cfg: SamplerConfig, x, conds, rngs=None):
    """Run the sampler on every row of ``x``.

    Returns ``(x0, fail_step)``; ``fail_step[i]`` is the inference step at which
    row ``i`` first went non-finite, or -1.
    """
    _check_kind(schedule, cfg)
    cfg.guidance.validate(pair)
    x = np.array(x, dtype=np.float64)
    b = len(x)
    conds = as_tokens(conds, b)
    y0 = [cfg.guidance.negative_cond] * b
    fail = np.full(b, -1)
    idx = schedule.inference_steps(cfg.inference_steps)

    def guided(xc, step):
        with np.errstate(all="ignore"):
            return guided_output(pair, cfg.guidance, np.nan_to_num(xc), int(step), conds, y0)

    with np.errstate(all="ignore"):
        if cfg.kind == "rf_euler":
            for j in range(len(idx) - 1):
                v = guided(x, idx[j])
                dt = schedule.values[idx[j]] - schedule.values[idx[j + 1]]
                x = x - dt * v
                _mark(fail, x, j)
        else:
            ab = schedule.alpha_bar
            for j, step in enumerate(idx):
                a_t = ab[step]
                a_prev = ab[idx[j + 1]] if j + 1 < len(idx) else 1.0
                eps = guided(x, step)
                x0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
                if cfg.kind == "ancestral_vp" and a_prev < 1.0:
                    var = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)
                    z = np.stack([r.normal(x.shape[1]) for r in rngs])
                    x = math.sqrt(a_prev) * x0 + math.sqrt(max(1.0 - a_prev - var, 0.0)) * eps + math.sqrt(var) * z
                else:
                    x = math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps
                _mark(fail, x, j)
    return x, fail


def _mark(fail, x, j):
    bad = ~np.all(np.isfinite(x), axis=1) & (fail < 0)
    fail[bad] = j


def sample(pair: ModelPair, schedule: NoiseSchedule, cfg: SamplerConfig, n_init, y=None, rng=None):
    """Generate one sample from initial noise ``n_init``.

    ``y`` defaults to the positive guidance condition. Ancestral noise
    comes from ``rng`` or the ``(cfg.seed, "sampler", 0)`` stream.
    """
    n, single = check_batch(n_init, pair.dim, name="n_init")
    radius = schedule.sigma_max * math.sqrt(pair.dim)
    if abs(row_norms(n)[0] - radius) > 0.2 * radius:
        warnings.warn("initial noise norm is more than 20% away from sigma_max*sqrt(dim)", RuntimeWarning,
                      stacklevel=2)
    y = cfg.guidance.positive_cond if y is None else ConditionToken.parse(y)
    rng = RngStream.derive(cfg.seed, "sampler", 0) if rng is None else rng
    x, fail = sample_rows(pair, schedule, cfg, n, [y], [rng])
    if fail[0] >= 0:
        raise NumericalFailure("non-finite sampler state", step=int(fail[0]))
    return x[0]


@dataclass(frozen=True)
class Aligner:
    """How to align initial noise inside :func:`generate_batch`.

    ``positive=None`` aligns toward each item's generation condition.
    ``pair=None`` aligns with the generation models.
    """

    config: NLGConfig
    positive: ConditionToken | None = None
    negative: ConditionToken = NULL_TOKEN
    pair: ModelPair | None = None


@dataclass
class BatchResult:
    samples: np.ndarray
    conditions: list
    traces: list
    n_init: np.ndarray
    n_aligned: np.ndarray
    failures: dict
    model_evals: int = 0

    @property
    def ok(self) -> np.ndarray:
        mask = np.ones(len(self.samples), dtype=bool)
        mask[list(self.failures)] = False
        return mask

    def to_csv(self) -> str:
        lines = ["sample_index,condition," + ",".join(f"x{j}" for j in range(self.samples.shape[1]))]
        for i, (row, c) in enumerate(zip(self.samples, self.conditions)):
            lines.append(f"{i},{c}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def item_streams(seed: int, purpose: str, items):
    return [RngStream.derive(seed, purpose, int(i)) for i in items]


def initial_noise(seed: int, items, dim: int, sigma_max: float) -> np.ndarray:
    """Base N(0, sigma_max² I) draw for each item index."""
    return np.stack([sample_gaussian(dim, sigma_max ** 2, r) for r in item_streams(seed, "init", items)])


def generate_batch(pair: ModelPair, schedule: NoiseSchedule, cfg: SamplerConfig, count: int, labels=None,
                   aligner: Aligner | None = None, seed=None, probe=None, items=None) -> BatchResult:
    """Draw, optionally align, and sample ``count`` items.

    Item ``i`` uses substreams ``(seed, "init"|"align"|"sampler", i)``, so
    toggling alignment never changes the base noise or the sampler noise.
    ``items`` picks the item indices (default ``range(count)``); conditions
    cycle over ``labels`` by item index (default: the guidance condition).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    seed = cfg.seed if seed is None else seed
    items = list(range(count)) if items is None else [int(i) for i in items]
    if len(items) != count:
        raise ValueError("items must list one index per generated sample")
    labels = [cfg.guidance.positive_cond] if labels is None else [ConditionToken.parse(c) for c in labels]
    conds = [labels[i % len(labels)] for i in items]
    n_init = initial_noise(seed, items, pair.dim, schedule.sigma_max)
    n = n_init
    traces = [None] * count
    failures = {}
    evals = 0
    if aligner is not None and aligner.config.steps > 0:
        apair = aligner.pair or pair
        y1 = conds if aligner.positive is None else [aligner.positive] * count
        try:
            n, traces = align_noise_batch(apair, y1, aligner.negative, aligner.config,
                                          item_streams(seed, "align", items), n_init, probe)
        except (NumericalFailure, DegenerateInput):
            n, traces = _align_itemwise(apair, y1, aligner, item_streams(seed, "align", items), n_init, failures)
        evals += sum(t.model_eval_count for t in traces if t is not None)
    x = np.full_like(n, np.nan)
    ok = np.array([i not in failures for i in range(count)])
    if ok.any():
        rows = np.flatnonzero(ok)
        srngs = item_streams(seed, "sampler", [items[i] for i in rows])
        xs, fail = sample_rows(pair, schedule, cfg, n[rows], [conds[i] for i in rows], srngs)
        x[rows] = xs
        for i, f in zip(rows, fail):
            if f >= 0:
                failures[int(i)] = NumericalFailure("non-finite sampler state", step=int(f))
        evals += len(rows) * cfg.evals_per_sample()
    return BatchResult(x, conds, traces, n_init, n, failures, evals)


def _align_itemwise(apair, y1, aligner, rngs, n_init, failures):
    n = n_init.copy()
    traces = [None] * len(rngs)
    for i, r in enumerate(rngs):
        try:
            ni, tr = align_noise_batch(apair, [y1[i]], aligner.negative, aligner.config, [r], n_init[i:i + 1])
            n[i], traces[i] = ni[0], tr[0]
        except (NumericalFailure, DegenerateInput) as exc:
            failures[i] = exc
    return n, traces
