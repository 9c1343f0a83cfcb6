"""Sample-quality and alignment metrics, the external classifier, and baselines."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_batch, check_labels
from .models.analytic import AnalyticMixtureModel
from .models.conditions import ConditionToken, as_tokens
from .models.mlp import init_layers, mlp_backward, mlp_forward
from .numerics import RngStream

# -- two-sample distances -----------------------------------------------------


def _sqdist(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(a, b, max_points=2000) -> float:
    """Median pairwise distance over the pooled sample (first ``max_points`` rows of each)."""
    pooled = np.concatenate([a[:max_points], b[:max_points]])
    d = np.sqrt(_sqdist(pooled, pooled))
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(d[iu]))
    return med if med > 0 else 1.0


def _kernel_sum(a, b, bw, exclude_diag=False, block=2048):
    total = 0.0
    for i in range(0, len(a), block):
        k = np.exp(-0.5 * _sqdist(a[i:i + block], b) / bw ** 2)
        if exclude_diag:
            rows = np.arange(k.shape[0])
            k[rows, i + rows] = 0.0
        total += float(k.sum())
    return total


def mmd(a, b, bandwidth=None, biased=False) -> float:
    """Squared MMD with a Gaussian kernel exp(-|x-y|² / 2h²).

    The default is the unbiased U-statistic, which can dip slightly below zero
    for identically distributed sets; ``biased=True`` gives the V-statistic,
    which is zero for identical sets. ``bandwidth=None`` uses the median heuristic.
    """
    a, _ = check_batch(a, name="a")
    b, _ = check_batch(b, a.shape[1], name="b")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    m, n = len(a), len(b)
    if biased:
        kaa = _kernel_sum(a, a, h) / m ** 2
        kbb = _kernel_sum(b, b, h) / n ** 2
    else:
        if m < 2 or n < 2:
            raise ValueError("unbiased MMD needs at least two samples per set")
        kaa = _kernel_sum(a, a, h, exclude_diag=True) / (m * (m - 1))
        kbb = _kernel_sum(b, b, h, exclude_diag=True) / (n * (n - 1))
    kab = _kernel_sum(a, b, h) / (m * n)
    return kaa + kbb - 2.0 * kab


def _quantiles(x, n):
    """Empirical quantile function of sorted 1-D ``x`` evaluated at n midpoints."""
    x = np.sort(x)
    if len(x) == n:
        return x
    q = (np.arange(n) + 0.5) / n
    return np.quantile(x, q, method="inverted_cdf")


def sliced_wasserstein(a, b, num_projections=128, rng: RngStream | None = None) -> float:
    """Mean squared 1-D Wasserstein-2 distance over random unit projections."""
    a, _ = check_batch(a, name="a")
    b, _ = check_batch(b, a.shape[1], name="b")
    rng = RngStream(0, 0) if rng is None else rng
    dim = a.shape[1]
    theta = rng.normal((num_projections, dim))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    pa = a @ theta.T
    pb = b @ theta.T
    n = max(len(a), len(b))
    total = 0.0
    for j in range(num_projections):
        qa = _quantiles(pa[:, j], n)
        qb = _quantiles(pb[:, j], n)
        total += float(np.mean((qa - qb) ** 2))
    return total / num_projections


# -- classifier ---------------------------------------------------------------


class Classifier(ClassifierMixin, BaseEstimator):
    """Small MLP classifier trained with cross-entropy and momentum SGD."""

    def __init__(self, hidden=(64, 64), learning_rate=0.05, train_steps=2000, batch_size=256, momentum=0.9,
                 random_state=0, num_classes=None):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.momentum = momentum
        self.random_state = random_state
        self.num_classes = num_classes

    def fit(self, X, y):
        X, _ = check_batch(X, name="X")
        y = check_labels(y, len(X))
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        k = int(y.max()) + 1 if self.num_classes is None else int(self.num_classes)
        if len(self.classes_) != k or self.classes_[-1] >= k:
            missing = sorted(set(range(k)) - set(self.classes_.tolist()))
            raise ValueError(f"classes {missing} absent from training set")
        self.n_features_in_ = X.shape[1]
        rng = RngStream.derive(self.random_state, "classifier")
        self.layers_ = init_layers([X.shape[1], *self.hidden, k], rng)
        vel = [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers_]
        onehot = np.eye(k)
        for it in range(self.train_steps):
            rows = rng.integers(0, len(X), size=min(self.batch_size, len(X)))
            logits, cache = mlp_forward(self.layers_, X[rows])
            p = np.exp(log_softmax(logits, axis=1))
            grads, _ = mlp_backward(self.layers_, cache, (p - onehot[y[rows]]) / len(rows))
            lr = self.learning_rate * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * it / max(self.train_steps, 1))))
            new = []
            for (w, b), (gw, gb), (vw, vb) in zip(self.layers_, grads, vel):
                vw *= self.momentum
                vw += gw
                vb *= self.momentum
                vb += gb
                new.append((w - lr * vw, b - lr * vb))
            self.layers_ = new
        return self

    def predict_log_proba(self, X):
        check_is_fitted(self, "layers_")
        X, _ = check_batch(X, self.n_features_in_, name="X")
        logits, _ = mlp_forward(self.layers_, X)
        return log_softmax(logits, axis=1)

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        return np.argmax(self.predict_log_proba(X), axis=1)

    @classmethod
    def uniform(cls, dim: int, num_classes: int) -> "Classifier":
        """A classifier whose output layer is zero, so every input maps to 1/K."""
        clf = cls(hidden=(4,))
        clf.n_features_in_ = dim
        clf.classes_ = np.arange(num_classes)
        clf.layers_ = [(np.zeros((4, dim)), np.zeros(4)), (np.zeros((num_classes, 4)), np.zeros(num_classes))]
        return clf


def train_classifier(dataset, config: dict | None = None) -> Classifier:
    x, y = dataset
    return Classifier(**(config or {})).fit(x, y)


# -- alignment ----------------------------------------------------------------


def _class_ids(y, n):
    tokens = as_tokens(y, n)
    if not all(t.is_class for t in tokens):
        raise ValueError("alignment needs class conditions")
    return np.array([t.value for t in tokens])


def log_probs(scorer, samples, y) -> np.ndarray:
    """Per-sample log p(y | x) under a classifier or the analytic oracle (clean data)."""
    x, _ = check_batch(samples, name="samples")
    if len(x) == 0:
        raise ValueError("empty sample set")
    ids = _class_ids(y, len(x))
    if isinstance(scorer, AnalyticMixtureModel):
        return scorer.log_posterior(x, None, [ConditionToken.cls(int(i)) for i in ids])
    lp = scorer.predict_log_proba(x)
    return lp[np.arange(len(x)), ids]


def alignment_score(scorer, samples, y) -> float:
    """Mean log p(y | x) over ``samples``."""
    return float(np.mean(log_probs(scorer, samples, y)))


def predicted_classes(scorer, samples) -> np.ndarray:
    x, _ = check_batch(samples, name="samples")
    if isinstance(scorer, AnalyticMixtureModel):
        lp = np.stack([scorer.log_posterior(x, None, k) for k in range(scorer.num_classes)], axis=1)
        return np.argmax(lp, axis=1)
    return scorer.predict(x)


def cond_accuracy(scorer, samples, y) -> float:
    x, _ = check_batch(samples, name="samples")
    return float(np.mean(predicted_classes(scorer, x) == _class_ids(y, len(x))))


@dataclass
class MetricsReport:
    mmd: float = float("nan")
    sliced_wasserstein: float = float("nan")
    cond_accuracy: float = float("nan")
    mean_alignment_logprob: float = float("nan")
    model_eval_count: int = 0
    wall_time_seconds: float = 0.0
    mmd_bandwidth: float = float("nan")

    def __post_init__(self):
        if not (math.isnan(self.cond_accuracy) or 0 <= self.cond_accuracy <= 1):
            raise ValueError("cond_accuracy must lie in [0, 1]")
        if self.model_eval_count < 0 or self.wall_time_seconds < 0:
            raise ValueError("counts must be nonnegative")

    @staticmethod
    def header() -> list:
        return list(MetricsReport.__dataclass_fields__)

    def row(self) -> list:
        return [_fmt(v) for v in asdict(self).values()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerow(self.row())
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate_samples(samples, conditions, reference, scorer=None, bandwidth=None, model_eval_count=0,
                     wall_time=0.0, rng=None) -> MetricsReport:
    """Metrics for generated ``samples`` against ``reference`` data."""
    samples = np.asarray(samples)
    ok = np.all(np.isfinite(samples), axis=1)
    samples = samples[ok]
    conds = [c for c, keep in zip(conditions, ok) if keep]
    h = median_bandwidth(samples, reference) if bandwidth is None else bandwidth
    report = MetricsReport(mmd=mmd(samples, reference, h),
                           sliced_wasserstein=sliced_wasserstein(samples, reference, 64, rng),
                           model_eval_count=int(model_eval_count), wall_time_seconds=float(wall_time),
                           mmd_bandwidth=float(h))
    if scorer is not None and conds and all(ConditionToken.parse(c).is_class for c in conds):
        report.cond_accuracy = cond_accuracy(scorer, samples, conds)
        report.mean_alignment_logprob = alignment_score(scorer, samples, conds)
    return report


# -- traces -------------------------------------------------------------------


def direction_length_histogram(traces, bin_width: float):
    """Histogram of pre-clip edit-direction lengths over all steps of all traces.

    Returns ``(bin_left, counts)``; bins are ``[k*w, (k+1)*w)`` from 0 up to the last occupied bin.
    """
    traces = [t for t in traces if t is not None]
    if not traces:
        raise ValueError("need at least one trace")
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    lengths = np.concatenate([t.d_norms for t in traces]) if traces else np.array([])
    if len(lengths) == 0:
        return np.array([0.0]), np.array([0])
    idx = np.floor(lengths / bin_width).astype(int)
    counts = np.bincount(idx)
    return np.arange(len(counts)) * bin_width, counts


def histogram_csv(bin_left, counts) -> str:
    lines = ["bin_left,count"] + [f"{repr(float(b))},{int(c)}" for b, c in zip(bin_left, counts)]
    return "\n".join(lines) + "\n"


# -- baselines ----------------------------------------------------------------


def best_of_n_baseline(pair, schedule, sampler_cfg, y, n_candidates: int, scorer, seed=None):
    """Sample ``n_candidates`` fresh noises, keep the sample with the best alignment.

    Returns ``(best_sample, model_evals)``.
    """
    from .sampling import generate_batch
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    seed = sampler_cfg.seed if seed is None else seed
    batch = generate_batch(pair, schedule, sampler_cfg, n_candidates, [y], seed=seed)
    if batch.failures:
        raise next(iter(batch.failures.values()))
    scores = log_probs(scorer, batch.samples, y)
    return batch.samples[int(np.argmax(scores))], batch.model_evals


@dataclass
class RescueReport:
    indices: np.ndarray
    base_scores: np.ndarray
    new_scores: np.ndarray
    steps: int

    @property
    def deltas(self) -> np.ndarray:
        return self.new_scores - self.base_scores

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.deltas))


def select_worst(scores, quantile: float) -> np.ndarray:
    """Indices (ascending) of the lowest ``quantile`` fraction of ``scores``."""
    if not 0 < quantile <= 1:
        raise ValueError("quantile must be in (0, 1]")
    scores = np.nan_to_num(np.asarray(scores), nan=-np.inf)
    k = max(1, int(math.ceil(quantile * len(scores))))
    return np.sort(np.argsort(scores, kind="stable")[:k])


def worst_aligned_rescue(pair, schedule, sampler_cfg, labels, count, scorer, quantile, nlg_config, seed=0,
                         baseline=None):
    """Re-generate the worst-aligned ``quantile`` of a baseline batch with NLG on the same seeds.

    Selection uses the baseline batch. Both sides of each pair are then
    regenerated as one sub-batch over the selected items (without and with
    alignment), so with ``nlg_config.steps == 0`` every delta is exactly zero.
    """
    from .sampling import Aligner, generate_batch
    if baseline is None:
        baseline = generate_batch(pair, schedule, sampler_cfg, count, labels, seed=seed)
    scores = np.full(count, -np.inf)
    ok = baseline.ok
    scores[ok] = log_probs(scorer, baseline.samples[ok], [c for c, k in zip(baseline.conditions, ok) if k])
    chosen = select_worst(scores, quantile)
    conds = [baseline.conditions[i] for i in range(len(baseline.conditions))]
    base = generate_batch(pair, schedule, sampler_cfg, len(chosen), conds, seed=seed, items=chosen)
    aligner = Aligner(nlg_config) if nlg_config.steps > 0 else None
    new = generate_batch(pair, schedule, sampler_cfg, len(chosen), conds, aligner, seed=seed, items=chosen)
    return RescueReport(chosen, log_probs(scorer, base.samples, base.conditions),
                        log_probs(scorer, new.samples, new.conditions), nlg_config.steps)
