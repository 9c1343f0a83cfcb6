import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlglab.datasets import line_oracle, make_ring, ring_oracle
from nlglab.evaluation import (Classifier, MetricsReport, alignment_score, best_of_n_baseline, cond_accuracy,
                               direction_length_histogram, evaluate_samples, histogram_csv, log_probs, mmd,
                               select_worst, sliced_wasserstein, train_classifier, worst_aligned_rescue)
from nlglab.guidance import GuidanceSpec
from nlglab.models.conditions import NULL_TOKEN, ConditionToken
from nlglab.models.training import ModelPair
from nlglab.nlg import AlignmentTrace, NLGConfig, StepRecord
from nlglab.numerics import RngStream
from nlglab.sampling import SamplerConfig, generate_batch
from nlglab.schedules import vp_cosine


def _gauss(n, mean, seed):
    return RngStream(seed, 0).normal((n, len(mean))) + np.asarray(mean)


# -- distances ----------------------------------------------------------------


def test_mmd_of_identical_sets():
    a = _gauss(500, [0.0, 0.0], 1)
    assert mmd(a, a, 1.0, biased=True) == 0.0
    assert mmd(a, a, 1.0) <= 1e-12
    assert mmd(a, a + np.zeros(2), 1.0, biased=True) == 0.0


def test_mmd_matches_closed_form_for_separated_gaussians():
    d, h, delta = 2, 1.0, 10.0
    a = _gauss(2000, [0.0, 0.0], 2)
    b = _gauss(2000, [delta, 0.0], 3)
    c = (h * h / (h * h + 2)) ** (d / 2)
    expected = 2 * c * (1 - math.exp(-delta ** 2 / (2 * (h * h + 2))))
    assert mmd(a, b, h) == pytest.approx(expected, rel=0.05)


def test_metrics_are_symmetric_and_near_zero_on_halves():
    x, _ = make_ring(4000, seed=4)
    a, b = x[:2000], x[2000:]
    assert mmd(a, b, 1.0) == pytest.approx(mmd(b, a, 1.0), rel=1e-12)
    assert abs(mmd(a, b, 1.0)) < 2e-3
    r = lambda: RngStream(0, 1)  # noqa: E731
    assert sliced_wasserstein(a, b, 64, r()) == pytest.approx(sliced_wasserstein(b, a, 64, r()), rel=1e-12)
    assert sliced_wasserstein(a, b, 64, r()) < 0.02


def test_mmd_validates_inputs():
    with pytest.raises(ValueError):
        mmd(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        mmd(np.zeros((1, 2)), np.zeros((3, 2)))


def test_sliced_wasserstein_examples():
    a = _gauss(300, [0.0, 1.0], 5)
    assert sliced_wasserstein(a, a, 32) == 0.0
    c = 3.0
    pts = sliced_wasserstein(np.zeros((10, 1)), np.full((10, 1), c), 8)
    assert pts == pytest.approx(c * c, rel=1e-12)


def test_sliced_wasserstein_gaussian_closed_form():
    delta, d = 3.0, 2
    a = _gauss(4000, [0.0, 0.0], 6)
    b = _gauss(4000, [delta, 0.0], 7)
    # a projection onto unit theta separates the means by theta . delta; E[(theta . delta)^2] = |delta|^2 / d
    assert sliced_wasserstein(a, b, 256, RngStream(1, 1)) == pytest.approx(delta ** 2 / d, rel=0.10)


# -- classifier ---------------------------------------------------------------


def _blobs(n, seed, sep=10.0):
    rng = RngStream(seed, 12)
    y = rng.integers(0, 2, size=n)
    x = rng.normal((n, 2)) + np.stack([sep * y, np.zeros(n)], axis=1)
    return x, y


def test_separable_blobs():
    clf = train_classifier(_blobs(2000, 0), {"train_steps": 500})
    x, y = _blobs(2000, 1)
    assert clf.score(x, y) >= 0.99
    p = clf.predict_proba(x)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_one_point_per_class():
    x = np.array([[-1.0, 0.0], [1.0, 0.5], [0.0, 2.0]])
    y = np.array([0, 1, 2])
    clf = Classifier(train_steps=500).fit(x, y)
    assert clf.score(x, y) == 1.0


def test_shuffled_labels_give_chance_accuracy():
    # held-out labels independent of x make each hit a Bernoulli(1/8) draw
    rng = np.random.default_rng(0)
    x, y = make_ring(4000, seed=2)
    clf = Classifier(train_steps=500).fit(x, rng.permutation(y))
    x_test, _ = make_ring(4000, seed=3)
    acc = clf.score(x_test, rng.integers(0, 8, size=4000))
    sd = math.sqrt(1 / 8 * 7 / 8 / 4000)
    assert abs(acc - 1 / 8) <= 3 * sd


def test_missing_class_rejected():
    x, y = _blobs(100, 0)
    with pytest.raises(ValueError):
        Classifier().fit(x, np.where(y == 1, 2, 0))
    with pytest.raises(ValueError):
        Classifier(num_classes=3).fit(x, y)
    with pytest.raises(ValueError):
        Classifier().fit(x, np.zeros(100, dtype=int))


def test_classifier_is_deterministic():
    x, y = _blobs(300, 3)
    a = Classifier(train_steps=50).fit(x, y)
    b = Classifier(train_steps=50).fit(x, y)
    assert a.predict_log_proba(x).tobytes() == b.predict_log_proba(x).tobytes()


# -- alignment ----------------------------------------------------------------


def test_alignment_at_isolated_class_mean():
    oracle = ring_oracle(vp_cosine(), radius=40.0)
    x = np.tile(oracle.means[3], (5, 1))
    assert alignment_score(oracle, x, ConditionToken.cls(3)) >= math.log(0.999)


def test_uniform_scorer():
    clf = Classifier.uniform(2, 8)
    x = RngStream(0, 0).normal((10, 2))
    assert np.allclose(log_probs(clf, x, ConditionToken.cls(1)), math.log(1 / 8), rtol=1e-14)


def test_correct_class_scores_higher():
    oracle = ring_oracle(vp_cosine())
    right, _ = oracle.sample(500, RngStream(1, 1), ConditionToken.cls(2))
    wrong, _ = oracle.sample(500, RngStream(1, 2), ConditionToken.cls(6))
    y = ConditionToken.cls(2)
    assert alignment_score(oracle, right, y) > alignment_score(oracle, wrong, y)
    assert cond_accuracy(oracle, right, y) > cond_accuracy(oracle, wrong, y)


def test_alignment_is_permutation_invariant():
    oracle = ring_oracle(vp_cosine())
    x, comp = oracle.sample(200, RngStream(4, 4))
    labels = [ConditionToken.cls(int(c)) for c in comp]
    perm = np.random.default_rng(0).permutation(200)
    a = alignment_score(oracle, x, labels)
    b = alignment_score(oracle, x[perm], [labels[i] for i in perm])
    assert a == pytest.approx(b, rel=1e-12)


def test_alignment_rejects_bad_inputs():
    oracle = ring_oracle(vp_cosine())
    with pytest.raises(ValueError):
        alignment_score(oracle, np.zeros((0, 2)), ConditionToken.cls(0))
    with pytest.raises(ValueError):
        alignment_score(oracle, np.zeros((2, 2)), NULL_TOKEN)


# -- reports and histograms --------------------------------------------------


def test_metrics_report():
    with pytest.raises(ValueError):
        MetricsReport(cond_accuracy=1.5)
    with pytest.raises(ValueError):
        MetricsReport(model_eval_count=-1)
    oracle = ring_oracle(vp_cosine())
    x, comp = oracle.sample(300, RngStream(5, 5))
    ref, _ = oracle.sample(300, RngStream(5, 6))
    rep = evaluate_samples(x, [ConditionToken.cls(int(c)) for c in comp], ref, oracle, model_eval_count=12)
    assert 0 <= rep.cond_accuracy <= 1 and rep.mmd_bandwidth > 0
    lines = rep.to_csv().splitlines()
    assert len(lines) == 2 and lines[0].split(",") == MetricsReport.header()


def _trace(lengths):
    return AlignmentTrace([StepRecord(v, v > 0.5, 1.0) for v in lengths])


def test_histogram_examples():
    left, counts = direction_length_histogram([_trace([0.1, 0.1, 0.9])], 0.5)
    assert np.allclose(left, [0.0, 0.5]) and counts.tolist() == [2, 1]
    left, counts = direction_length_histogram([_trace([0.0] * 7), _trace([0.0] * 3)], 0.25)
    assert left.tolist() == [0.0] and counts.tolist() == [10]
    assert histogram_csv([0.0, 0.5], [2, 1]) == "bin_left,count\n0.0,2\n0.5,1\n"
    with pytest.raises(ValueError):
        direction_length_histogram([], 0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.floats(0.05, 2))
def test_histogram_counts_every_step(lengths, width):
    _, counts = direction_length_histogram([_trace(lengths)], width)
    assert counts.sum() == len(lengths)


def test_histogram_shape_on_toy_model(vp_ring_model):
    pair = ModelPair.single(vp_ring_model)
    cfg = SamplerConfig("deterministic_vp", 20, GuidanceSpec.cfg(1.0, NULL_TOKEN))
    from nlglab.sampling import Aligner
    batch = generate_batch(pair, vp_cosine(), cfg, 100, [ConditionToken.cls(i) for i in range(8)],
                           Aligner(NLGConfig.for_pair(pair)), seed=0)
    left, counts = direction_length_histogram(batch.traces, 0.05)
    total = counts.sum()
    lowest = counts[: max(1, len(counts) // 4)].sum()
    assert lowest > total / 2
    assert len(counts) >= 4 and counts[-1] < counts.max()


# -- baselines ----------------------------------------------------------------


def _sampler(w=1.0):
    return SamplerConfig("deterministic_vp", 20, GuidanceSpec.cfg(w, NULL_TOKEN))


def test_best_of_one_is_plain_sampling():
    oracle = ring_oracle(vp_cosine())
    pair = ModelPair.single(oracle)
    y = ConditionToken.cls(3)
    x, evals = best_of_n_baseline(pair, vp_cosine(), _sampler(), y, 1, oracle, seed=9)
    plain = generate_batch(pair, vp_cosine(), _sampler(), 1, [y], seed=9)
    assert np.array_equal(x, plain.samples[0]) and evals == 40


def test_best_of_n_eval_count_and_argmax():
    oracle = ring_oracle(vp_cosine())
    pair = ModelPair.single(oracle)
    y = ConditionToken.cls(5)
    x, evals = best_of_n_baseline(pair, vp_cosine(), _sampler(), y, 16, oracle, seed=1)
    assert evals == 640
    cands = generate_batch(pair, vp_cosine(), _sampler(), 16, [y], seed=1).samples
    scores = log_probs(oracle, cands, y)
    assert log_probs(oracle, x[None], y)[0] == scores.max() >= np.median(scores)
    with pytest.raises(ValueError):
        best_of_n_baseline(pair, vp_cosine(), _sampler(), y, 0, oracle)


def test_best_of_n_beats_single_sample_median():
    oracle = ring_oracle(vp_cosine())
    pair = ModelPair.single(oracle)
    y = ConditionToken.cls(0)
    best = [alignment_score(oracle, best_of_n_baseline(pair, vp_cosine(), _sampler(), y, 16, oracle,
                                                       seed=s)[0][None], y) for s in range(10)]
    single = log_probs(oracle, generate_batch(pair, vp_cosine(), _sampler(), 200, [y], seed=99).samples, y)
    assert np.mean(best) >= np.median(single)


def test_select_worst():
    assert select_worst([5, 1, 3, 2, 4], 0.4).tolist() == [1, 3]
    assert select_worst([1, 2, 3], 1.0).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        select_worst([1, 2], 0.0)


def test_rescue_with_zero_steps_has_zero_delta():
    oracle = ring_oracle(vp_cosine())
    pair = ModelPair.single(oracle)
    labels = [ConditionToken.cls(i) for i in range(8)]
    rep = worst_aligned_rescue(pair, vp_cosine(), _sampler(2.5), labels, 64, oracle, 0.1,
                               NLGConfig.for_pair(pair, steps=0), seed=3)
    assert len(rep.indices) == 7
    assert np.all(rep.deltas == 0)


def test_rescue_full_quantile_covers_batch():
    oracle = line_oracle(vp_cosine(), dim=2)
    pair = ModelPair.single(oracle)
    labels = [ConditionToken.cls(0), ConditionToken.cls(1)]
    rep = worst_aligned_rescue(pair, vp_cosine(), _sampler(2.5), labels, 20, oracle, 1.0,
                               NLGConfig.for_pair(pair, steps=5), seed=0)
    assert rep.indices.tolist() == list(range(20))
    assert rep.mean_delta > 0
