import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlglab.datasets import line_oracle, ring_oracle
from nlglab.guidance import GuidanceSpec, guided_output
from nlglab.models.analytic import AnalyticMixtureModel
from nlglab.models.conditions import HIGH_QUALITY, LOW_QUALITY, NULL_TOKEN, ConditionToken
from nlglab.models.mlp import Parameterization
from nlglab.models.training import ModelPair
from nlglab.nlg import edit_direction
from nlglab.numerics import RngStream
from nlglab.schedules import rectified_flow, vp_cosine


class ConstantModel:
    """Returns a fixed vector regardless of input."""

    def __init__(self, value, schedule=None, parameterization=Parameterization.EPSILON):
        self.value = np.asarray(value, dtype=float)
        self.schedule = schedule or vp_cosine()
        self.parameterization = parameterization

    @property
    def dim(self):
        return len(self.value)

    def predict(self, x, step, y):
        x = np.asarray(x)
        return np.broadcast_to(self.value, x.shape).copy()


RIGHT = ConditionToken.cls(1)


def test_cfg_arithmetic_with_stub_models():
    pair = ModelPair(ConstantModel([1.0, 0.0]), ConstantModel([0.0, 1.0]))
    out = guided_output(pair, GuidanceSpec("autoguide", 7.5), np.zeros(2), 10)
    assert np.array_equal(out, [7.5, -6.5])


@pytest.mark.parametrize("mode", ["cfg", "autoguide"])
def test_unit_weight_is_d1_exactly(mode):
    oracle = ring_oracle(vp_cosine())
    pair = ModelPair.single(oracle)
    x = RngStream(0, 2).normal((16, 2))
    y = ConditionToken.cls(3)
    out = guided_output(pair, GuidanceSpec(mode, 1.0, y), x, 60)
    assert out.tobytes() == oracle.predict(x, 60, y).tobytes()
    none = guided_output(pair, GuidanceSpec("none", 1.0, y), x, 60)
    assert none.tobytes() == out.tobytes()


def test_zero_weight_is_d0_exactly():
    oracle = ring_oracle(vp_cosine())
    pair = ModelPair.single(oracle)
    x = RngStream(0, 3).normal((16, 2))
    out = guided_output(pair, GuidanceSpec("cfg", 0.0, ConditionToken.cls(2)), x, 60)
    assert out.tobytes() == oracle.predict(x, 60, NULL_TOKEN).tobytes()


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 10), st.floats(-5, 10))
def test_guided_output_is_affine_in_weight(w1, w2):
    oracle = line_oracle(vp_cosine(), dim=2)
    pair = ModelPair.single(oracle)
    x = np.array([0.4, -0.3])
    f = lambda w: guided_output(pair, GuidanceSpec("cfg", w, RIGHT), x, 80)  # noqa: E731
    mid = 0.5 * (w1 + w2)
    assert np.allclose(f(mid), 0.5 * (f(w1) + f(w2)), rtol=1e-12, atol=1e-12)


def test_weight_difference_equals_edit_direction():
    oracle = ring_oracle(vp_cosine())
    pair = ModelPair.single(oracle)
    x = RngStream(5, 5).normal((10, 2))
    y = ConditionToken.cls(6)
    step = vp_cosine().max_step
    diff = guided_output(pair, GuidanceSpec("cfg", 1.0, y), x, step) - \
        guided_output(pair, GuidanceSpec("cfg", 0.0, y), x, step)
    assert np.allclose(diff, edit_direction(pair, y, NULL_TOKEN, x), rtol=1e-13, atol=1e-15)


def test_spec_validation():
    with pytest.raises(ValueError):
        GuidanceSpec("none", 2.0)
    with pytest.raises(ValueError):
        GuidanceSpec("bogus", 1.0)
    two = ModelPair(line_oracle(vp_cosine()), line_oracle(vp_cosine()))
    with pytest.raises(ValueError):
        guided_output(two, GuidanceSpec("cfg", 2.0), np.zeros(1), 5)
    mixed = ModelPair(ConstantModel([1.0]), ConstantModel([1.0], parameterization=Parameterization.VELOCITY))
    with pytest.raises(ValueError):
        guided_output(mixed, GuidanceSpec("autoguide", 2.0), np.zeros(1), 5)


def test_negative_condition_defaults_to_null():
    assert GuidanceSpec.cfg(3.0, RIGHT).negative_cond == NULL_TOKEN


def casework_model(schedule):
    """Quality-labelled mixture: one condition set tagged high, one tagged low."""
    means = [[-2.0, 0.5], [1.5, 1.0], [0.5, -2.5], [3.0, -1.0]]
    labels = [HIGH_QUALITY, HIGH_QUALITY, LOW_QUALITY, LOW_QUALITY]
    return AnalyticMixtureModel(means, [0.3, 0.2, 0.25, 0.25], 0.5, schedule, labels=labels)


def _fd_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("w", [1.4, 2.9])
def test_autoguide_decomposition(w):
    m = casework_model(vp_cosine())
    for step in (20, 60, 95):
        for x in RngStream(7, step).normal((10, 2)) * 2:
            lhs = w * m.score(x, step, HIGH_QUALITY) + (1 - w) * m.score(x, step, LOW_QUALITY)
            gh = _fd_grad(lambda z: m.log_posterior(z, step, HIGH_QUALITY), x)
            gl = _fd_grad(lambda z: m.log_posterior(z, step, LOW_QUALITY), x)
            gp = _fd_grad(lambda z: m.log_density(z, step), x)
            rhs = w * gh + (1 - w) * gl + gp
            assert np.linalg.norm(lhs - rhs) <= 1e-5 * np.linalg.norm(rhs)


def test_velocity_pairs_combine_natively():
    oracle = line_oracle(rectified_flow())
    pair = ModelPair.single(oracle)
    x = np.array([0.3])
    out = guided_output(pair, GuidanceSpec("cfg", 3.0, RIGHT), x, 50)
    expected = 3.0 * oracle.predict(x, 50, RIGHT) - 2.0 * oracle.predict(x, 50, NULL_TOKEN)
    assert np.allclose(out, expected, rtol=1e-14)
