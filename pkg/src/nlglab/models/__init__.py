"""Denoiser networks, the analytic mixture oracle, training and checkpoints."""
from .analytic import AnalyticMixtureModel
from .conditions import HIGH_QUALITY, LOW_QUALITY, NULL_TOKEN, ConditionToken
from .mlp import EvalCounter, Parameterization, ScoreNet
from .training import (DenoiserEstimator, ModelPair, TrainConfig, epsilon_loss, make_quality_pair,
                       train_diffusion, train_flow)


def predict(model, x, step, y):
    """Native-parameterization output of a ScoreNet or the analytic oracle."""
    return model.predict(x, step, y)


def analytic_posterior(model: AnalyticMixtureModel, x, step, y):
    """Exact p(y | x) at noise level ``step`` (``None`` for clean data)."""
    return model.posterior(x, step, y)


__all__ = [
    "AnalyticMixtureModel", "ConditionToken", "DenoiserEstimator", "EvalCounter", "HIGH_QUALITY",
    "LOW_QUALITY", "ModelPair", "NULL_TOKEN", "Parameterization", "ScoreNet", "TrainConfig",
    "analytic_posterior", "epsilon_loss", "make_quality_pair", "predict", "train_diffusion", "train_flow",
]
