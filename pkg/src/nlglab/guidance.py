"""Guided model outputs for the generation phase: none, CFG and autoguidance."""
from __future__ import annotations

from dataclasses import dataclass

from .models.conditions import NULL_TOKEN, ConditionToken
from .models.training import ModelPair

MODES = ("none", "cfg", "autoguide")


@dataclass(frozen=True)
class GuidanceSpec:
    """``w * D1(x|y1) + (1 - w) * D0(x|y0)``; ``mode="none"`` uses ``D1(x|y1)`` alone."""

    mode: str = "none"
    weight: float = 1.0
    positive_cond: ConditionToken = NULL_TOKEN
    negative_cond: ConditionToken = NULL_TOKEN

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"guidance mode must be one of {MODES}")
        if self.mode == "none" and self.weight != 1:
            raise ValueError("mode 'none' requires weight 1")
        object.__setattr__(self, "positive_cond", ConditionToken.parse(self.positive_cond))
        object.__setattr__(self, "negative_cond", ConditionToken.parse(self.negative_cond))

    @classmethod
    def cfg(cls, weight, cond, negative=NULL_TOKEN) -> "GuidanceSpec":
        return cls("cfg", float(weight), cond, negative)

    def with_condition(self, cond) -> "GuidanceSpec":
        """Same guidance with a different positive condition (per-sample labels)."""
        return GuidanceSpec(self.mode, self.weight, cond, self.negative_cond)

    def evals_per_step(self) -> int:
        return 1 if self.mode == "none" else 2

    def validate(self, pair: ModelPair):
        if self.mode == "cfg" and not pair.aliased:
            raise ValueError("CFG needs d1 and d0 to be the same model")
        if pair.d1.parameterization != pair.d0.parameterization:
            raise ValueError("d1 and d0 use different output parameterizations")


def guided_output(pair: ModelPair, spec: GuidanceSpec, x, step: int, y1=None, y0=None):
    """Combine raw model outputs under ``spec``.

    ``y1``/``y0`` override the guidance conditions (used for per-row labels in a batch).
    """
    spec.validate(pair)
    y1 = spec.positive_cond if y1 is None else y1
    y0 = spec.negative_cond if y0 is None else y0
    out1 = pair.d1.predict(x, step, y1)
    if spec.mode == "none":
        return out1
    out0 = pair.d0.predict(x, step, y0)
    w = spec.weight
    return w * out1 + (1.0 - w) * out0
