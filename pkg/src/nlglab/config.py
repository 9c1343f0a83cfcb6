"""Experiment configuration: sectioned ``key = value`` files with strict key checking."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass

from .errors import ConfigError

EXPERIMENT_KINDS = (
    "train", "align", "sample", "eval", "sweep_steps", "sweep_guidance", "sweep_noise_level",
    "ablate_normalization", "ablate_clipping", "autoguide_uncond", "autoguide_cond", "dual_condition",
    "cross_model", "rescue_worst", "baseline_best_of_n",
)

SUBCOMMAND_KINDS = {
    "train": ("train",),
    "align": ("align",),
    "sample": ("sample",),
    "eval": ("eval", "autoguide_uncond", "autoguide_cond", "dual_condition", "cross_model", "rescue_worst",
             "baseline_best_of_n"),
    "sweep": ("sweep_steps", "sweep_guidance", "sweep_noise_level"),
    "ablate": ("ablate_normalization", "ablate_clipping"),
}

# section -> key -> default (as text)
DEFAULTS = {
    "experiment": {"kind": "", "seeds": "0,1,2,3,4,5,6,7,8,9"},
    "data": {"dataset": "ring", "num_train": "20000", "num_reference": "2048", "num_classes": "8",
             "radius": "4.0", "std": "1.0", "offset": "2.0", "dim": "1", "seed": "0"},
    "model": {"path": "", "d0_path": "", "alt_path": "", "kind": "diffusion", "hidden": "128,128,128",
              "train_steps": "3000", "learning_rate": "0.02", "batch_size": "256", "uncond_dropout_prob": "0.1",
              "momentum": "0.9", "budget_ratio": "0.1", "seed": "0"},
    "nlg": {"steps": "20", "clip_threshold": "0.5", "extra_noise_var": "0.001", "renormalize": "true",
            "clip": "true", "step_grid": "0,2,5,10,20,30,40", "noise_grid": "0,0.001,0.0025,0.005,0.01",
            "align_cond": ""},
    "sampler": {"kind": "auto", "inference_steps": "20", "guidance": "cfg", "weight": "1.0",
                "weight_grid": "1,2.5,5,7.5", "sweep_weights": "1,7.5", "autoguide_weight": "2.0", "count": "512",
                "generate_cond": ""},
    "eval": {"classifier_steps": "2000", "quantile": "0.1", "rescue_steps": "5,10", "rescue_weight": "2.5",
             "n_candidates": "16", "hist_bin_width": "0.05", "mmd_bandwidth": ""},
}


@dataclass
class Config:
    """Resolved configuration; every section/key present with its effective value."""

    values: dict

    def get(self, section, key) -> str:
        return self.values[section][key]

    def int(self, section, key) -> int:
        return _convert(section, key, self.get(section, key), int)

    def float(self, section, key) -> float:
        return _convert(section, key, self.get(section, key), float)

    def bool(self, section, key) -> bool:
        text = self.get(section, key).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {text!r}")

    def ints(self, section, key) -> list:
        return [_convert(section, key, t, int) for t in _split(self.get(section, key))]

    def floats(self, section, key) -> list:
        return [_convert(section, key, t, float) for t in _split(self.get(section, key))]

    def set(self, section, key, value):
        if section not in self.values or key not in self.values[section]:
            raise ConfigError(f"unknown key [{section}] {key}")
        self.values[section][key] = str(value)

    def dumps(self, header=None) -> str:
        out = io.StringIO()
        if header:
            for line in header:
                out.write(f"# {line}\n")
        for section, entries in self.values.items():
            out.write(f"[{section}]\n")
            for k, v in entries.items():
                out.write(f"{k} = {v}\n")
            out.write("\n")
        return out.getvalue()


def _split(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _convert(section, key, text, fn):
    try:
        return fn(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None


def parse(text: str, extra_sections=()) -> Config:
    """Parse config text over the defaults. Unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {s: dict(d) for s, d in DEFAULTS.items()}
    for section in parser.sections():
        if section in extra_sections:
            values.setdefault(section, {}).update(parser[section])
            continue
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key, val in parser[section].items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            values[section][key] = val.strip()
    kind = values["experiment"]["kind"]
    if kind and kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    return Config(values)


def load(path) -> Config:
    try:
        with open(path) as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
