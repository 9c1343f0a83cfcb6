"""Experiment runners behind the CLI.

Each runner takes a resolved :class:`~nlglab.config.Config` and one seed and
returns named tables (lists of row dicts). The CLI writes the tables, the
plots and the manifest. Runners never take gradients, except ``train``.
"""
from __future__ import annotations

import dataclasses
import functools
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import datasets
from .config import Config
from .errors import ConfigError
from .evaluation import (Classifier, alignment_score, cond_accuracy, direction_length_histogram,
                         median_bandwidth, mmd, sliced_wasserstein, worst_aligned_rescue, best_of_n_baseline)
from .guidance import GuidanceSpec
from .models import checkpoint
from .models.conditions import NULL_TOKEN, ConditionToken
from .models.training import ModelPair, TrainConfig, epsilon_loss, make_quality_pair, train_diffusion, train_flow
from .nlg import NLGConfig, steps_for_guidance_scale
from .numerics import RngStream, row_norms, stream_id
from .sampling import Aligner, SamplerConfig, default_kind, generate_batch
from .schedules import rectified_flow, vp_cosine

TIMING_COLUMNS = ("wall_time", "wall_time_seconds")


# -- context ------------------------------------------------------------------


@dataclass
class Context:
    cfg: Config
    data: tuple
    num_classes: int
    model: object
    d0: object
    alt: object
    classifier: Classifier

    @property
    def schedule(self):
        return self.model.schedule

    @property
    def labels(self):
        return [ConditionToken.cls(k) for k in range(self.num_classes)]

    def reference(self, seed):
        cfg = self.cfg
        n = cfg.int("data", "num_reference")
        return _make_data(cfg, n, cfg.int("data", "seed") + 1_000_003 + seed)[0]

    def bandwidth(self, ref):
        text = self.cfg.get("eval", "mmd_bandwidth")
        return float(text) if text else median_bandwidth(ref, ref)


def _make_data(cfg: Config, n, seed):
    name = cfg.get("data", "dataset")
    if name == "ring":
        return datasets.make_ring(n, seed, cfg.int("data", "num_classes"), cfg.float("data", "radius"),
                                  cfg.float("data", "std"))
    if name == "line":
        return datasets.make_line(n, seed, cfg.int("data", "dim"), cfg.float("data", "offset"),
                                  cfg.float("data", "std"))
    raise ConfigError(f"unknown dataset {name!r}")


def _oracle(cfg: Config, schedule):
    name = cfg.get("data", "dataset")
    if name == "ring":
        return datasets.ring_oracle(schedule, cfg.int("data", "num_classes"), cfg.float("data", "radius"),
                                    cfg.float("data", "std"))
    return datasets.line_oracle(schedule, cfg.int("data", "dim"), cfg.float("data", "offset"),
                                cfg.float("data", "std"))


def _schedule_for(kind):
    if kind == "flow":
        return rectified_flow()
    if kind in ("diffusion", "quality_pair"):
        return vp_cosine()
    raise ConfigError(f"unknown model kind {kind!r}")


def load_model(cfg: Config, key: str, required=True):
    path = cfg.get("model", key)
    if not path:
        if required:
            raise ConfigError(f"[model] {key} is required for this experiment")
        return None
    if path.startswith("analytic"):
        kind = path.split(":", 1)[1] if ":" in path else cfg.get("model", "kind")
        return _oracle(cfg, _schedule_for(kind))
    if not os.path.exists(path):
        raise ConfigError(f"model checkpoint {path} not found")
    try:
        return checkpoint.load(path)
    except checkpoint.CheckpointError as exc:
        raise ConfigError(f"bad checkpoint {path}: {exc}") from None


def check_models(cfg: Config, kind: str):
    """Validate model paths up front so no compute starts on a broken config."""
    if kind == "train":
        return
    load_model(cfg, "path")
    if kind in ("autoguide_uncond", "autoguide_cond"):
        load_model(cfg, "d0_path")
    if kind == "cross_model":
        a, b = load_model(cfg, "path"), load_model(cfg, "alt_path")
        if a.dim != b.dim:
            raise ConfigError(f"cross_model needs equal dims, got {a.dim} and {b.dim}")


@functools.lru_cache(maxsize=4)
def _context_cached(text: str) -> Context:
    from .config import parse
    cfg = parse(text, extra_sections=("run",))
    return _build_context(cfg)


def build_context(cfg: Config) -> Context:
    """Context for ``cfg``; data, models and classifier are shared, the config is a private copy."""
    from .config import parse
    text = cfg.dumps()
    return dataclasses.replace(_context_cached(text), cfg=parse(text, extra_sections=("run",)))


def _build_context(cfg: Config) -> Context:
    data = _make_data(cfg, cfg.int("data", "num_train"), cfg.int("data", "seed"))
    num_classes = int(data[1].max()) + 1
    kind = cfg.get("experiment", "kind")
    model = load_model(cfg, "path") if kind != "train" else None
    if model is not None and model.dim != data[0].shape[1]:
        raise ConfigError(f"model dim {model.dim} does not match data dim {data[0].shape[1]}")
    d0 = load_model(cfg, "d0_path", required=False) if kind != "train" else None
    alt = load_model(cfg, "alt_path", required=False) if kind != "train" else None
    clf = Classifier(train_steps=cfg.int("eval", "classifier_steps"),
                     random_state=cfg.int("data", "seed")).fit(*data)
    return Context(cfg, data, num_classes, model, d0, alt, clf)


# -- helpers ------------------------------------------------------------------


def _sampler(ctx: Context, weight=None, mode=None, schedule=None, seed=0) -> SamplerConfig:
    cfg = ctx.cfg
    weight = cfg.float("sampler", "weight") if weight is None else weight
    mode = cfg.get("sampler", "guidance") if mode is None else mode
    spec = GuidanceSpec(mode, 1.0 if mode == "none" else float(weight))
    schedule = ctx.schedule if schedule is None else schedule
    kind = cfg.get("sampler", "kind")
    kind = default_kind(schedule) if kind == "auto" else kind
    return SamplerConfig(kind, cfg.int("sampler", "inference_steps"), spec, seed)


def _nlg(ctx: Context, pair, **overrides) -> NLGConfig:
    cfg = ctx.cfg
    kw = dict(steps=cfg.int("nlg", "steps"), clip_threshold=cfg.float("nlg", "clip_threshold"),
              extra_noise_var=cfg.float("nlg", "extra_noise_var"), renormalize=cfg.bool("nlg", "renormalize"),
              clip=cfg.bool("nlg", "clip"))
    kw.update(overrides)
    return NLGConfig.for_pair(pair, **kw)


def _metrics(ctx: Context, batch, ref, bw, seed, elapsed) -> dict:
    ok = batch.ok
    x = batch.samples[ok]
    conds = [c for c, k in zip(batch.conditions, ok) if k]
    row = {"mmd": mmd(x, ref, bw), "sliced_wasserstein": sliced_wasserstein(x, ref, 64, RngStream.derive(seed, "sw"))}
    if conds and all(c.is_class for c in conds):
        row["alignment_score"] = alignment_score(ctx.classifier, x, conds)
        row["cond_accuracy"] = cond_accuracy(ctx.classifier, x, conds)
    else:
        row["alignment_score"] = float("nan")
        row["cond_accuracy"] = float("nan")
    row["failures"] = len(batch.failures)
    row["model_evals"] = batch.model_evals
    row["wall_time"] = elapsed
    return row


def _run_cell(ctx, pair, sampler, labels, seed, aligner=None, ref=None, bw=None):
    t0 = time.perf_counter()
    batch = generate_batch(pair, pair.schedule, sampler, ctx.cfg.int("sampler", "count"), labels, aligner,
                           seed=seed)
    elapsed = time.perf_counter() - t0
    return batch, _metrics(ctx, batch, ref, bw, seed, elapsed)


def _aligner(ctx, pair, steps, **kw):
    return Aligner(_nlg(ctx, pair, steps=steps, **kw)) if steps > 0 else None


# -- runners ------------------------------------------------------------------


def run_sweep_steps(ctx: Context, seed: int) -> dict:
    pair = ModelPair.single(ctx.model)
    ref = ctx.reference(seed)
    bw = ctx.bandwidth(ref)
    rows = []
    for w in ctx.cfg.floats("sampler", "sweep_weights"):
        sampler = _sampler(ctx, w, seed=seed)
        for s in ctx.cfg.ints("nlg", "step_grid"):
            _, m = _run_cell(ctx, pair, sampler, ctx.labels, seed, _aligner(ctx, pair, s), ref, bw)
            rows.append({"seed": seed, "guidance_weight": w, "steps": s, **m})
    return {"metrics": rows}


def run_sweep_guidance(ctx: Context, seed: int) -> dict:
    pair = ModelPair.single(ctx.model)
    ref = ctx.reference(seed)
    bw = ctx.bandwidth(ref)
    rows = []
    for w in ctx.cfg.floats("sampler", "weight_grid"):
        sampler = _sampler(ctx, w, seed=seed)
        for s in (0, steps_for_guidance_scale(w)):
            _, m = _run_cell(ctx, pair, sampler, ctx.labels, seed, _aligner(ctx, pair, s), ref, bw)
            rows.append({"seed": seed, "guidance_weight": w, "steps": s, **m})
    return {"metrics": rows}


def run_sweep_noise_level(ctx: Context, seed: int) -> dict:
    pair = ModelPair.single(ctx.model)
    ref = ctx.reference(seed)
    bw = ctx.bandwidth(ref)
    sampler = _sampler(ctx, seed=seed)
    rows = []
    for level in ctx.cfg.floats("nlg", "noise_grid"):
        for s in ctx.cfg.ints("nlg", "step_grid"):
            _, m = _run_cell(ctx, pair, sampler, ctx.labels, seed,
                             _aligner(ctx, pair, s, extra_noise_var=level), ref, bw)
            rows.append({"seed": seed, "extra_noise_var": level, "steps": s, **m})
    return {"metrics": rows}


def norm_deviation(batch, sigma_max) -> float:
    """Mean relative deviation of the (aligned) noise norms from sigma_max*sqrt(dim)."""
    radius = sigma_max * math.sqrt(batch.n_aligned.shape[1])
    return float(np.mean(np.abs(row_norms(batch.n_aligned) / radius - 1.0)))


def run_ablate_normalization(ctx: Context, seed: int) -> dict:
    pair = ModelPair.single(ctx.model)
    ref = ctx.reference(seed)
    bw = ctx.bandwidth(ref)
    sampler = _sampler(ctx, seed=seed)
    rows = []
    for renorm in (True, False):
        batch, m = _run_cell(ctx, pair, sampler, ctx.labels, seed,
                             _aligner(ctx, pair, ctx.cfg.int("nlg", "steps"), renormalize=renorm), ref, bw)
        rows.append({"seed": seed, "renormalize": int(renorm),
                     "norm_deviation": norm_deviation(batch, ctx.schedule.sigma_max), **m})
    return {"metrics": rows}


def run_ablate_clipping(ctx: Context, seed: int) -> dict:
    pair = ModelPair.single(ctx.model)
    ref = ctx.reference(seed)
    bw = ctx.bandwidth(ref)
    sampler = _sampler(ctx, seed=seed)
    rows = []
    hist = []
    for clip in (True, False):
        batch, m = _run_cell(ctx, pair, sampler, ctx.labels, seed,
                             _aligner(ctx, pair, ctx.cfg.int("nlg", "steps"), clip=clip), ref, bw)
        traces = [t for t in batch.traces if t is not None]
        clipped = sum(r.clipped for t in traces for r in t.records)
        rows.append({"seed": seed, "clip": int(clip), "clipped_steps": clipped, **m})
        if clip and traces:
            lefts, counts = direction_length_histogram(traces, ctx.cfg.float("eval", "hist_bin_width"))
            hist = [{"seed": seed, "bin_left": float(b), "count": int(c)} for b, c in zip(lefts, counts)]
    return {"metrics": rows, "histogram": hist}


def _autoguide(ctx: Context, seed: int, conditional: bool) -> dict:
    if ctx.d0 is None:
        raise ConfigError("autoguide experiments need [model] d0_path")
    pair = ModelPair(ctx.model, ctx.d0)
    ref = ctx.reference(seed)
    bw = ctx.bandwidth(ref)
    labels = ctx.labels if conditional else [NULL_TOKEN]
    w = ctx.cfg.float("sampler", "autoguide_weight")
    rows = []
    for autog in (False, True):
        sampler = _sampler(ctx, w if autog else 1.0, "autoguide" if autog else "none", seed=seed)
        for steps in (0, ctx.cfg.int("nlg", "steps")):
            _, m = _run_cell(ctx, pair, sampler, labels, seed, _aligner(ctx, pair, steps), ref, bw)
            rows.append({"seed": seed, "conditional": int(conditional), "autoguide": int(autog),
                         "guidance_weight": w if autog else 1.0, "steps": steps, **m})
    return {"metrics": rows}


def run_autoguide_uncond(ctx, seed):
    return _autoguide(ctx, seed, False)


def run_autoguide_cond(ctx, seed):
    return _autoguide(ctx, seed, True)


def _class_means(ctx: Context):
    x, y = ctx.data
    return np.stack([x[y == k].mean(axis=0) for k in range(ctx.num_classes)])


def run_dual_condition(ctx: Context, seed: int) -> dict:
    a_text, b_text = ctx.cfg.get("nlg", "align_cond"), ctx.cfg.get("sampler", "generate_cond")
    if not a_text or not b_text:
        raise ConfigError("dual_condition needs [nlg] align_cond and [sampler] generate_cond")
    cond_a, cond_b = ConditionToken.parse(a_text), ConditionToken.parse(b_text)
    pair = ModelPair.single(ctx.model)
    sampler = _sampler(ctx, seed=seed)
    count = ctx.cfg.int("sampler", "count")
    steps = ctx.cfg.int("nlg", "steps")
    aligner = Aligner(_nlg(ctx, pair), positive=cond_a) if steps > 0 else None
    base = generate_batch(pair, ctx.schedule, sampler, count, [cond_b], seed=seed)
    dual = generate_batch(pair, ctx.schedule, sampler, count, [cond_b], aligner, seed=seed)
    means = _class_means(ctx)
    direction = np.zeros(pair.dim)
    if cond_a.is_class and cond_b.is_class and cond_a != cond_b:
        direction = means[cond_a.value] - means[cond_b.value]
        direction /= np.linalg.norm(direction)
    shift = float((np.nanmean(dual.samples, axis=0) - np.nanmean(base.samples, axis=0)) @ direction)
    row = {"seed": seed, "align_cond": str(cond_a), "generate_cond": str(cond_b), "steps": steps,
           "shift_toward_align": shift}
    for role, cond in (("generate", cond_b), ("align", cond_a)):
        for name, b in (("base", base), ("dual", dual)):
            row[f"alignment_{role}_{name}"] = (alignment_score(ctx.classifier, b.samples, [cond] * count)
                                               if cond.is_class else float("nan"))
    samples = []
    for name, b in (("baseline", base), ("dual", dual)):
        for i, x in enumerate(b.samples):
            samples.append({"seed": seed, "run": name, "sample_index": i, "condition": str(b.conditions[i]),
                            **{f"x{j}": float(v) for j, v in enumerate(x)}})
    return {"metrics": [row], "samples": samples}


def run_cross_model(ctx: Context, seed: int) -> dict:
    if ctx.alt is None:
        raise ConfigError("cross_model needs [model] alt_path")
    models = {"model": ctx.model, "alt": ctx.alt}
    if ctx.model.dim != ctx.alt.dim:
        raise ConfigError("cross_model needs models with equal data dims")
    ref = ctx.reference(seed)
    bw = ctx.bandwidth(ref)
    steps = ctx.cfg.int("nlg", "steps")
    rows = []
    for gen_name, gen in models.items():
        gen_pair = ModelPair.single(gen)
        sampler = _sampler(ctx, schedule=gen.schedule, seed=seed)
        cells = [("none", None)] + [(n, Aligner(_nlg(ctx, ModelPair.single(m), steps=steps),
                                                pair=ModelPair.single(m))) for n, m in models.items()]
        for align_name, aligner in cells:
            batch, m = _run_cell(ctx, gen_pair, sampler, ctx.labels, seed, aligner, ref, bw)
            rows.append({"seed": seed, "align_with": align_name, "generate_with": gen_name,
                         "base_noise_checksum": float(np.sum(batch.n_init)), **m})
    return {"metrics": rows}


def run_rescue_worst(ctx: Context, seed: int) -> dict:
    pair = ModelPair.single(ctx.model)
    sampler = _sampler(ctx, ctx.cfg.float("eval", "rescue_weight"), "cfg", seed=seed)
    count = ctx.cfg.int("sampler", "count")
    quantile = ctx.cfg.float("eval", "quantile")
    baseline = generate_batch(pair, ctx.schedule, sampler, count, ctx.labels, seed=seed)
    rows = []
    for s in ctx.cfg.ints("eval", "rescue_steps"):
        rep = worst_aligned_rescue(pair, ctx.schedule, sampler, ctx.labels, count, ctx.classifier, quantile,
                                   _nlg(ctx, pair, steps=s), seed=seed, baseline=baseline)
        rows.append({"seed": seed, "guidance_weight": sampler.guidance.weight, "steps": s, "quantile": quantile,
                     "selected": len(rep.indices), "mean_base_score": float(np.mean(rep.base_scores)),
                     "mean_delta": rep.mean_delta, "frac_improved": float(np.mean(rep.deltas > 0))})
    return {"metrics": rows}


def run_baseline_best_of_n(ctx: Context, seed: int) -> dict:
    pair = ModelPair.single(ctx.model)
    sampler = _sampler(ctx, seed=seed)
    count = ctx.cfg.int("sampler", "count")
    n_cand = ctx.cfg.int("eval", "n_candidates")
    labels = ctx.labels
    t0 = time.perf_counter()
    best, evals = [], 0
    for i in range(count):
        y = labels[i % len(labels)]
        sub = stream_id(seed, "best-of-n", i) & 0x7FFFFFFF
        x, e = best_of_n_baseline(pair, ctx.schedule, sampler, y, n_cand, ctx.classifier, seed=sub)
        best.append(x)
        evals += e
    t_best = time.perf_counter() - t0
    conds = [labels[i % len(labels)] for i in range(count)]
    rows = []
    for name, aligner in (("gaussian", None), ("nlg", _aligner(ctx, pair, ctx.cfg.int("nlg", "steps")))):
        t0 = time.perf_counter()
        batch = generate_batch(pair, ctx.schedule, sampler, count, labels, aligner, seed=seed)
        rows.append({"seed": seed, "method": name, "alignment_score": alignment_score(ctx.classifier, batch.samples, conds),
                     "cond_accuracy": cond_accuracy(ctx.classifier, batch.samples, conds),
                     "model_evals_per_sample": batch.model_evals / count, "wall_time": time.perf_counter() - t0})
    best = np.stack(best)
    rows.append({"seed": seed, "method": f"best_of_{n_cand}",
                 "alignment_score": alignment_score(ctx.classifier, best, conds),
                 "cond_accuracy": cond_accuracy(ctx.classifier, best, conds),
                 "model_evals_per_sample": evals / count, "wall_time": t_best})
    return {"metrics": rows}


def run_eval(ctx: Context, seed: int) -> dict:
    pair = ModelPair.single(ctx.model)
    ref = ctx.reference(seed)
    bw = ctx.bandwidth(ref)
    sampler = _sampler(ctx, seed=seed)
    rows = []
    for s in (0, ctx.cfg.int("nlg", "steps")):
        _, m = _run_cell(ctx, pair, sampler, ctx.labels, seed, _aligner(ctx, pair, s), ref, bw)
        rows.append({"seed": seed, "steps": s, "guidance_weight": sampler.guidance.weight,
                     "mmd_bandwidth": bw, **m})
    return {"metrics": rows}


def run_sample(ctx: Context, seed: int) -> dict:
    pair = ModelPair.single(ctx.model)
    sampler = _sampler(ctx, seed=seed)
    gen = ctx.cfg.get("sampler", "generate_cond")
    labels = [ConditionToken.parse(gen)] if gen else ctx.labels
    batch = generate_batch(pair, ctx.schedule, sampler, ctx.cfg.int("sampler", "count"), labels,
                           _aligner(ctx, pair, ctx.cfg.int("nlg", "steps")), seed=seed)
    rows = [{"seed": seed, "sample_index": i, "condition": str(c), **{f"x{j}": float(v) for j, v in enumerate(x)}}
            for i, (x, c) in enumerate(zip(batch.samples, batch.conditions))]
    return {"samples": rows, "_failures": len(batch.failures)}


def run_align(ctx: Context, seed: int) -> dict:
    from .nlg import align_noise_batch
    from .sampling import initial_noise, item_streams
    pair = ModelPair.single(ctx.model)
    count = ctx.cfg.int("sampler", "count")
    a_text = ctx.cfg.get("nlg", "align_cond")
    labels = [ConditionToken.parse(a_text)] if a_text else ctx.labels
    y1 = [labels[i % len(labels)] for i in range(count)]
    items = range(count)
    n0 = initial_noise(seed, items, pair.dim, pair.schedule.sigma_max)
    n, traces = align_noise_batch(pair, y1, NULL_TOKEN, _nlg(ctx, pair), item_streams(seed, "align", items), n0)
    noise = [{"seed": seed, "item": i, "condition": str(y1[i]), **{f"n{j}": float(v) for j, v in enumerate(row)}}
             for i, row in enumerate(n)]
    trace_rows = [{"seed": seed, "item": i, "step": k, "d_norm_preclip": r.d_norm_preclip, "clipped": int(r.clipped),
                   "n_norm_post": r.n_norm_post} for i, t in enumerate(traces) for k, r in enumerate(t.records)]
    out = {"noise": noise, "traces": trace_rows}
    if traces and traces[0].records:
        lefts, counts = direction_length_histogram(traces, ctx.cfg.float("eval", "hist_bin_width"))
        out["histogram"] = [{"seed": seed, "bin_left": float(b), "count": int(c)} for b, c in zip(lefts, counts)]
    return out


RUNNERS = {
    "sweep_steps": run_sweep_steps, "sweep_guidance": run_sweep_guidance, "sweep_noise_level": run_sweep_noise_level,
    "ablate_normalization": run_ablate_normalization, "ablate_clipping": run_ablate_clipping,
    "autoguide_uncond": run_autoguide_uncond, "autoguide_cond": run_autoguide_cond,
    "dual_condition": run_dual_condition, "cross_model": run_cross_model, "rescue_worst": run_rescue_worst,
    "baseline_best_of_n": run_baseline_best_of_n, "eval": run_eval, "sample": run_sample, "align": run_align,
}


def run_seed(cfg_text: str, seed: int) -> dict:
    """Worker entry point: rebuild (cached) context from config text and run one seed."""
    ctx = _context_cached(cfg_text)
    return RUNNERS[ctx.cfg.get("experiment", "kind")](ctx, seed)


# -- training -----------------------------------------------------------------


def train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(cfg.float("model", "learning_rate"), cfg.int("model", "batch_size"),
                       cfg.int("model", "train_steps"), cfg.float("model", "uncond_dropout_prob"),
                       cfg.int("model", "seed"), cfg.float("model", "momentum"))


def run_train(cfg: Config, out_dir: str) -> dict:
    """Train the configured model(s); checkpoints go to [model] path/d0_path or ``out_dir``."""
    data = _make_data(cfg, cfg.int("data", "num_train"), cfg.int("data", "seed"))
    kind = cfg.get("model", "kind")
    arch = tuple(cfg.ints("model", "hidden"))
    tc = train_config(cfg)
    schedule = _schedule_for(kind)
    if kind == "quality_pair":
        pair = make_quality_pair(data, schedule, tc, arch, cfg.float("model", "budget_ratio"))
        nets = {"path": pair.d1, "d0_path": pair.d0}
    elif kind == "flow":
        nets = {"path": train_flow(data, arch, tc, schedule=schedule)}
    else:
        nets = {"path": train_diffusion(data, schedule, arch, tc)}
    held_x, held_y = _make_data(cfg, 4096, cfg.int("data", "seed") + 7)
    rows = []
    for key, net in nets.items():
        path = cfg.get("model", key) or os.path.join(out_dir, "model.nlgm" if key == "path" else "model_d0.nlgm")
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        checkpoint.save(net, path)
        loss = epsilon_loss(net, held_x, held_y, net.schedule, RngStream.derive(cfg.int("model", "seed"), "heldout"))
        rows.append({"role": key, "checkpoint": os.path.basename(path), "parameterization": net.parameterization.name,
                     "hidden": "x".join(map(str, net.hidden_widths)), "heldout_loss": float(np.mean(loss))})
    return {"training": rows}
