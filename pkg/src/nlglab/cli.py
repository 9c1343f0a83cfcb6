"""Command-line entry point: ``nlglab <subcommand> --config PATH [--seed N] [--out DIR] [--jobs N]``.

Every run writes ``manifest.txt`` with the resolved configuration. ``nlglab
reproduce DIR/manifest.txt`` re-runs it and compares the CSV outputs byte for
byte, ignoring wall-clock columns.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from . import config as config_mod
from . import experiments
from .errors import ConfigError, NumericalFailure
from .plotting import emit_plot

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 1, 2, 3, 4
MANIFEST = "manifest.txt"

# columns that identify a cell; everything else numeric is averaged in summaries
KEY_COLUMNS = ("guidance_weight", "steps", "extra_noise_var", "renormalize", "clip", "conditional", "autoguide",
               "align_with", "generate_with", "method", "quantile", "align_cond", "generate_cond", "role")

PLOTS = {
    "sweep_steps": ("line", "steps", "alignment_score", "guidance_weight"),
    "sweep_guidance": ("line", "guidance_weight", "alignment_score", "steps"),
    "sweep_noise_level": ("line", "steps", "alignment_score", "extra_noise_var"),
}


# -- tables -------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def table_csv(rows) -> str:
    columns = []
    for r in rows:
        columns.extend(k for k in r if k not in columns)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c, "")) for c in columns])
    return out.getvalue()


def summarize(rows) -> list:
    """Mean of every metric column over seeds, one row per cell (cells in first-seen order)."""
    cells = {}
    for r in rows:
        key = tuple((k, r[k]) for k in KEY_COLUMNS if k in r)
        cells.setdefault(key, []).append(r)
    out = []
    for key, group in cells.items():
        row = dict(key)
        row["num_seeds"] = len(group)
        for col in group[0]:
            if col in row or col == "seed" or isinstance(group[0][col], str):
                continue
            row[col] = float(np.mean([g[col] for g in group]))
        out.append(row)
    return out


def sum_histograms(rows) -> list:
    counts = {}
    for r in rows:
        counts[r["bin_left"]] = counts.get(r["bin_left"], 0) + r["count"]
    return [{"bin_left": b, "count": counts[b]} for b in sorted(counts)]


def strip_timing(text: str) -> str:
    """Drop wall-clock columns so timing noise does not count as a mismatch."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return text
    keep = [i for i, c in enumerate(rows[0]) if c not in experiments.TIMING_COLUMNS]
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    for r in rows:
        writer.writerow([r[i] for i in keep if i < len(r)])
    return out.getvalue()


# -- running ------------------------------------------------------------------


def _resolve(cfg, subcommand, seed):
    kind = cfg.get("experiment", "kind") or config_mod.SUBCOMMAND_KINDS[subcommand][0]
    if kind not in config_mod.SUBCOMMAND_KINDS[subcommand]:
        allowed = ", ".join(config_mod.SUBCOMMAND_KINDS[subcommand])
        raise ConfigError(f"experiment kind {kind!r} does not belong to '{subcommand}' (expected one of {allowed})")
    cfg.set("experiment", "kind", kind)
    if seed is not None:
        cfg.set("experiment", "seeds", seed)
    if not cfg.ints("experiment", "seeds"):
        raise ConfigError("no seeds configured")
    for key in ("path", "d0_path", "alt_path"):
        path = cfg.get("model", key)
        if path and not path.startswith("analytic"):
            cfg.set("model", key, os.path.abspath(path))
    return kind


def _prepare_out(out, overwrite):
    if os.path.isdir(out) and os.listdir(out) and not overwrite:
        raise ConfigError(f"output directory {out} is not empty (use --overwrite)")
    os.makedirs(out, exist_ok=True)


def manifest_text(cfg, subcommand) -> str:
    header = [f"nlglab {__version__}", "replay with: nlglab reproduce <this file>"]
    return cfg.dumps(header) + f"[run]\ncommand = {subcommand}\nversion = {__version__}\n"


def execute(cfg, subcommand, out, jobs=1, log=print) -> int:
    """Run a resolved config into ``out``; returns an exit code."""
    kind = cfg.get("experiment", "kind")
    experiments.check_models(cfg, kind)
    with open(os.path.join(out, MANIFEST), "w") as fh:
        fh.write(manifest_text(cfg, subcommand))
    if kind == "train":
        tables = experiments.run_train(cfg, out)
        _write(out, "training.csv", table_csv(tables["training"]))
        log(f"trained {len(tables['training'])} model(s) into {out}")
        return EXIT_OK
    seeds = cfg.ints("experiment", "seeds")
    text = cfg.dumps()
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(experiments.run_seed, [text] * len(seeds), seeds))
    else:
        results = [experiments.run_seed(text, s) for s in seeds]
    # results come back in seed-list order; sort so the job layout cannot matter
    order = np.argsort(seeds, kind="stable")
    results = [results[i] for i in order]
    partial = 0
    tables = {}
    for res in results:
        for name, rows in res.items():
            if name.startswith("_"):
                partial += rows
                continue
            tables.setdefault(name, []).extend(rows)
    for name, rows in tables.items():
        partial += sum(int(r.get("failures", 0)) for r in rows)
        _write(out, f"{name}.csv", table_csv(rows))
    _plots(kind, tables, out)
    log(f"{kind}: wrote {', '.join(sorted(tables))} for seeds {sorted(seeds)} into {out}")
    if partial:
        log(f"{partial} item(s) failed; see failures columns")
        return EXIT_PARTIAL
    return EXIT_OK


def _write(out, name, text):
    with open(os.path.join(out, name), "w", newline="") as fh:
        fh.write(text)


def _plots(kind, tables, out):
    metrics = tables.get("metrics")
    if metrics:
        summary = summarize(metrics)
        _write(out, "summary.csv", table_csv(summary))
        if kind in PLOTS:
            plot, x, y, series = PLOTS[kind]
            emit_plot(summary, plot, os.path.join(out, f"{kind}.svg"), x, y, series, title=kind)
    if tables.get("histogram"):
        hist = sum_histograms(tables["histogram"])
        _write(out, "histogram_total.csv", table_csv(hist))
        emit_plot(hist, "histogram", os.path.join(out, "direction_lengths.svg"), title="edit direction lengths")
    samples = tables.get("samples")
    if samples and "x1" in samples[0]:
        first = samples[0]["seed"]
        emit_plot([r for r in samples if r["seed"] == first], "scatter2d", os.path.join(out, "samples.svg"),
                  series="run" if "run" in samples[0] else "condition")


def reproduce(manifest, out=None, jobs=1, log=print) -> int:
    """Re-run ``manifest`` into ``out`` and compare every CSV with the original run."""
    try:
        with open(manifest) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {manifest}: {exc}") from None
    cfg = config_mod.parse(text, extra_sections=("run",))
    run = cfg.values.pop("run", {})
    subcommand = run.get("command")
    if subcommand not in config_mod.SUBCOMMAND_KINDS:
        raise ConfigError("manifest lacks a valid [run] command")
    src = os.path.dirname(os.path.abspath(manifest))
    out = out or os.path.join(src, "reproduce")
    _prepare_out(out, overwrite=True)
    if cfg.get("experiment", "kind") == "train":
        # retrain into the new directory, never over the original checkpoints
        for key in ("path", "d0_path"):
            if cfg.get("model", key):
                cfg.set("model", key, os.path.join(out, os.path.basename(cfg.get("model", key))))
    code = execute(cfg, subcommand, out, jobs, log)
    originals = sorted(f for f in os.listdir(src) if f.endswith(".csv"))
    mismatched = []
    for name in originals:
        new_path = os.path.join(out, name)
        if not os.path.exists(new_path):
            mismatched.append(name)
            continue
        with open(os.path.join(src, name)) as a, open(new_path) as b:
            if strip_timing(a.read()) != strip_timing(b.read()):
                mismatched.append(name)
    for name in originals:
        log(f"{'MISMATCH' if name in mismatched else 'identical'} {name}")
    if mismatched:
        return EXIT_MISMATCH
    return code


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlglab", description="Noise-level guidance experiments at toy scale.")
    parser.add_argument("--version", action="version", version=f"nlglab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kinds in config_mod.SUBCOMMAND_KINDS.items():
        p = sub.add_parser(name, help=f"experiment kinds: {', '.join(kinds)}")
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--out", help="output directory (default runs/<kind>)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes over seeds")
        p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty directory")
    p = sub.add_parser("reproduce", help="re-run a manifest and compare CSV outputs")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default <manifest dir>/reproduce)")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "reproduce":
            return reproduce(args.manifest, args.out, args.jobs)
        cfg = config_mod.load(args.config)
        kind = _resolve(cfg, args.command, args.seed)
        out = args.out or os.path.join("runs", kind)
        experiments.check_models(cfg, kind)
        _prepare_out(out, args.overwrite)
        return execute(cfg, args.command, out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
