"""Command-line entry point: ingest, synth, benchmark, report.

Errors are reported as one line on stderr,

    precip-uq: error: <command>: <exit code>: <reason>

and the process exits with that code:

    2  malformed input (CSV row, config, missing file)
    3  ingestion produced zero samples
    4  the benchmark learner is absent from the config
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import bench, geodata
from .scoring import DEFAULT_LEVELS, LevelGrid, ScoreTable

log = logging.getLogger("precip_uq")

CONFIG_VERSION = 1
EXIT_INPUT, EXIT_EMPTY, EXIT_NO_BENCHMARK = 2, 3, 4
DATASET_NAME = "dataset.jsonl"


class CliError(Exception):
    def __init__(self, code: int, reason: str):
        super().__init__(reason)
        self.code = code


# -------------------------------------------------------------------- config

_DATA_KEYS = {"gauges", "field_a", "field_b", "regrid_b_to_a", "dataset"}
_TOP_KEYS = {"version", "levels", "folds", "fold_granularity", "seed", "learners",
             "benchmark_learner", "importance", "data", "output", "plots"}


@dataclass
class RunConfig:
    levels: tuple[float, ...] = DEFAULT_LEVELS
    folds: int = 5
    fold_granularity: str = "sample"
    seed: int = 0
    learners: dict[str, bench.LearnerSpec] = field(default_factory=bench.default_learners)
    benchmark_learner: str = "qr"
    importance: bool = False
    data: dict[str, Any] = field(default_factory=dict)
    output: str | None = None
    plots: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if d.get("version") != CONFIG_VERSION:
            raise ValueError(f"config version must be {CONFIG_VERSION}, got {d.get('version')!r}")
        cfg = cls()
        if "levels" in d:
            cfg.levels = tuple(float(a) for a in d["levels"])
        for key, typ in (("folds", int), ("seed", int), ("fold_granularity", str),
                         ("benchmark_learner", str), ("importance", bool), ("plots", bool)):
            if key in d:
                if not isinstance(d[key], typ) or (typ is int and isinstance(d[key], bool)):
                    raise ValueError(f"config key {key!r} must be {typ.__name__}")
                setattr(cfg, key, d[key])
        if "learners" in d:
            cfg.learners = {}
            for name, block in d["learners"].items():
                if not isinstance(block, dict) or set(block) - {"kind", "params"} or "kind" not in block:
                    raise ValueError(f"learner {name!r} needs a 'kind' and optional 'params'")
                cfg.learners[name] = bench.LearnerSpec(block["kind"], dict(block.get("params", {})))
        if "data" in d:
            unknown = set(d["data"]) - _DATA_KEYS
            if unknown:
                raise ValueError(f"unknown data keys: {sorted(unknown)}")
            cfg.data = dict(d["data"])
        if "output" in d:
            cfg.output = str(d["output"])
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"cannot read config {path}: {exc.strerror}") from None
        try:
            return cls.from_dict(json.loads(text))
        except (ValueError, TypeError) as exc:
            raise CliError(EXIT_INPUT, f"invalid config {path}: {exc}") from None

    def benchmark_config(self) -> bench.BenchmarkConfig:
        if self.benchmark_learner not in self.learners:
            raise CliError(EXIT_NO_BENCHMARK,
                           f"benchmark learner {self.benchmark_learner!r} is not configured")
        try:
            return bench.BenchmarkConfig(
                learners=self.learners, level_grid=LevelGrid(self.levels),
                benchmark_learner=self.benchmark_learner, folds=self.folds,
                fold_granularity=self.fold_granularity, seed=self.seed,
                importance=self.importance,
            )
        except ValueError as exc:
            raise CliError(EXIT_INPUT, f"invalid config: {exc}") from None


def _run_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "plots", False):
        cfg.plots = True
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.output
    if out is None:
        raise CliError(EXIT_INPUT, "no output directory given (use --out)")
    return Path(out)


# ------------------------------------------------------------- formatting

def format_percent(value: float | None) -> str:
    return "n/a" if value is None else f"{100.0 * value:.2f}%"


def format_count(n: int) -> str:
    """Thousands grouped with spaces, e.g. 91 623."""
    return f"{n:,}".replace(",", " ")


def ranking_table(table: ScoreTable) -> str:
    lines = [f"{'rank':>4}  {'learner':<10} {'skill':>8} {'skill %':>9}  mean scoring rule"]
    for k, (name, s) in enumerate(bench.scoring_rule_ranking(table), 1):
        msr = table.mean_scoring_rule[name]
        raw = "failed" if s is None else f"{s:.4f}"
        lines.append(f"{k:>4}  {name:<10} {raw:>8} {format_percent(s):>9}  "
                     f"{'n/a' if msr is None else f'{msr:.6g}'}")
    return "\n".join(lines)


def _grid_table(title: str, rows: dict[str, list], levels, fmt) -> str:
    head = f"{title:<10}" + "".join(f"{a:>9.3f}" for a in levels)
    body = [f"{name:<10}" + "".join(f"{fmt(v):>9}" for v in vals) for name, vals in rows.items()]
    return "\n".join([head, *body])


def importance_table(imp: dict) -> str:
    levels = imp["levels"]
    head = f"{'predictor':<12}" + "".join(f"{a:>7.3f}" for a in levels)
    rows = []
    for j, name in enumerate(imp["predictors"]):
        rows.append(f"{name:<12}" + "".join(f"{imp['rank'][i][j]:>7d}" for i in range(len(levels))))
    return "\n".join([head, *rows])


def render_report(d: dict) -> str:
    """Human-readable tables from a parsed report.json."""
    t = ScoreTable.from_dict(d["scores"])
    cfg = d["config"]
    parts = [
        f"samples: {format_count(d['n_samples'])}   folds: {cfg['folds']} ({cfg['fold_granularity']})"
        f"   seed: {cfg['seed']}   benchmark: {t.benchmark}",
        "",
        "quantile scoring rule skill",
        ranking_table(t),
        "",
        _grid_table("skill", t.level_skills, t.levels, format_percent),
        "",
        _grid_table("coverage", t.coverage, t.levels,
                    lambda v: "n/a" if v is None else f"{v:.4f}"),
    ]
    if d.get("failures"):
        parts += ["", "failed learners:"] + [f"  {k}: {v}" for k, v in sorted(d["failures"].items())]
    if d.get("importance"):
        parts += ["", "predictor importance ranks (1 = largest total gain)",
                  importance_table(d["importance"])]
    return "\n".join(parts)


# ------------------------------------------------------------------ plots

def write_plots(d: dict, out_dir) -> list[Path]:
    """SVG coverage curves, per-level skill heatmap and scoring-rule skill bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "precip-uq"
    t = ScoreTable.from_dict(d["scores"])
    out = Path(out_dir)
    meta = {"Date": None}
    ok = [n for n in t.learners if t.scoring_rule_skill[n] is not None]
    written = []

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    for name in ok:
        ax.plot(t.levels, t.coverage[name], marker="o", ms=3, label=name)
    ax.set_xlabel("nominal level")
    ax.set_ylabel("empirical coverage")
    ax.legend(frameon=False)
    written.append(out / "coverage.svg")
    fig.savefig(written[-1], metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(1 + 0.7 * len(t.levels), 1 + 0.5 * max(len(ok), 1)))
    grid = np.array([[np.nan if v is None else 100 * v for v in t.level_skills[n]] for n in ok])
    grid = grid.reshape(len(ok), len(t.levels))
    lim = max(1e-9, float(np.nanmax(np.abs(grid), initial=0.0)))
    im = ax.imshow(grid, cmap="RdBu", aspect="auto", vmin=-lim, vmax=lim)
    ax.set_xticks(range(len(t.levels)), [f"{a:g}" for a in t.levels], rotation=45)
    ax.set_yticks(range(len(ok)), ok)
    fig.colorbar(im, ax=ax, label="skill (%)")
    fig.tight_layout()
    written.append(out / "skill_heatmap.svg")
    fig.savefig(written[-1], metadata=meta)
    plt.close(fig)

    ranked = [(n, s) for n, s in bench.scoring_rule_ranking(t) if s is not None]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar([n for n, _ in ranked], [100 * s for _, s in ranked])
    ax.axhline(0, color="black", lw=0.8)
    ax.set_ylabel("scoring rule skill (%)")
    fig.tight_layout()
    written.append(out / "skill_bars.svg")
    fig.savefig(written[-1], metadata=meta)
    plt.close(fig)
    return written


# --------------------------------------------------------------- commands

def _load_dataset(path) -> geodata.Dataset:
    try:
        return geodata.Dataset.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"dataset not found: {path}") from None
    except geodata.IngestError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None


def cmd_ingest(args) -> int:
    cfg = _run_config(args)
    data = dict(cfg.data)
    for key in ("gauges", "field_a", "field_b"):
        if getattr(args, key):
            data[key] = getattr(args, key)
    if args.regrid:
        data["regrid_b_to_a"] = True
    missing = [k for k in ("gauges", "field_a", "field_b") if not data.get(k)]
    if missing:
        raise CliError(EXIT_INPUT, f"missing input paths: {', '.join(missing)}")
    try:
        gauges = geodata.read_gauge_csv(data["gauges"])
        fa = geodata.read_grid_csv(data["field_a"], "field_a")
        fb = geodata.read_grid_csv(data["field_b"], "field_b")
        fa, fb = (geodata.aggregate_daily_to_monthly(f) if f.is_daily else f for f in (fa, fb))
        if data.get("regrid_b_to_a"):
            fb = geodata.regrid_bilinear(fb, fa.lat_axis, fa.lon_axis)
        ds = geodata.build_samples(gauges, fa, fb)
    except FileNotFoundError as exc:
        raise CliError(EXIT_INPUT, f"file not found: {exc.filename}") from None
    except geodata.NoSamples as exc:
        raise CliError(EXIT_EMPTY, str(exc)) from None
    except ValueError as exc:  # IngestError included; it carries path and line
        raise CliError(EXIT_INPUT, str(exc)) from None

    path = Path(args.dataset) if args.dataset else _out_dir(args, cfg) / DATASET_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.save(path)
    print(f"samples: {format_count(len(ds))} from {format_count(len(ds.station_index))} stations")
    reasons = Counter(s["reason"] for s in ds.skips)
    print(f"skipped: {format_count(len(ds.skips))}")
    for reason, count in sorted(reasons.items()):
        print(f"  {reason}: {format_count(count)}")
    print(f"wrote {path}")
    return 0


def _synthetic(name: str, n: int, seed: int) -> geodata.Dataset:
    try:
        scen = bench.SyntheticScenario(name, n=n, seed=seed)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    return bench.generate_synthetic(scen)[0]


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    if not args.synth:
        raise CliError(EXIT_INPUT, "synth needs --synth NAME")
    ds = _synthetic(args.synth, args.n, cfg.seed)
    path = Path(args.dataset) if args.dataset else _out_dir(args, cfg) / DATASET_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.save(path)
    print(f"samples: {format_count(len(ds))} ({args.synth}, seed {cfg.seed})")
    print(f"wrote {path}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _run_config(args)
    bcfg = cfg.benchmark_config()
    out = _out_dir(args, cfg)
    if args.synth:
        ds = _synthetic(args.synth, args.n, cfg.seed)
    else:
        path = args.dataset or cfg.data.get("dataset")
        if not path:
            raise CliError(EXIT_INPUT, "benchmark needs --dataset PATH or --synth NAME")
        ds = _load_dataset(path)
    log.info("benchmarking %d learners on %d samples", len(bcfg.learners), len(ds))
    try:
        report = bench.run_benchmark(ds, bcfg, jobs=args.jobs)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    bench.write_report(report, out)
    d = report.to_dict()
    print(ranking_table(report.scores))
    if cfg.plots:
        write_plots(d, out)
    print(f"wrote {out / 'report.json'}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else None
    if out is None:
        raise CliError(EXIT_INPUT, "report needs --out DIR")
    path = out / "report.json"
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"report file not found: {path}") from None
    except ValueError as exc:
        raise CliError(EXIT_INPUT, f"unreadable report {path}: {exc}") from None
    print(render_report(d))
    if args.plots:
        for p in write_plots(d, out):
            print(f"wrote {p}")
    return 0


COMMANDS = {"ingest": cmd_ingest, "synth": cmd_synth, "benchmark": cmd_benchmark,
            "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_INPUT, message)


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2^64), got {text}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="precip-uq", description="Quantile learners for monthly precipitation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="strict JSON run configuration")
    common.add_argument("--dataset", help="JSON-lines dataset path")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=_u64, help="overrides the config seed")
    common.add_argument("--jobs", type=_positive, default=1, help="worker threads")
    common.add_argument("--plots", action="store_true", help="also write SVG figures")
    common.add_argument("--synth", metavar="NAME", help=f"synthetic scenario {sorted(bench.LAWS)}")
    common.add_argument("--n", type=_positive, default=20_000, metavar="COUNT")

    ing = sub.add_parser("ingest", parents=[common], help="gauge CSV + two grids -> dataset")
    ing.add_argument("--gauges")
    ing.add_argument("--field-a", dest="field_a")
    ing.add_argument("--field-b", dest="field_b")
    ing.add_argument("--regrid", action="store_true", help="interpolate field B onto field A's grid")
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("benchmark", parents=[common], help="cross-validate the learners")
    sub.add_parser("report", parents=[common], help="render an existing report directory")
    return p


def _setup_logging() -> None:
    level = os.environ.get("PRECIP_UQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    command = "cli"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        return COMMANDS[command](args)
    except CliError as exc:
        reason = " ".join(str(exc).split())
        print(f"precip-uq: error: {command}: {exc.code}: {reason}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
