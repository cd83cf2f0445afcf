"""Cross-validated benchmarking of quantile learners.

Every (fold, learner, level) fit is an independent task with its own derived
seed; results are merged in a fixed order so the report does not depend on
how many worker threads ran the tasks.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Literal, Mapping

import numpy as np
from scipy.stats import norm

from .boost import BoostConfig, BoostEnsemble, fit_boost, leafwise_config, levelwise_config, predict_boost
from .calibrate import calibrate
from .forest import ForestConfig, fit_qrf, predict_qrf
from .geodata import N_PREDICTORS, PREDICTOR_NAMES, Dataset
from .linear import SolverConfig, fit_linear_qr, predict_linear
from .net import QrnnConfig, fit_qrnn, predict_qrnn
from .scoring import LevelGrid, QuantilePredictions, ScoreTable, score_table

log = logging.getLogger(__name__)

REPORT_VERSION = 1


# ----------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class _Law:
    mean: Callable[[np.ndarray], np.ndarray]
    spread: Callable[[np.ndarray], np.ndarray]
    description: str


LAWS: dict[str, _Law] = {
    "hetero": _Law(
        lambda X: 10.0 + 5.0 * X[:, 0] + 3.0 * np.sin(2.0 * np.pi * X[:, 1]),
        lambda X: 1.0 + 2.0 * X[:, 2],
        "y = 10 + 5 x1 + 3 sin(2 pi x2) + (1 + 2 x3) e",
    ),
    "signal1": _Law(
        lambda X: 10.0 + 10.0 * X[:, 0],
        lambda X: np.ones(X.shape[0]),
        "y = 10 + 10 x1 + e",
    ),
}


@dataclass(frozen=True)
class SyntheticScenario:
    """Uniform predictors on [0, 1]^p and a Gaussian location-scale target."""

    name: str = "hetero"
    n: int = 20_000
    seed: int = 0
    p: int = N_PREDICTORS
    samples_per_station: int = 24

    def __post_init__(self):
        if self.name not in LAWS:
            raise ValueError(f"unknown scenario {self.name!r}; choose from {sorted(LAWS)}")
        if self.n < 1:
            raise ValueError("scenario needs n >= 1")

    def mean(self, X) -> np.ndarray:
        return LAWS[self.name].mean(np.atleast_2d(X))

    def spread(self, X) -> np.ndarray:
        return LAWS[self.name].spread(np.atleast_2d(X))

    def quantile(self, X, alpha: float) -> np.ndarray:
        """True conditional alpha-quantile of the target given ``X``."""
        return self.mean(X) + self.spread(X) * float(norm.ppf(alpha))


def generate_synthetic(scenario: SyntheticScenario) -> tuple[Dataset, Callable[[Any, float], np.ndarray]]:
    rng = np.random.default_rng(scenario.seed)
    X = rng.uniform(0.0, 1.0, size=(scenario.n, scenario.p))
    y = scenario.mean(X) + scenario.spread(X) * rng.standard_normal(scenario.n)
    k = np.arange(scenario.n)
    per = scenario.samples_per_station
    stations = [f"S{i:05d}" for i in k // per]
    times = [(2001 + (j % per) // 12, (j % per) % 12 + 1) for j in k]
    ds = Dataset(X, y, stations, times, sources={"synthetic": scenario.name, "n": scenario.n,
                                                 "seed": scenario.seed})
    return ds, scenario.quantile


# --------------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: np.ndarray
    seed: int
    granularity: Literal["sample", "station"] = "sample"

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.k).tolist()


def kfold_split(n: int, k: int = 5, seed: int = 0, granularity: str = "sample",
                station_index: Mapping[str, Any] | None = None) -> FoldPlan:
    """Shuffle (samples or whole stations) with ``seed`` and cut into ``k`` blocks."""
    if k < 2:
        raise ValueError("need at least two folds")
    if k > n:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    if granularity == "sample":
        for fold, block in enumerate(np.array_split(rng.permutation(n), k)):
            assignment[block] = fold
    elif granularity == "station":
        if station_index is None:
            raise ValueError("station folds need a station index")
        names = sorted(station_index)
        if k > len(names):
            raise ValueError(f"cannot split {len(names)} stations into {k} folds")
        for fold, block in enumerate(np.array_split(rng.permutation(len(names)), k)):
            for s in block:
                assignment[np.asarray(station_index[names[s]], dtype=np.intp)] = fold
    else:
        raise ValueError(f"unknown fold granularity {granularity!r}")
    assignment.setflags(write=False)
    return FoldPlan(k, assignment, seed, granularity)


# ------------------------------------------------------------------ learners

LEARNER_KINDS = ("linear", "forest", "levelwise", "leafwise", "qrnn", "oracle")

DEFAULT_LEARNERS = {
    "qr": ("linear", {}),
    "qrf": ("forest", {}),
    "gbm": ("levelwise", {}),
    "lgbm": ("leafwise", {}),
    "qrnn": ("qrnn", {}),
}

_PARAM_TYPES = {
    "linear": SolverConfig,
    "forest": ForestConfig,
    "levelwise": BoostConfig,
    "leafwise": BoostConfig,
    "qrnn": QrnnConfig,
}


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.kind == "oracle":
            unknown = set(self.params) - {"scenario"}
        else:
            allowed = {f.name for f in fields(_PARAM_TYPES[self.kind])} - {"seed", "alpha", "mode"}
            unknown = set(self.params) - allowed
        if unknown:
            raise ValueError(f"unknown {self.kind} parameters: {sorted(unknown)}")

    @property
    def per_level(self) -> bool:
        return self.kind in ("linear", "levelwise", "leafwise", "qrnn")

    def boost_config(self, alpha: float, seed: int) -> BoostConfig:
        make = leafwise_config if self.kind == "leafwise" else levelwise_config
        return make(alpha, seed=seed, **self.params)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(sorted(self.params.items()))}


def _fit_predict_level(spec: LearnerSpec, Xtr, ytr, Xte, alpha: float, seed: int) -> np.ndarray:
    if spec.kind == "linear":
        model = fit_linear_qr((Xtr, ytr), alpha, SolverConfig(**spec.params))
        return np.asarray(predict_linear(model, Xte))
    if spec.kind in ("levelwise", "leafwise"):
        return predict_boost(fit_boost((Xtr, ytr), spec.boost_config(alpha, seed)), Xte)
    if spec.kind == "qrnn":
        model = fit_qrnn((Xtr, ytr), alpha, QrnnConfig(seed=seed, **spec.params))
        return np.asarray(predict_qrnn(model, Xte))
    raise AssertionError(spec.kind)


def _fit_predict_all(spec: LearnerSpec, Xtr, ytr, Xte, grid: LevelGrid, seed: int) -> np.ndarray:
    if spec.kind == "forest":
        forest = fit_qrf((Xtr, ytr), ForestConfig(seed=seed, **spec.params))
        return predict_qrf(forest, Xte, grid)
    if spec.kind == "oracle":
        scen = SyntheticScenario(spec.params.get("scenario", "hetero"), n=1)
        return np.column_stack([scen.quantile(Xte, a) for a in grid])
    raise AssertionError(spec.kind)


# ----------------------------------------------------------------- benchmark

@dataclass(frozen=True)
class BenchmarkConfig:
    learners: Mapping[str, LearnerSpec]
    level_grid: LevelGrid = LevelGrid()
    benchmark_learner: str = "qr"
    folds: int = 5
    fold_granularity: str = "sample"
    seed: int = 0
    importance: bool = False

    def __post_init__(self):
        if self.benchmark_learner not in self.learners:
            raise KeyError(f"benchmark learner {self.benchmark_learner!r} is not configured")

    def to_dict(self) -> dict:
        return {
            "levels": list(self.level_grid.levels),
            "learners": {k: v.to_dict() for k, v in self.learners.items()},
            "benchmark_learner": self.benchmark_learner,
            "folds": self.folds,
            "fold_granularity": self.fold_granularity,
            "seed": self.seed,
            "importance": self.importance,
        }


def default_learners(names=None) -> dict[str, LearnerSpec]:
    names = names or list(DEFAULT_LEARNERS)
    return {n: LearnerSpec(*DEFAULT_LEARNERS[n]) for n in names}


@dataclass(frozen=True)
class ImportanceReport:
    levels: tuple[float, ...]
    predictors: tuple[str, ...]
    gains: np.ndarray  # (levels, predictors)
    ranks: np.ndarray  # 1 = most important

    def share(self, predictor: int) -> np.ndarray:
        return self.gains[:, predictor] / self.gains.sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "predictors": list(self.predictors),
            "total_gain": self.gains.tolist(),
            "rank": self.ranks.tolist(),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "predictor", "total_gain", "rank"])
        for i, a in enumerate(self.levels):
            for j, name in enumerate(self.predictors):
                w.writerow([a, name, repr(float(self.gains[i, j])), int(self.ranks[i, j])])
        return buf.getvalue()


def feature_importance(ensembles: Mapping[float, BoostEnsemble],
                       predictors=PREDICTOR_NAMES) -> ImportanceReport:
    """Rank predictors by total split gain, separately at every level.

    Ties in gain go to the lower predictor index.
    """
    levels = tuple(sorted(ensembles))
    gains = np.vstack([ensembles[a].total_gain for a in levels])
    if len(predictors) != gains.shape[1]:
        predictors = tuple(f"x{j + 1}" for j in range(gains.shape[1]))
    ranks = np.empty(gains.shape, dtype=np.int64)
    for i, a in enumerate(levels):
        if not np.any(gains[i] > 0):
            raise ValueError(f"no splits recorded at level {a}")
        order = np.lexsort((np.arange(gains.shape[1]), -gains[i]))
        ranks[i, order] = np.arange(1, gains.shape[1] + 1)
    return ImportanceReport(levels, tuple(predictors), gains, ranks)


def importance_on(dataset: Dataset, grid: LevelGrid, spec: LearnerSpec | None = None,
                  seed: int = 0, jobs: int = 1) -> ImportanceReport:
    """Fit the leafwise learner on the whole dataset at every level."""
    spec = spec or LearnerSpec("leafwise")
    cfgs = [spec.boost_config(a, _derive_seed(seed, "importance", j)) for j, a in enumerate(grid)]
    run = lambda c: fit_boost((dataset.X, dataset.y), c)
    with ThreadPoolExecutor(max(1, jobs)) as ex:
        ensembles = list(ex.map(run, cfgs))
    return feature_importance(dict(zip(grid.levels, ensembles)))


@dataclass
class EvaluationReport:
    scores: ScoreTable
    calibration: dict[str, dict]
    config: dict
    n_samples: int
    fold_sizes: list[int]
    failures: dict[str, str]
    skips: list[dict] = field(default_factory=list)
    importance: ImportanceReport | None = None
    timings: list[dict] = field(default_factory=list)  # kept out of to_dict

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "config": self.config,
            "n_samples": self.n_samples,
            "fold_sizes": self.fold_sizes,
            "failures": self.failures,
            "calibration": self.calibration,
            "scores": self.scores.to_dict(),
            "skips": self.skips,
            "importance": None if self.importance is None else self.importance.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _derive_seed(seed: int, *key) -> int:
    words = [int(seed)] + [_word(k) for k in key]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint32)[0])


def _word(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k)
    return int.from_bytes(str(k).encode("utf-8")[:8].ljust(8, b"\0"), "little")


def run_benchmark(dataset: Dataset, cfg: BenchmarkConfig, jobs: int = 1) -> EvaluationReport:
    """Cross-validate every configured learner and score the pooled held-out predictions."""
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    grid = cfg.level_grid
    plan = kfold_split(n, cfg.folds, cfg.seed, cfg.fold_granularity, dataset.station_index)
    X, y = dataset.X, dataset.y

    tasks = []
    for fold in range(cfg.folds):
        tr, te = plan.train_indices(fold), plan.test_indices(fold)
        for name, spec in cfg.learners.items():
            if spec.per_level:
                for j, alpha in enumerate(grid):
                    tasks.append((fold, name, j, alpha, tr, te))
            else:
                tasks.append((fold, name, None, None, tr, te))

    def run(task):
        fold, name, j, alpha, tr, te = task
        spec = cfg.learners[name]
        seed = _derive_seed(cfg.seed, fold, name, "all" if j is None else j)
        t0 = time.perf_counter()
        try:
            if j is None:
                out = _fit_predict_all(spec, X[tr], y[tr], X[te], grid, seed)
            else:
                out = _fit_predict_level(spec, X[tr], y[tr], X[te], alpha, seed)
            err = None
        except Exception as exc:  # a failing learner must not sink the others
            log.warning("learner %s failed on fold %d: %s", name, fold, exc)
            out, err = None, f"{type(exc).__name__}: {exc}"
        return out, err, time.perf_counter() - t0

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    raw = {name: np.full((n, len(grid)), np.nan) for name in cfg.learners}
    failures: dict[str, str] = {}
    timings = []
    for (fold, name, j, alpha, tr, te), (out, err, secs) in zip(tasks, results):
        timings.append({"fold": fold, "learner": name,
                        "level": None if alpha is None else alpha, "seconds": secs})
        if err is not None:
            failures.setdefault(name, f"fold {fold}: {err}")
            continue
        if j is None:
            raw[name][te, :] = out
        else:
            raw[name][te, j] = out

    preds: dict[str, QuantilePredictions | None] = {}
    calib: dict[str, dict] = {}
    for name, values in raw.items():
        if name in failures or not np.all(np.isfinite(values)):
            failures.setdefault(name, "non-finite predictions")
            preds[name] = None
            calib[name] = None
            continue
        fixed, clog = calibrate(QuantilePredictions(values, grid))
        preds[name] = fixed
        calib[name] = clog.to_dict()

    table = score_table(preds, y, cfg.benchmark_learner, dataset.station_index)
    importance = None
    if cfg.importance:
        spec = next((s for s in cfg.learners.values() if s.kind == "leafwise"), None)
        importance = importance_on(dataset, grid, spec, cfg.seed, jobs)
    return EvaluationReport(
        scores=table,
        calibration=calib,
        config=cfg.to_dict(),
        n_samples=n,
        fold_sizes=plan.sizes(),
        failures=failures,
        skips=list(dataset.skips),
        importance=importance,
        timings=timings,
    )


def write_report(report: EvaluationReport, out_dir) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    t = report.scores

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["learner", "level", "coverage"])
    for name in t.learners:
        for j, a in enumerate(t.levels):
            v = t.coverage[name][j]
            w.writerow([name, a, "" if v is None else repr(v)])
    (out / "coverage.csv").write_text(buf.getvalue(), encoding="utf-8")

    (out / "skills_by_level.csv").write_text(t.level_csv(), encoding="utf-8")
    (out / "scoring_rule_skills.csv").write_text(t.scoring_rule_csv(), encoding="utf-8")
    (out / "station_skills.csv").write_text(t.station_csv(), encoding="utf-8")
    if report.importance is not None:
        (out / "importance.csv").write_text(report.importance.to_csv(), encoding="utf-8")
    (out / "timings.json").write_text(json.dumps(report.timings, indent=2) + "\n", encoding="utf-8")


def scoring_rule_ranking(table: ScoreTable) -> list[tuple[str, float | None]]:
    """Learners ordered by scoring-rule skill, best first; failed learners last."""
    items = list(table.scoring_rule_skill.items())
    return sorted(items, key=lambda kv: (kv[1] is None, -(kv[1] or 0.0), kv[0]))
