"""Quantile scoring functions, the quantile scoring rule, skills and coverage.

Conventions: ``z`` is a predictive quantile, ``y`` the realization. The
scoring function is ``(z - y) * (1{z - y >= 0} - alpha)``; lower is better.
Skills are fractions (``0.111`` rather than ``11.1%``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

DEFAULT_LEVELS = (0.025, 0.050, 0.100, 0.250, 0.500, 0.750, 0.900, 0.950, 0.975)

SCORING_RULE = "scoring_rule"


class DegenerateBenchmark(ValueError):
    """Raised when a skill is requested against a zero benchmark score."""


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {alpha!r}")


@dataclass(frozen=True)
class LevelGrid:
    levels: tuple[float, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        levels = tuple(float(a) for a in self.levels)
        if not levels:
            raise ValueError("level grid is empty")
        for a in levels:
            _check_alpha(a)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("quantile levels must be strictly increasing")
        object.__setattr__(self, "levels", levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def index(self, alpha: float) -> int:
        return self.levels.index(float(alpha))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float64)


@dataclass(frozen=True)
class QuantilePredictions:
    """Predictive quantiles, one row per sample and one column per level."""

    values: np.ndarray
    level_grid: LevelGrid = field(default_factory=LevelGrid)
    calibrated: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2 or values.shape[1] != len(self.level_grid):
            raise ValueError(
                f"expected a (n, {len(self.level_grid)}) matrix, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("predictions must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def column(self, alpha: float) -> np.ndarray:
        return self.values[:, self.level_grid.index(alpha)]


def pinball(z, y, alpha: float):
    """Quantile scoring function; scalar in, scalar out, arrays broadcast."""
    _check_alpha(alpha)
    x = np.subtract(z, y, dtype=np.float64)
    out = x * ((x >= 0).astype(np.float64) - alpha)
    if np.ndim(out) == 0:
        return float(out)
    return out


def _mean(values: np.ndarray) -> float:
    # numpy's sum is pairwise; extended precision keeps large means stable
    return float(np.sum(values, dtype=np.longdouble) / values.size)


def mean_quantile_score(z, y, alpha: float) -> float:
    z = np.asarray(z, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("mean score of an empty sample is undefined")
    if z.shape != y.shape:
        raise ValueError(f"length mismatch: {z.size} predictions vs {y.size} observations")
    return _mean(pinball(z, y, alpha))


def skill(score_learner: float, score_benchmark: float) -> float:
    if not score_benchmark > 0:
        raise DegenerateBenchmark(f"degenerate benchmark: score {score_benchmark!r}")
    return 1.0 - score_learner / score_benchmark


def quantile_scoring_rule(zs, y, grid: LevelGrid | Sequence[float]):
    """Sum of quantile scores over the levels of ``grid``.

    ``zs`` is either one vector of per-level quantiles (with scalar ``y``) or
    a matrix with one row per observation in ``y``.
    """
    levels = grid.levels if isinstance(grid, LevelGrid) else tuple(grid)
    zs = np.asarray(zs, dtype=np.float64)
    if zs.shape[-1] != len(levels):
        raise ValueError(f"expected {len(levels)} quantiles per case, got {zs.shape[-1]}")
    y = np.asarray(y, dtype=np.float64)
    total = np.zeros(np.broadcast_shapes(zs.shape[:-1], y.shape), dtype=np.float64)
    for j, alpha in enumerate(levels):
        total = total + pinball(zs[..., j], y, alpha)
    if np.ndim(total) == 0:
        return float(total)
    return total


def mean_scoring_rule(preds: QuantilePredictions, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    if len(preds) == 0:
        raise ValueError("mean score of an empty sample is undefined")
    if len(preds) != y.size:
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {y.size} observations")
    return _mean(quantile_scoring_rule(preds.values, y, preds.level_grid))


def coverage(z, y) -> float:
    """Fraction of cases whose predictive quantile is >= the observation."""
    z = np.asarray(z, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("coverage of an empty sample is undefined")
    if z.shape != y.shape:
        raise ValueError(f"length mismatch: {z.size} predictions vs {y.size} observations")
    return int(np.count_nonzero(z >= y)) / z.size


def _mode_scores(preds: QuantilePredictions, y: np.ndarray, mode) -> np.ndarray:
    if mode == SCORING_RULE:
        return quantile_scoring_rule(preds.values, y, preds.level_grid)
    return pinball(preds.column(mode), y, float(mode))


def per_station_skill(
    preds_by_learner: Mapping[str, QuantilePredictions],
    obs,
    station_index: Mapping[str, Sequence[int]],
    benchmark_learner: str,
    mode=SCORING_RULE,
) -> dict[tuple[str, str], float | None]:
    """Skill for every (learner, station) pair.

    ``mode`` is a quantile level or ``"scoring_rule"``. Stations where the
    benchmark scores exactly zero map to ``None``.
    """
    if benchmark_learner not in preds_by_learner:
        raise KeyError(f"benchmark learner {benchmark_learner!r} has no predictions")
    y = np.asarray(obs, dtype=np.float64)
    scores = {name: _mode_scores(p, y, mode) for name, p in preds_by_learner.items()}
    out: dict[tuple[str, str], float | None] = {}
    for station, idx in station_index.items():
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0:
            raise ValueError(f"station {station!r} has no samples")
        bench = _mean(scores[benchmark_learner][idx])
        for name, s in scores.items():
            out[(name, station)] = skill(_mean(s[idx]), bench) if bench > 0 else None
    return out


@dataclass
class ScoreTable:
    """Aggregate scores for a set of learners over one level grid."""

    levels: tuple[float, ...]
    learners: tuple[str, ...]
    benchmark: str
    mean_scores: dict[str, list[float | None]]
    coverage: dict[str, list[float | None]]
    level_skills: dict[str, list[float | None]]
    mean_scoring_rule: dict[str, float | None]
    scoring_rule_skill: dict[str, float | None]
    station_skills: dict[str, dict[str, dict[str, float | None]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "learners": list(self.learners),
            "benchmark": self.benchmark,
            "mean_scores": self.mean_scores,
            "coverage": self.coverage,
            "level_skills": self.level_skills,
            "mean_scoring_rule": self.mean_scoring_rule,
            "scoring_rule_skill": self.scoring_rule_skill,
            "station_skills": self.station_skills,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreTable":
        return cls(
            levels=tuple(d["levels"]),
            learners=tuple(d["learners"]),
            benchmark=d["benchmark"],
            mean_scores=d["mean_scores"],
            coverage=d["coverage"],
            level_skills=d["level_skills"],
            mean_scoring_rule=d["mean_scoring_rule"],
            scoring_rule_skill=d["scoring_rule_skill"],
            station_skills=d.get("station_skills", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def level_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["learner", "level", "mean_score", "skill", "coverage"])
        for name in self.learners:
            for j, alpha in enumerate(self.levels):
                w.writerow([
                    name, alpha, _fmt(self.mean_scores[name][j]),
                    _fmt(self.level_skills[name][j]), _fmt(self.coverage[name][j]),
                ])
        return buf.getvalue()

    def scoring_rule_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["learner", "mean_scoring_rule", "skill"])
        for name in self.learners:
            w.writerow([name, _fmt(self.mean_scoring_rule[name]), _fmt(self.scoring_rule_skill[name])])
        return buf.getvalue()

    def station_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["station_id", "learner", "mode", "skill"])
        for mode, by_learner in self.station_skills.items():
            for name in self.learners:
                for station, value in by_learner.get(name, {}).items():
                    w.writerow([station, name, mode, _fmt(value)])
        return buf.getvalue()


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def score_table(
    preds_by_learner: Mapping[str, QuantilePredictions | None],
    obs,
    benchmark: str,
    station_index: Mapping[str, Sequence[int]] | None = None,
) -> ScoreTable:
    """Score every learner; learners mapped to ``None`` (failed) get null cells."""
    y = np.asarray(obs, dtype=np.float64)
    names = tuple(preds_by_learner)
    grids = {p.level_grid for p in preds_by_learner.values() if p is not None}
    if len(grids) != 1:
        raise ValueError("all learners must share one level grid")
    grid = grids.pop()
    levels = grid.levels

    mean_scores: dict[str, list[float | None]] = {}
    cov: dict[str, list[float | None]] = {}
    rule: dict[str, float | None] = {}
    for name, p in preds_by_learner.items():
        if p is None:
            mean_scores[name] = [None] * len(levels)
            cov[name] = [None] * len(levels)
            rule[name] = None
            continue
        mean_scores[name] = [mean_quantile_score(p.values[:, j], y, a) for j, a in enumerate(levels)]
        cov[name] = [coverage(p.values[:, j], y) for j in range(len(levels))]
        rule[name] = mean_scoring_rule(p, y)

    def _skill(value, ref):
        if value is None or ref is None or not ref > 0:
            return None
        return skill(value, ref)

    bench_scores = mean_scores.get(benchmark, [None] * len(levels))
    level_skills = {
        name: [_skill(v, b) for v, b in zip(vals, bench_scores)] for name, vals in mean_scores.items()
    }
    rule_skill = {name: _skill(v, rule.get(benchmark)) for name, v in rule.items()}

    station_skills: dict[str, dict[str, dict[str, float | None]]] = {}
    ok = {n: p for n, p in preds_by_learner.items() if p is not None}
    if station_index is not None and benchmark in ok:
        for mode in (*levels, SCORING_RULE):
            table = per_station_skill(ok, y, station_index, benchmark, mode)
            key = SCORING_RULE if mode == SCORING_RULE else repr(float(mode))
            by_learner: dict[str, dict[str, float | None]] = {}
            for (name, station), value in table.items():
                by_learner.setdefault(name, {})[station] = value
            station_skills[key] = by_learner

    return ScoreTable(
        levels=levels,
        learners=names,
        benchmark=benchmark,
        mean_scores=mean_scores,
        coverage=cov,
        level_skills=level_skills,
        mean_scoring_rule=rule,
        scoring_rule_skill=rule_skill,
        station_skills=station_skills,
    )
