"""Quantile regression forests.

Trees are grown as in a regression random forest but every leaf keeps the
ids of the training rows that landed in it. A query's predictive
distribution is the training targets weighted by how often they share a leaf
with the query, averaged over trees.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels, container
from .scoring import LevelGrid


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    mtry: int | None = None  # None -> ceil(p / 3)
    min_leaf: int = 5
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("a forest needs at least one tree")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")


@dataclass(frozen=True)
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_start: np.ndarray
    leaf_len: np.ndarray
    members: np.ndarray
    seed: int

    def leaves(self) -> dict[int, np.ndarray]:
        """Map leaf node id -> member training row ids."""
        return {
            int(k): self.members[self.leaf_start[k]:self.leaf_start[k] + self.leaf_len[k]]
            for k in np.flatnonzero(self.feature < 0)
        }

    def apply(self, x) -> int:
        return int(_kernels._find_leaf(self.feature, self.threshold, self.left, self.right, 0,
                                       np.asarray(x, dtype=np.float64)))


class QuantileForest:
    def __init__(self, trees: list[RegressionTree], y_train: np.ndarray, n_features: int,
                 config: ForestConfig, mtry: int):
        self.trees = tuple(trees)
        self.y_train = np.asarray(y_train, dtype=np.float64)
        self.n_features = n_features
        self.config = config
        self.mtry = mtry
        self._order = np.argsort(self.y_train, kind="stable")
        cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])
        self._feature = cat("feature")
        self._threshold = cat("threshold")
        self._left = cat("left")
        self._right = cat("right")
        self._leaf_start = cat("leaf_start")
        self._leaf_len = cat("leaf_len")
        self._members = cat("members")
        self._node_offset = np.cumsum([0] + [t.feature.size for t in self.trees]).astype(np.int64)
        self._member_offset = np.cumsum([0] + [t.members.size for t in self.trees]).astype(np.int64)

    def _flat(self):
        return (self._feature, self._threshold, self._left, self._right, self._leaf_start,
                self._leaf_len, self._members, self._node_offset, self._member_offset)

    def weights(self, x) -> np.ndarray:
        x = _check_row(x, self.n_features)
        return _kernels.forest_weights(*self._flat(), x, self.y_train.size)

    def predict(self, X, grid: LevelGrid = LevelGrid(), n_jobs: int = 1) -> np.ndarray:
        return predict_qrf(self, X, grid, n_jobs=n_jobs)

    def save(self, path) -> None:
        header = {"config": asdict(self.config), "n_features": self.n_features, "mtry": self.mtry,
                  "n_trees": len(self.trees), "seeds": [t.seed for t in self.trees]}
        arrays = dict(zip(
            ("feature", "threshold", "left", "right", "leaf_start", "leaf_len", "members",
             "node_offset", "member_offset"), self._flat()))
        arrays["y_train"] = self.y_train
        container.dump(path, "quantile_forest", header, arrays)

    @classmethod
    def load(cls, path) -> "QuantileForest":
        meta, a = container.load(path, "quantile_forest")
        no, mo = a["node_offset"], a["member_offset"]
        trees = []
        for t in range(meta["n_trees"]):
            ns, ms = slice(no[t], no[t + 1]), slice(mo[t], mo[t + 1])
            trees.append(RegressionTree(
                a["feature"][ns], a["threshold"][ns], a["left"][ns], a["right"][ns],
                a["leaf_start"][ns], a["leaf_len"][ns], a["members"][ms], meta["seeds"][t]))
        return cls(trees, a["y_train"], meta["n_features"], ForestConfig(**meta["config"]),
                   meta["mtry"])


def _check_row(x, p):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p,):
        raise ValueError(f"expected {p} features, got shape {x.shape}")
    return x


def _xy(train):
    if isinstance(train, tuple):
        X, y = train
    else:
        X, y = train.X, train.y
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"inconsistent training shapes X{X.shape}, y{y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    return X, y


def _grow_one(X, y, cfg: ForestConfig, mtry: int, t: int) -> RegressionTree:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(t,)))
    n = y.size
    bag = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
    node_seed = int(rng.integers(0, 2**63 - 1))
    arrays = _kernels.grow_cart(X, y, bag.astype(np.int64), mtry, cfg.min_leaf, node_seed)
    return RegressionTree(*arrays, seed=node_seed)


def fit_qrf(train, cfg: ForestConfig = ForestConfig(), n_jobs: int = 1) -> QuantileForest:
    """Grow ``cfg.n_trees`` trees on bootstrap resamples.

    Tree ``t`` draws its randomness from ``SeedSequence(seed, spawn_key=(t,))``,
    so the forest does not depend on ``n_jobs``.
    """
    X, y = _xy(train)
    if y.size == 0:
        raise ValueError("cannot grow a forest on empty data")
    p = X.shape[1]
    mtry = min(p, cfg.mtry or math.ceil(p / 3))
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            trees = list(ex.map(lambda t: _grow_one(X, y, cfg, mtry, t), range(cfg.n_trees)))
    else:
        trees = [_grow_one(X, y, cfg, mtry, t) for t in range(cfg.n_trees)]
    return QuantileForest(trees, y, p, cfg, mtry)


def predict_qrf(forest: QuantileForest, features, grid: LevelGrid = LevelGrid(),
                n_jobs: int = 1) -> np.ndarray:
    """Weighted-ECDF quantiles; one row per query (a 1-D query gives a 1-D result)."""
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != forest.n_features:
        raise ValueError(f"expected {forest.n_features} features, got {X.shape[1]}")
    levels = grid.as_array()

    def run(chunk):
        return _kernels.forest_quantiles(*forest._flat(), np.ascontiguousarray(chunk),
                                         forest.y_train, forest._order, levels)

    if n_jobs > 1 and X.shape[0] > 1:
        chunks = np.array_split(X, n_jobs)
        with ThreadPoolExecutor(n_jobs) as ex:
            out = np.vstack(list(ex.map(run, chunks)))
    else:
        out = run(X)
    return out[0] if single else out
