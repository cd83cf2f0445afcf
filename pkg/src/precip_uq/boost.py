"""Gradient-boosted quantile trees.

Two growth policies share one kernel:

* ``levelwise`` -- depth-bounded trees on exact thresholds (every distinct
  training value is a candidate split), GBM style;
* ``leafwise`` -- best-first growth on histogram-binned features with per-tree
  row and feature subsampling, LightGBM style.

The pinball loss has no curvature, so splits are chosen on gradient sums with
row counts standing in for the hessian, and each leaf's output is then reset
to the alpha-quantile of the residuals it holds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Literal

import numpy as np

from . import _kernels, container


@dataclass(frozen=True)
class BoostConfig:
    mode: Literal["levelwise", "leafwise"] = "leafwise"
    alpha: float = 0.5
    n_iterations: int = 400
    learning_rate: float = 0.05
    max_depth: int = 10
    max_leaves: int = 500
    min_data_in_leaf: int = 200
    feature_fraction: float = 0.75
    bagging_fraction: float = 0.75
    min_split_gain: float = 0.0
    max_bins: int | None = 255  # None: one bin per distinct training value
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("levelwise", "leafwise"):
            raise ValueError(f"unknown growth mode {self.mode!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be >= 0")
        for name in ("feature_fraction", "bagging_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.max_bins is not None and not 2 <= self.max_bins <= 255:
            raise ValueError("max_bins must lie in [2, 255]")
        if self.min_data_in_leaf < 1 or self.max_leaves < 1 or self.max_depth < 0:
            raise ValueError("tree size limits must be positive")
        if self.min_split_gain < 0:
            raise ValueError("min_split_gain must be >= 0")


def leafwise_config(alpha: float = 0.5, **kw) -> BoostConfig:
    """Defaults of the histogram learner: depth 10, 500 leaves, 200 rows per
    leaf, rate 0.05, 400 trees, 0.75 feature and row fractions, zero min gain."""
    return BoostConfig(mode="leafwise", alpha=alpha, **kw)


def levelwise_config(alpha: float = 0.5, **kw) -> BoostConfig:
    """Defaults of the GBM-style learner: 500 depth-3 trees at rate 0.1 on
    exact thresholds, at least 10 rows per leaf, half the rows per tree."""
    base = dict(mode="levelwise", alpha=alpha, n_iterations=500, learning_rate=0.1,
                max_depth=3, max_leaves=8, min_data_in_leaf=10, feature_fraction=1.0,
                bagging_fraction=0.5, max_bins=None)
    base.update(kw)
    return BoostConfig(**base)


class FeatureBinning:
    """Per-feature thresholds; bin ``b`` holds ``edges[b-1] < x <= edges[b]``."""

    def __init__(self, edges: list[np.ndarray]):
        self.edges = [np.asarray(e, dtype=np.float64) for e in edges]

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([e.size + 1 for e in self.edges], dtype=np.int64)

    @classmethod
    def fit(cls, X, max_bins: int | None) -> "FeatureBinning":
        edges = []
        for col in np.asarray(X, dtype=np.float64).T:
            uniq, counts = np.unique(col, return_counts=True)
            if max_bins is None or uniq.size <= max_bins:
                cut = np.arange(uniq.size - 1)
            else:
                # equal-frequency cut points over the distinct values
                cum = np.cumsum(counts)
                targets = col.size * np.arange(1, max_bins) / max_bins
                cut = np.unique(np.searchsorted(cum, targets, side="left"))
                cut = cut[cut < uniq.size - 1]
            lo, hi = uniq[cut], uniq[cut + 1]
            mid = 0.5 * (lo + hi)
            edges.append(np.where(mid < hi, mid, lo))
        return cls(edges)

    def transform(self, X) -> np.ndarray:
        """Bin codes as a (n_features, n_rows) int32 array."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != len(self.edges):
            raise ValueError(f"expected {len(self.edges)} features, got {X.shape[1]}")
        codes = np.empty((X.shape[1], X.shape[0]), dtype=np.int32)
        for f, e in enumerate(self.edges):
            codes[f] = np.searchsorted(e, X[:, f], side="left")
        return codes


@dataclass(frozen=True)
class BoostTree:
    feature: np.ndarray
    split_bin: np.ndarray
    left: np.ndarray
    right: np.ndarray
    gain: np.ndarray
    value: np.ndarray  # learning-rate-scaled leaf outputs


class BoostEnsemble:
    def __init__(self, base_prediction: float, trees: list[BoostTree], binning: FeatureBinning,
                 config: BoostConfig, train_loss: list[float] | None = None):
        self.base_prediction = float(base_prediction)
        self.trees = tuple(trees)
        self.binning = binning
        self.config = config
        self.train_loss = tuple(train_loss or ())
        n_feat = len(binning.edges)
        self.split_feature = np.concatenate(
            [t.feature[t.feature >= 0] for t in self.trees] or [np.empty(0, np.int32)])
        self.split_gain = np.concatenate(
            [t.gain[t.feature >= 0] for t in self.trees] or [np.empty(0)])
        self.total_gain = np.bincount(self.split_feature, weights=self.split_gain, minlength=n_feat)
        cat = lambda name, dt: np.concatenate(
            [getattr(t, name) for t in self.trees] or [np.empty(0, dt)])
        self._feature = cat("feature", np.int32)
        self._split_bin = cat("split_bin", np.int32)
        self._left = cat("left", np.int32)
        self._right = cat("right", np.int32)
        self._value = cat("value", np.float64)
        self._node_offset = np.cumsum([0] + [t.feature.size for t in self.trees]).astype(np.int64)

    @property
    def n_features(self) -> int:
        return len(self.binning.edges)

    def predict(self, X) -> np.ndarray:
        return predict_boost(self, X)

    def save(self, path) -> None:
        header = {
            "config": asdict(self.config),
            "base_prediction": self.base_prediction,
            "total_gain": self.total_gain.tolist(),
            "n_trees": len(self.trees),
            "train_loss": list(self.train_loss),
        }
        arrays = {f"edges_{f}": e for f, e in enumerate(self.binning.edges)}
        for name in ("feature", "split_bin", "left", "right", "gain", "value"):
            arrays[name] = np.concatenate(
                [getattr(t, name) for t in self.trees] or [np.empty(0)])
        arrays["node_offset"] = self._node_offset
        container.dump(path, "boost_ensemble", header, arrays)

    @classmethod
    def load(cls, path) -> "BoostEnsemble":
        meta, a = container.load(path, "boost_ensemble")
        edges = [a[f"edges_{f}"] for f in range(len(meta["total_gain"]))]
        off = a["node_offset"]
        trees = [
            BoostTree(*(a[name][off[t]:off[t + 1]] for name in
                        ("feature", "split_bin", "left", "right", "gain", "value")))
            for t in range(meta["n_trees"])
        ]
        return cls(meta["base_prediction"], trees, FeatureBinning(edges),
                   BoostConfig(**meta["config"]), meta["train_loss"])


def empirical_quantile(values, alpha: float) -> float:
    """Lower alpha-quantile (left-continuous ECDF inverse)."""
    return float(_kernels.lower_quantile_sorted(np.sort(np.asarray(values, dtype=np.float64)), alpha))


def _mean_pinball(resid: np.ndarray, alpha: float) -> float:
    # resid = y - F; pinball(F, y) = alpha*resid if resid > 0 else (alpha - 1)*resid
    return float(np.mean(np.where(resid > 0, alpha * resid, (alpha - 1.0) * resid)))


def fit_boost(train, cfg: BoostConfig) -> BoostEnsemble:
    """Boost ``cfg.n_iterations`` quantile trees.

    Each tree is grown on the negative gradient ``alpha - 1{y <= F}`` and its
    leaves are renewed to the alpha-quantile of the in-bag residuals there.
    """
    if isinstance(train, tuple):
        X, y = train
    else:
        X, y = train.X, train.y
    X = np.asarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, p = X.shape
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    if cfg.min_data_in_leaf > n:
        raise ValueError(f"min_data_in_leaf={cfg.min_data_in_leaf} exceeds the {n} training rows")

    alpha = cfg.alpha
    binning = FeatureBinning.fit(X, cfg.max_bins)
    codes = np.ascontiguousarray(binning.transform(X))
    n_bins = binning.n_bins
    base = empirical_quantile(y, alpha)
    F = np.full(n, base)
    leafwise = cfg.mode == "leafwise"
    max_leaves = cfg.max_leaves if leafwise else min(cfg.max_leaves, 2 ** cfg.max_depth)
    max_leaves = max(max_leaves, 1)
    n_rows = max(1, int(cfg.bagging_fraction * n))
    n_feats = max(1, int(cfg.feature_fraction * p + 0.5))
    rng = np.random.default_rng(cfg.seed)
    leaf_of = np.empty(n, dtype=np.int64)

    trees = []
    losses = [_mean_pinball(y - F, alpha)]
    for _ in range(cfg.n_iterations):
        if n_rows < n:
            rows = np.sort(rng.choice(n, size=n_rows, replace=False))
        else:
            rows = np.arange(n)
        if n_feats < p:
            feats = np.sort(rng.choice(p, size=n_feats, replace=False))
        else:
            feats = np.arange(p)
        g = alpha - (y <= F).astype(np.float64)
        feature, split_bin, left, right, gain, idx, start, end = _kernels.grow_hist_tree(
            codes, n_bins, g, rows.astype(np.int64), feats.astype(np.int64), leafwise,
            max_leaves, cfg.max_depth, cfg.min_data_in_leaf, cfg.min_split_gain)
        value = _kernels.renew_leaves(feature, idx, start, end, y - F, alpha) * cfg.learning_rate
        _kernels.route_codes(feature, split_bin, left, right, 0, codes, leaf_of)
        F = F + value[leaf_of]
        trees.append(BoostTree(feature, split_bin, left, right, gain, value))
        losses.append(_mean_pinball(y - F, alpha))
    return BoostEnsemble(base, trees, binning, cfg, losses)


def predict_boost(ensemble: BoostEnsemble, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != ensemble.n_features:
        raise ValueError(f"expected {ensemble.n_features} features, got {X.shape[1]}")
    codes = np.ascontiguousarray(ensemble.binning.transform(X))
    out = _kernels.boost_predict(ensemble._feature, ensemble._split_bin, ensemble._left,
                                 ensemble._right, ensemble._value, ensemble._node_offset,
                                 codes, ensemble.base_prediction)
    return out[0] if single else out


def with_alpha(cfg: BoostConfig, alpha: float) -> BoostConfig:
    return replace(cfg, alpha=alpha)
