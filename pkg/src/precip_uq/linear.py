"""Linear quantile regression fitted on a smoothed pinball objective."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .smooth import anneal, eps_schedule, smoothed_pinball, smoothed_pinball_grad

# Features whose spread falls below this (relative to their magnitude) are
# treated as constant and get a zero coefficient.
SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 5000
    eps_start: float = 1.0  # in units of the target's spread
    eps_stop: float = 1e-6
    tolerance: float = 1e-12


@dataclass(frozen=True)
class LinearQuantileModel:
    alpha: float
    intercept: float
    coefficients: tuple[float, ...]
    feature_mean: tuple[float, ...]
    feature_scale: tuple[float, ...]

    def __post_init__(self):
        p = len(self.coefficients)
        if len(self.feature_mean) != p or len(self.feature_scale) != p:
            raise ValueError("coefficients and standardization must have equal length")
        if any(not s > 0 for s in self.feature_scale):
            raise ValueError("feature scales must be positive")

    def predict(self, X):
        return predict_linear(self, X)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LinearQuantileModel":
        d = json.loads(text)
        return cls(d["alpha"], d["intercept"], tuple(d["coefficients"]),
                   tuple(d["feature_mean"]), tuple(d["feature_scale"]))


def _loss_grad(theta, eps, Z, ys, alpha):
    u = ys - theta[0] - Z @ theta[1:]
    n = ys.size
    loss = float(np.sum(smoothed_pinball(u, alpha, eps)) / n)
    d = -smoothed_pinball_grad(u, alpha, eps) / n  # d loss / d prediction
    grad = np.empty_like(theta)
    grad[0] = d.sum()
    grad[1:] = Z.T @ d
    return loss, grad


def _exact_loss(theta, A, ys, alpha):
    u = ys - A @ theta
    return float(np.mean(np.where(u >= 0, alpha * u, (alpha - 1.0) * u)))


def _polish(theta, A, ys, alpha, rounds: int = 5):
    """Snap to the vertex through the points with the smallest residuals.

    The pinball optimum interpolates (at least) as many points as there are
    coefficients; the smoothed solution sits next to it, so solving the
    square system on its closest fits usually lands on the exact optimum.
    """
    k = A.shape[1]
    if ys.size < k:
        return theta
    best = _exact_loss(theta, A, ys, alpha)
    for _ in range(rounds):
        idx = np.argsort(np.abs(ys - A @ theta), kind="stable")[:k]
        try:
            cand = np.linalg.solve(A[idx], ys[idx])
        except np.linalg.LinAlgError:
            break
        loss = _exact_loss(cand, A, ys, alpha)
        if not loss < best:
            break
        theta, best = cand, loss
    return theta


def fit_linear_qr(train, alpha: float, cfg: SolverConfig = SolverConfig()) -> LinearQuantileModel:
    if isinstance(train, tuple):
        X, y = train
    else:
        X, y = train.X, train.y
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if y.size == 0 or X.shape[0] != y.size:
        raise ValueError(f"need matching, non-empty data; got X{X.shape}, y{y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    active = scale > SCALE_FLOOR * np.maximum(1.0, np.abs(mean))
    scale = np.where(active, scale, 1.0)
    Z = ((X - mean) / scale)[:, active]
    y_center = float(np.median(y))
    y_scale = float(np.std(y))
    if not y_scale > 0:
        y_scale = 1.0
    ys = (y - y_center) / y_scale

    theta0 = np.zeros(1 + Z.shape[1])
    theta0[0] = np.quantile(ys, alpha, method="inverted_cdf")
    schedule = eps_schedule(cfg.eps_start, cfg.eps_stop)
    theta, _ = anneal(lambda th, eps: _loss_grad(th, eps, Z, ys, alpha), theta0, schedule,
                      cfg.max_iter, first_share=0.2, tol=cfg.tolerance)
    theta = _polish(theta, np.column_stack([np.ones(ys.size), Z]), ys, alpha)

    coef = np.zeros(X.shape[1])
    coef[active] = y_scale * theta[1:]
    return LinearQuantileModel(
        alpha=float(alpha),
        intercept=y_center + y_scale * float(theta[0]),
        coefficients=tuple(float(c) for c in coef),
        feature_mean=tuple(float(m) for m in mean),
        feature_scale=tuple(float(s) for s in scale),
    )


def predict_linear(model: LinearQuantileModel, features):
    X = np.asarray(features, dtype=np.float64)
    p = len(model.coefficients)
    if X.shape[-1] != p:
        raise ValueError(f"expected {p} features, got {X.shape[-1]}")
    Z = (X - np.asarray(model.feature_mean)) / np.asarray(model.feature_scale)
    out = model.intercept + Z @ np.asarray(model.coefficients)
    return float(out) if np.ndim(out) == 0 else out
