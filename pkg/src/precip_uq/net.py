"""Quantile regression neural network with one tanh hidden layer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .smooth import anneal, eps_schedule, smoothed_pinball, smoothed_pinball_grad


@dataclass(frozen=True)
class QrnnConfig:
    hidden_width: int = 8
    epochs: int = 2000  # total optimizer iterations over the annealing schedule
    n_trials: int = 1
    eps_start: float = 2.0 ** -3  # in units of the target's spread
    eps_stop: float = 1e-6
    init_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        if self.n_trials < 1 or self.epochs < 1:
            raise ValueError("n_trials and epochs must be >= 1")


@dataclass(frozen=True)
class QrnnModel:
    alpha: float
    W1: np.ndarray  # (p, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_center: float
    y_scale: float
    config: QrnnConfig
    train_loss: float = float("nan")

    @property
    def hidden_width(self) -> int:
        return self.b1.size

    def predict(self, X):
        return predict_qrnn(self, X)

    def to_json(self) -> str:
        d = {
            "alpha": self.alpha, "W1": self.W1.tolist(), "b1": self.b1.tolist(),
            "w2": self.w2.tolist(), "b2": self.b2, "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(), "y_center": self.y_center, "y_scale": self.y_scale,
            "config": asdict(self.config), "train_loss": self.train_loss,
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QrnnModel":
        d = json.loads(text)
        arr = lambda k: np.asarray(d[k], dtype=np.float64)
        return cls(d["alpha"], arr("W1").reshape(len(d["W1"]), -1), arr("b1"), arr("w2"),
                   d["b2"], arr("x_mean"), arr("x_scale"), d["y_center"], d["y_scale"],
                   QrnnConfig(**d["config"]), d["train_loss"])


def pack(W1, b1, w2, b2) -> np.ndarray:
    return np.concatenate([W1.ravel(), b1, w2, [b2]])


def unpack(theta, p: int, h: int):
    W1 = theta[:p * h].reshape(p, h)
    b1 = theta[p * h:p * h + h]
    w2 = theta[p * h + h:p * h + 2 * h]
    return W1, b1, w2, theta[-1]


def loss_and_grad(theta, Z, ys, alpha: float, eps: float, hidden: int):
    """Mean smoothed pinball of the network and its gradient w.r.t. ``theta``."""
    p = Z.shape[1]
    W1, b1, w2, b2 = unpack(theta, p, hidden)
    H = np.tanh(Z @ W1 + b1)
    u = ys - (H @ w2 + b2)
    n = ys.size
    loss = float(np.sum(smoothed_pinball(u, alpha, eps)) / n)
    d = -smoothed_pinball_grad(u, alpha, eps) / n
    dH = np.outer(d, w2) * (1.0 - H * H)
    grad = pack(Z.T @ dH, dH.sum(axis=0), H.T @ d, d.sum())
    return loss, grad


def fit_qrnn(train, alpha: float, cfg: QrnnConfig = QrnnConfig()) -> QrnnModel:
    """Train ``cfg.n_trials`` seeded networks and keep the best on training loss."""
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

    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale = np.where(x_scale > 0, x_scale, 1.0)
    Z = (X - x_mean) / x_scale
    y_center = float(np.mean(y))
    y_scale = float(np.std(y))
    if not y_scale > 0:
        y_scale = 1.0
    ys = (y - y_center) / y_scale

    p, h = X.shape[1], cfg.hidden_width
    schedule = eps_schedule(cfg.eps_start, cfg.eps_stop)
    best = None
    for trial in range(cfg.n_trials):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(trial,)))
        theta0 = rng.uniform(-cfg.init_scale, cfg.init_scale, size=p * h + 2 * h + 1)
        theta, _ = anneal(lambda th, eps: loss_and_grad(th, Z, ys, alpha, eps, h), theta0,
                          schedule, cfg.epochs)
        final = loss_and_grad(theta, Z, ys, alpha, schedule[-1], h)[0]
        if best is None or final < best[0]:
            best = (final, theta)
    final, theta = best
    W1, b1, w2, b2 = unpack(theta, p, h)
    return QrnnModel(float(alpha), W1.copy(), b1.copy(), w2.copy(), float(b2), x_mean, x_scale,
                     y_center, y_scale, cfg, final * y_scale)


def predict_qrnn(model: QrnnModel, features):
    X = np.asarray(features, dtype=np.float64)
    if X.shape[-1] != model.x_mean.size:
        raise ValueError(f"expected {model.x_mean.size} features, got {X.shape[-1]}")
    Z = (X - model.x_mean) / model.x_scale
    out = np.tanh(Z @ model.W1 + model.b1) @ model.w2 + model.b2
    out = model.y_center + model.y_scale * out
    return float(out) if np.ndim(out) == 0 else out
