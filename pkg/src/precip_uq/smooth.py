"""Huber-smoothed pinball loss and an annealed quasi-Newton driver.

The kink of the pinball loss is replaced by a quadratic on ``|u| <= eps``
(``u = y - prediction``); the smoothed loss is within ``eps / 2`` of the exact
one everywhere and is continuously differentiable.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.optimize import minimize


def smoothed_pinball(u, alpha: float, eps: float):
    """Elementwise smoothed loss of residuals ``u = y - z``."""
    u = np.asarray(u, dtype=np.float64)
    a = np.abs(u)
    h = np.where(a <= eps, u * u / (2.0 * eps), a - eps / 2.0)
    return np.where(u >= 0, alpha, 1.0 - alpha) * h


def smoothed_pinball_grad(u, alpha: float, eps: float):
    """Derivative of :func:`smoothed_pinball` with respect to the residual ``u``."""
    u = np.asarray(u, dtype=np.float64)
    dh = np.clip(u / eps, -1.0, 1.0)
    return np.where(u >= 0, alpha, 1.0 - alpha) * dh


def eps_schedule(start: float, stop: float) -> list[float]:
    """Halve from ``start`` until ``stop`` is reached (``stop`` included)."""
    out = [start]
    while out[-1] / 2 > stop:
        out.append(out[-1] / 2)
    out.append(stop)
    return out


def anneal(fun_grad: Callable[[np.ndarray, float], tuple[float, np.ndarray]], x0: np.ndarray,
           schedule: list[float], max_iter: int, first_share: float = 0.5,
           tol: float = 1e-12) -> tuple[np.ndarray, list[float]]:
    """Minimise ``fun_grad(x, eps)`` for each ``eps`` in turn, warm-starting.

    The first stage may use ``first_share`` of ``max_iter``; the remaining
    budget is split evenly over later stages. Returns the solution and the
    objective value after every accepted step.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    history: list[float] = []
    n_rest = max(len(schedule) - 1, 1)
    first = max(1, int(max_iter * first_share)) if len(schedule) > 1 else max_iter
    rest = max(1, (max_iter - first) // n_rest)
    for k, eps in enumerate(schedule):
        budget = first if k == 0 else rest
        stage: list[float] = []

        def track(intermediate_result):
            stage.append(float(intermediate_result.fun))

        res = minimize(fun_grad, x, args=(eps,), jac=True, method="L-BFGS-B", callback=track,
                       options={"maxiter": budget, "ftol": tol, "gtol": 1e-10})
        # L-BFGS-B may end on a failed line search; never accept a worse point
        if res.fun <= fun_grad(x, eps)[0]:
            x = res.x
        history.extend(stage)
    return x, history
