"""Post-processing of raw quantile predictions: zero-censoring and crossing repair."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scoring import QuantilePredictions


@dataclass(frozen=True)
class CalibrationLog:
    n_censored: int = 0
    n_crossings_fixed: int = 0

    def __add__(self, other: "CalibrationLog") -> "CalibrationLog":
        return CalibrationLog(
            self.n_censored + other.n_censored,
            self.n_crossings_fixed + other.n_crossings_fixed,
        )

    def to_dict(self) -> dict:
        return {"n_censored": self.n_censored, "n_crossings_fixed": self.n_crossings_fixed}


def censor_lowest(preds: QuantilePredictions) -> QuantilePredictions:
    """Clip negative predictions at the lowest level to zero."""
    values = np.array(preds.values)
    values[:, 0] = np.maximum(values[:, 0], 0.0)
    return QuantilePredictions(values, preds.level_grid, preds.calibrated)


def fix_crossing(preds: QuantilePredictions) -> QuantilePredictions:
    """Raise every quantile lying below the one at the next lower level to match it.

    A single ascending pass per sample, so a repaired value propagates upward.
    """
    values = np.array(preds.values)
    for j in range(1, values.shape[1]):
        np.maximum(values[:, j], values[:, j - 1], out=values[:, j])
    return QuantilePredictions(values, preds.level_grid, calibrated=True)


def calibrate(preds: QuantilePredictions) -> tuple[QuantilePredictions, CalibrationLog]:
    """Censor first, then repair crossings; the output is monotone and >= 0."""
    censored = censor_lowest(preds)
    fixed = fix_crossing(censored)
    n_censored = int(np.count_nonzero(censored.values != preds.values))
    n_fixed = int(np.count_nonzero(fixed.values != censored.values))
    return fixed, CalibrationLog(n_censored, n_fixed)
