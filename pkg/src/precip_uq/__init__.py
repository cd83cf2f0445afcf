"""Quantile regression learners and scoring for gauge/satellite precipitation merging."""

from .scoring import DEFAULT_LEVELS, LevelGrid, QuantilePredictions

__version__ = "0.1.0"

__all__ = ["DEFAULT_LEVELS", "LevelGrid", "QuantilePredictions", "__version__"]
