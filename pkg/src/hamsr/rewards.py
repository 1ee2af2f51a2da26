"""Prediction-quality reward."""

from __future__ import annotations

import numpy as np


def nrmse_reward(predicted, observed):
    """Squashed normalized RMSE in (0, 1]; 1 means perfect prediction.

    NRMSE is the RMSE over all state coordinates divided by the population
    standard deviation of the observed coordinates, and the reward is
    1 / (1 + NRMSE). Predicting the observed mean everywhere scores exactly
    0.5. Non-finite predictions score 0.
    """
    pred = predicted.states() if hasattr(predicted, "states") else np.ravel(predicted)
    obs = observed.states() if hasattr(observed, "states") else np.ravel(observed)
    if pred.shape != obs.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    if not np.all(np.isfinite(pred)):
        return 0.0
    rmse = float(np.sqrt(np.mean((pred - obs) ** 2)))
    std = float(np.std(obs))
    if std == 0.0:
        return 1.0 if rmse == 0.0 else 0.0
    return 1.0 / (1.0 + rmse / std)
