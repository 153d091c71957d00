"""Probabilistic and point evaluation across hierarchy levels.

The quantile loss, its integrated form (CRPS via averaging over a uniform
quantile grid), a scaled CRPS that divides by the level's absolute total so
levels of very different magnitude can be averaged, and mean squared error
scaled against a repeat-last-value baseline.  Every score is computed per
hierarchy level and summarized as an unweighted mean over levels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .hierarchy import HierarchyStructure, aggregate_values
from .mixture import (
    MixtureMarginal,
    PoissonMixtureForecast,
    aggregate_rates,
    marginal_quantiles,
)


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing quantile levels inside (0, 1)."""

    levels: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        if levels.ndim != 1 or levels.size == 0:
            raise ValueError("quantile grid must be a non-empty vector")
        if (levels <= 0).any() or (levels >= 1).any():
            raise ValueError("quantile levels must lie strictly inside (0, 1)")
        if (np.diff(levels) <= 0).any():
            raise ValueError("quantile levels must be strictly increasing")
        object.__setattr__(self, "levels", levels)
        levels.setflags(write=False)

    @classmethod
    def uniform(cls, n: int = 99) -> "QuantileGrid":
        """n evenly spaced levels: 1/(n+1), ..., n/(n+1)."""
        if n < 1:
            raise ValueError("grid needs at least one level")
        return cls(np.arange(1, n + 1) / (n + 1))

    @property
    def n_levels(self) -> int:
        return self.levels.size


def quantile_loss(predicted_quantile: float, actual: float, q: float) -> float:
    """Pinball loss: (1{y <= yhat} - q) * (yhat - y).

    Zero when the predicted quantile equals the actual; asymmetric
    otherwise, charging under-prediction at rate q and over-prediction at
    rate 1 - q.
    """
    indicator = 1.0 if actual <= predicted_quantile else 0.0
    return (indicator - q) * (predicted_quantile - actual)


def _quantile_losses(quantiles: np.ndarray, actual: float, levels: np.ndarray) -> np.ndarray:
    indicator = (actual <= quantiles).astype(np.float64)
    return (indicator - levels) * (quantiles - actual)


def crps(forecast, actual: float, grid: QuantileGrid | None = None) -> float:
    """Approximate CRPS: twice the quantile loss averaged over the grid.

    Args:
        forecast: a :class:`MixtureMarginal`, or a quantile vector aligned
            with ``grid.levels``.
        actual: observed value.
        grid: quantile grid; defaults to 99 uniform levels.
    """
    grid = grid or QuantileGrid.uniform()
    if isinstance(forecast, MixtureMarginal):
        quantiles = marginal_quantiles(forecast, grid.levels).astype(np.float64)
    else:
        quantiles = np.asarray(forecast, dtype=np.float64)
        if quantiles.shape != grid.levels.shape:
            raise ValueError(f"quantile vector shape {quantiles.shape} does not match grid {grid.levels.shape}")
    return float(2.0 * _quantile_losses(quantiles, float(actual), grid.levels).mean())


def scrps_level(quantiles: np.ndarray, actuals: np.ndarray, grid: QuantileGrid) -> float:
    """Scaled CRPS of one hierarchy level over a forecast window.

    Args:
        quantiles: (n_series, horizon, n_levels) per-cell quantile vectors.
        actuals: (n_series, horizon) observed values.

    CRPS is averaged over the level's series and over horizon steps, then
    divided by the total absolute actuals of the window.  Scale invariant;
    NaN when the window's actuals are all zero.
    """
    quantiles = np.asarray(quantiles, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    if quantiles.shape[:2] != actuals.shape or quantiles.shape[2] != grid.n_levels:
        raise ValueError(f"quantile block {quantiles.shape} does not match actuals {actuals.shape} and grid")
    indicator = (actuals[:, :, None] <= quantiles).astype(np.float64)
    ql = (indicator - grid.levels[None, None, :]) * (quantiles - actuals[:, :, None])
    numerator = float(2.0 * ql.mean())
    denominator = float(np.abs(actuals).sum())
    if denominator == 0.0:
        return float("nan")
    return numerator / denominator


def msse(actuals: np.ndarray, forecast_means: np.ndarray, baseline_means: np.ndarray) -> float:
    """Mean squared error scaled by a baseline's mean squared error.

    NaN when the baseline error is zero (scale undefined).
    """
    actuals = np.asarray(actuals, dtype=np.float64)
    num = float(np.mean((actuals - np.asarray(forecast_means, dtype=np.float64)) ** 2))
    den = float(np.mean((actuals - np.asarray(baseline_means, dtype=np.float64)) ** 2))
    if den == 0.0:
        return float("nan")
    return num / den


def naive1(history: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed value across the horizon."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 1 or history.size == 0:
        raise ValueError("naive1 needs a non-empty 1-d history")
    return np.full(horizon, history[-1])


def seasonal_naive(history: np.ndarray, period: int, horizon: int) -> np.ndarray:
    """Repeat the last full seasonal cycle across the horizon."""
    history = np.asarray(history, dtype=np.float64)
    if period < 1 or history.size < period:
        raise ValueError(f"need at least {period} observations for a seasonal baseline")
    cycle = history[-period:]
    reps = int(np.ceil(horizon / period))
    return np.tile(cycle, reps)[:horizon]


@dataclass(frozen=True)
class EvaluationReport:
    """Per-level and overall scores plus the quantile forecasts behind them."""

    level_scrps: dict
    level_msse: dict
    overall_scrps: float
    overall_msse: float
    row_names: tuple
    grid: QuantileGrid
    quantiles: np.ndarray  # (n_rows, horizon, n_levels)
    mean_forecasts: np.ndarray  # (n_rows, horizon)

    def metric_rows(self) -> list:
        """(level, metric, value) rows; overall last."""
        rows = []
        for label, value in self.level_scrps.items():
            rows.append((label, "scrps", value))
        for label, value in self.level_msse.items():
            rows.append((label, "msse", value))
        rows.append(("overall", "scrps", self.overall_scrps))
        rows.append(("overall", "msse", self.overall_msse))
        return rows

    def quantile_rows(self, scale: float = 1.0):
        """(series_id, tau, q, value) rows, optionally inverse-scaled."""
        for r, name in enumerate(self.row_names):
            for t in range(self.quantiles.shape[1]):
                for qi, q in enumerate(self.grid.levels):
                    yield name, t + 1, float(q), self.quantiles[r, t, qi] * scale


def forecast_quantile_table(
    forecast: PoissonMixtureForecast, structure: HierarchyStructure, grid: QuantileGrid
) -> np.ndarray:
    """Quantiles of every row's marginal: (n_rows, horizon, n_levels)."""
    rates = aggregate_rates(forecast, structure)
    n_rows, _, horizon = rates.shape
    out = np.zeros((n_rows, horizon, grid.n_levels))
    for r in range(n_rows):
        for t in range(horizon):
            marg = MixtureMarginal(forecast.weights, rates[r, :, t])
            out[r, t] = marginal_quantiles(marg, grid.levels)
    return out


def evaluate(
    forecast: PoissonMixtureForecast,
    structure: HierarchyStructure,
    y_panel: np.ndarray,
    window_start: int,
    grid: QuantileGrid | None = None,
) -> EvaluationReport:
    """Score a mixture forecast of the window starting at ``window_start``.

    Args:
        forecast: bottom-level mixture for the window.
        y_panel: full bottom-level panel (n_series, t); the window
            ``[window_start, window_start + horizon)`` holds the actuals and
            everything before it anchors the repeat-last-value baseline.
        grid: quantile grid (default 99 uniform levels).

    Point forecasts are weight-averaged rates aggregated with the summation
    matrix, so they are coherent by construction.  Levels with undefined
    scores (all-zero actuals, zero baseline error) are skipped by the
    overall unweighted mean; all-NaN turns the overall score itself NaN.
    """
    grid = grid or QuantileGrid.uniform()
    y_panel = np.asarray(y_panel, dtype=np.float64)
    h = forecast.horizon
    if window_start < 1 or window_start + h > y_panel.shape[1]:
        raise ValueError(
            f"window [{window_start}, {window_start + h}) does not fit a panel of length {y_panel.shape[1]} "
            "with at least one anchoring observation"
        )
    full_actuals = aggregate_values(structure, y_panel)
    window = full_actuals[:, window_start : window_start + h]
    anchor = full_actuals[:, window_start - 1]

    quantiles = forecast_quantile_table(forecast, structure, grid)
    mean_full = aggregate_values(structure, forecast.mean())

    level_scrps: dict[str, float] = {}
    level_msse: dict[str, float] = {}
    levels = structure.levels or {"all": tuple(range(structure.n_total))}
    for label, rows in levels.items():
        rows = list(rows)
        level_scrps[label] = scrps_level(quantiles[rows], window[rows], grid)
        baseline = np.repeat(anchor[rows, None], h, axis=1)
        level_msse[label] = msse(window[rows], mean_full[rows], baseline)

    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN mean is a valid outcome
        overall_scrps = float(np.nanmean(list(level_scrps.values())))
        overall_msse = float(np.nanmean(list(level_msse.values())))
    return EvaluationReport(
        level_scrps=level_scrps,
        level_msse=level_msse,
        overall_scrps=overall_scrps,
        overall_msse=overall_msse,
        row_names=structure.row_names,
        grid=grid,
        quantiles=quantiles,
        mean_forecasts=mean_full,
    )


def evaluate_model(model, ds, window: str = "test", grid: QuantileGrid | None = None) -> EvaluationReport:
    """Forecast with a fitted model at the window's creation date and score it.

    ``window`` is "test" (the final horizon) or "val" (the one before it).
    """
    from .data import partition  # local import to keep module deps one-way

    part = partition(ds)
    if window == "test":
        start = part.val_end
    elif window == "val":
        start = part.train_end
    else:
        raise ValueError(f"window must be 'test' or 'val', got {window!r}")
    rates, weights = model.forward(ds.features, start - 1)
    forecast = PoissonMixtureForecast(weights.values, rates.values)
    return evaluate(forecast, ds.hierarchy, ds.y, start, grid)
