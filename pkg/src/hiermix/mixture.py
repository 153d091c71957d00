"""Finite Poisson mixture over a multivariate count window.

A forecast assigns one nonnegative rate to every (bottom series, component,
horizon step) cell plus a weight vector on the simplex.  Conditional on the
component, counts are independent Poisson draws across series and steps;
all cross-series and cross-step dependence is carried by the shared
component index.  Aggregates inherit the same mixture with component-wise
summed rates, which is what makes sampled forecasts coherent across a
hierarchy by construction.

All probability math runs in log space.  Rates are floored at
``RATE_FLOOR`` inside logarithms, so a degenerate rate of zero with a
positive observed count produces a large negative log-probability instead
of a crash.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .hierarchy import HierarchyStructure, aggregate_values, build_summation_matrix

RATE_FLOOR = 1e-8
WEIGHT_FLOOR = 1e-300
_RANK_RTOL = 1e-9


@dataclass(frozen=True)
class PoissonMixtureForecast:
    """Mixture parameterization of one forecast window.

    Attributes:
        weights: component probabilities, shape (n_components,), on the simplex.
        rates: nonnegative Poisson rates, shape (n_series, n_components, horizon).
    """

    weights: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        r = np.asarray(self.rates, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError(f"weights must be a non-empty vector, got shape {w.shape}")
        if r.ndim != 3:
            raise ValueError(f"rates must have shape (series, components, horizon), got {r.shape}")
        if r.shape[1] != w.size:
            raise ValueError(f"{w.size} weights for {r.shape[1]} rate components")
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        if not np.isfinite(r).all() or (r < 0).any():
            raise ValueError("rates must be finite and nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rates", r)
        w.setflags(write=False)
        r.setflags(write=False)

    @property
    def n_series(self) -> int:
        return self.rates.shape[0]

    @property
    def n_components(self) -> int:
        return self.rates.shape[1]

    @property
    def horizon(self) -> int:
        return self.rates.shape[2]

    def mean(self) -> np.ndarray:
        """Expected counts per (series, step): the weight-averaged rates."""
        return np.einsum("k,bkh->bh", self.weights, self.rates)


@dataclass(frozen=True)
class MixtureMarginal:
    """Univariate Poisson mixture: the marginal law of one (series, step) cell."""

    weights: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        r = np.asarray(self.rates, dtype=np.float64)
        if w.shape != r.shape or w.ndim != 1:
            raise ValueError(f"weights and rates must be equal-length vectors, got {w.shape} and {r.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rates", r)

    def mean(self) -> float:
        return float(self.weights @ self.rates)


def _log_poisson(y: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Elementwise log Poisson pmf with the documented rate floor."""
    y = np.asarray(y, dtype=np.float64)
    rates = np.asarray(rates, dtype=np.float64)
    return y * np.log(np.maximum(rates, RATE_FLOOR)) - rates - gammaln(y + 1.0)


def _check_counts(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.number):
        raise ValueError("observed counts must be numeric")
    yf = np.asarray(y, dtype=np.float64)
    if (yf < 0).any() or not np.all(yf == np.rint(yf)):
        raise ValueError("observed counts must be nonnegative integers")
    return yf


def log_joint_pmf(forecast: PoissonMixtureForecast, y: np.ndarray) -> float:
    """Log probability of a full (n_series, horizon) count window.

    Computed as logsumexp over components of log weight plus the sum of
    per-cell Poisson log pmfs, so it stays finite for tiny probabilities.
    """
    y = _check_counts(y)
    if y.shape != (forecast.n_series, forecast.horizon):
        raise ValueError(
            f"expected counts of shape {(forecast.n_series, forecast.horizon)}, got {y.shape}"
        )
    per_comp = _log_poisson(y[:, None, :], forecast.rates).sum(axis=(0, 2))
    v = np.log(np.maximum(forecast.weights, WEIGHT_FLOOR)) + per_comp
    return float(logsumexp_values(v))


def logsumexp_values(v: np.ndarray) -> float:
    """Stable log of summed exponentials of a vector."""
    v = np.asarray(v, dtype=np.float64)
    m = v.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


def bottom_marginal(forecast: PoissonMixtureForecast, series: int, step: int) -> MixtureMarginal:
    return MixtureMarginal(forecast.weights, forecast.rates[series, :, step])


def aggregate_rates(
    forecast: PoissonMixtureForecast, structure: HierarchyStructure
) -> np.ndarray:
    """Rates for every row of the structure, component by component.

    Because component-conditional counts are independent Poisson draws, an
    aggregate is Poisson with the summed rate within each component, and the
    weights are unchanged.

    Returns:
        Array of shape (n_agg + n_bottom, n_components, horizon).
    """
    if forecast.n_series != structure.n_bottom:
        raise ValueError(
            f"forecast has {forecast.n_series} series, structure expects {structure.n_bottom}"
        )
    return aggregate_values(structure, forecast.rates)


def full_forecast(
    forecast: PoissonMixtureForecast, structure: HierarchyStructure
) -> PoissonMixtureForecast:
    """The induced mixture over every row of the structure."""
    return PoissonMixtureForecast(forecast.weights, aggregate_rates(forecast, structure))


def marginal_pmf(marginal: MixtureMarginal, y: int) -> float:
    y = _check_counts(y)
    lp = _log_poisson(y, marginal.rates)
    return float(np.maximum(marginal.weights, 0.0) @ np.exp(lp))


def marginal_cdf(marginal: MixtureMarginal, y: float) -> float:
    """P(Y <= y); exact Poisson cdf per component, mixed by the weights."""
    if y < 0:
        return 0.0
    return float(marginal.weights @ stats.poisson.cdf(np.floor(y), marginal.rates))


def marginal_quantile(marginal: MixtureMarginal, q: float) -> int:
    """Smallest integer y with cdf(y) >= q.

    Brackets by doubling from the mixture mean, then bisects on the
    monotone cdf.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    if marginal_cdf(marginal, 0) >= q:
        return 0
    lo = 0  # invariant: cdf(lo) < q
    hi = max(1, int(np.ceil(marginal.mean())))
    while marginal_cdf(marginal, hi) < q:
        lo = hi
        hi *= 2
        if hi > 2**62:
            raise RuntimeError("quantile bracketing ran away; rates are not finite?")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if marginal_cdf(marginal, mid) >= q:
            hi = mid
        else:
            lo = mid
    return hi


def marginal_quantiles(marginal: MixtureMarginal, levels: np.ndarray) -> np.ndarray:
    """Quantiles at many levels in one pass over the integer support.

    Equivalent to calling :func:`marginal_quantile` per level (same
    smallest-integer convention) but builds the cdf table once.
    """
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0:
        return np.zeros(0, dtype=np.int64)
    if (levels <= 0).any() or (levels >= 1).any():
        raise ValueError("quantile levels must lie in (0, 1)")
    top = marginal_quantile(marginal, float(levels.max()))
    support = np.arange(top + 1)
    cdf = np.maximum(marginal.weights, 0.0) @ stats.poisson.cdf(support[None, :], marginal.rates[:, None])
    return np.searchsorted(cdf, levels, side="left").astype(np.int64)


def sample_coherent(
    forecast: PoissonMixtureForecast,
    structure: HierarchyStructure,
    n_samples: int,
    rng_seed: int,
) -> np.ndarray:
    """Draw coherent sample paths over every row of the structure.

    One component index is drawn per sample path and shared by all series
    and steps; bottom counts are then independent Poisson draws, and
    aggregate rows are computed by summing the sampled bottom counts.  The
    result is integer, of shape (n_samples, n_agg + n_bottom, horizon), and
    coherent by construction.  Deterministic given ``rng_seed``; parallel
    callers should derive per-worker seeds from one ``np.random.SeedSequence``.
    """
    if forecast.n_series != structure.n_bottom:
        raise ValueError(
            f"forecast has {forecast.n_series} series, structure expects {structure.n_bottom}"
        )
    rng = np.random.default_rng(rng_seed)
    comps = rng.choice(forecast.n_components, size=n_samples, p=forecast.weights)
    bottom = rng.poisson(forecast.rates.transpose(1, 0, 2)[comps])
    s = build_summation_matrix(structure)
    return np.einsum("rb,nbh->nrh", s, bottom)


def covariance(
    forecast: PoissonMixtureForecast, cell_a: tuple, cell_b: tuple
) -> float:
    """Model covariance between two (series, step) cells.

    The same cell gets the Poisson variance of the mean rate plus the
    between-component dispersion; distinct cells get dispersion only.
    """
    (sa, ta), (sb, tb) = cell_a, cell_b
    w = forecast.weights
    ra = forecast.rates[sa, :, ta]
    rb = forecast.rates[sb, :, tb]
    mean_a = float(w @ ra)
    mean_b = float(w @ rb)
    disp = float(w @ ((ra - mean_a) * (rb - mean_b)))
    if cell_a == cell_b:
        return mean_a + disp
    return disp


def covariance_matrix_nondiag_rank(forecast: PoissonMixtureForecast, step: int) -> int:
    """Numerical rank of the between-component dispersion matrix at one step.

    The dispersion matrix is the weighted outer-product spread of component
    rate vectors around their mean; its rank is at most n_components - 1
    because the weighted deviations sum to zero.
    """
    rates = forecast.rates[:, :, step]
    mean = rates @ forecast.weights
    dev = rates - mean[:, None]
    disp = (dev * forecast.weights[None, :]) @ dev.T
    singular = np.linalg.svd(disp, compute_uv=False)
    if singular.size == 0 or singular[0] == 0.0:
        return 0
    return int((singular > _RANK_RTOL * singular[0]).sum())


# -- flat-file serialization -----------------------------------------------


def save_forecast_tables(
    forecast: PoissonMixtureForecast,
    series_names,
    rates_path: str,
    weights_path: str,
) -> None:
    """Write the rate tensor and weights as two flat CSV tables.

    Rates go long-form with columns (series_id, component, tau, rate) where
    ``tau`` counts forecast steps from 1; weights get (component, weight).
    """
    series_names = list(series_names)
    if len(series_names) != forecast.n_series:
        raise ValueError(f"{len(series_names)} names for {forecast.n_series} series")
    import os

    for path, writer in ((rates_path, _write_rates), (weights_path, _write_weights)):
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer(fh, forecast, series_names)
        os.replace(tmp, path)


def _write_rates(fh, forecast, series_names):
    writer = csv.writer(fh)
    writer.writerow(["series_id", "component", "tau", "rate"])
    for b, name in enumerate(series_names):
        for k in range(forecast.n_components):
            for t in range(forecast.horizon):
                writer.writerow([name, k, t + 1, repr(float(forecast.rates[b, k, t]))])


def _write_weights(fh, forecast, series_names):
    writer = csv.writer(fh)
    writer.writerow(["component", "weight"])
    for k, w in enumerate(forecast.weights):
        writer.writerow([k, repr(float(w))])


def load_forecast_tables(rates_path: str, weights_path: str) -> tuple:
    """Read tables written by :func:`save_forecast_tables`.

    Returns:
        (forecast, series_names) with series ordered as first encountered.
    """
    with open(weights_path, "r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    weights = np.zeros(len(rows))
    for row in rows:
        weights[int(row["component"])] = float(row["weight"])

    names: list[str] = []
    name_index: dict[str, int] = {}
    cells: list[tuple] = []
    max_tau = 0
    with open(rates_path, "r", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            name = row["series_id"]
            if name not in name_index:
                name_index[name] = len(names)
                names.append(name)
            k, tau, rate = int(row["component"]), int(row["tau"]), float(row["rate"])
            max_tau = max(max_tau, tau)
            cells.append((name_index[name], k, tau - 1, rate))
    rates = np.zeros((len(names), len(weights), max_tau))
    for b, k, t, rate in cells:
        rates[b, k, t] = rate
    return PoissonMixtureForecast(weights, rates), names
