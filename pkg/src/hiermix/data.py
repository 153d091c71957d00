"""Dataset assembly: CSV ingestion, calendar features, synthetic generation.

A dataset is a balanced panel of bottom-level counts on a regular calendar,
plus the aggregation structure and a feature bundle split into static,
historical, and known-future blocks.  Aggregate-level history and calendar
one-hots enter as shared covariates; each series' own (log-transformed)
history is its bottom-specific historical channel; series and group
identity one-hots are its static channels.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .hierarchy import HierarchyStructure, aggregate_values
from .mixture import PoissonMixtureForecast


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureBundle:
    """Input features grouped by availability.

    Shapes (t = panel length, h = horizon):
        static_bottom: (n_series, f_static)
        static_shared: (f_static_shared,)
        hist_bottom: (n_series, f_hist, t)
        hist_shared: (f_hist_shared, t)
        fut_bottom: (n_series, f_fut, t + h)   known through the horizon
        fut_shared: (f_fut_shared, t + h)
    """

    static_bottom: np.ndarray
    static_shared: np.ndarray
    hist_bottom: np.ndarray
    hist_shared: np.ndarray
    fut_bottom: np.ndarray
    fut_shared: np.ndarray

    def __post_init__(self):
        for name in ("static_bottom", "static_shared", "hist_bottom", "hist_shared", "fut_bottom", "fut_shared"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.static_bottom.ndim != 2 or self.hist_bottom.ndim != 3 or self.fut_bottom.ndim != 3:
            raise DataError("bottom feature blocks have wrong rank")
        if self.static_shared.ndim != 1 or self.hist_shared.ndim != 2 or self.fut_shared.ndim != 2:
            raise DataError("shared feature blocks have wrong rank")
        n = self.static_bottom.shape[0]
        if self.hist_bottom.shape[0] != n or self.fut_bottom.shape[0] != n:
            raise DataError("feature blocks disagree on the number of series")
        if self.fut_shared.shape[1] != self.fut_bottom.shape[2]:
            raise DataError("future blocks disagree on their time span")
        for arr in (self.static_bottom, self.static_shared, self.hist_bottom, self.hist_shared, self.fut_bottom, self.fut_shared):
            if not np.isfinite(arr).all():
                raise DataError("features must be finite")

    @property
    def n_series(self) -> int:
        return self.static_bottom.shape[0]


@dataclass(frozen=True)
class Dims:
    static_bottom: int
    static_shared: int
    hist_bottom: int
    hist_shared: int
    fut_bottom: int
    fut_shared: int


def feature_dims(fb: FeatureBundle) -> Dims:
    return Dims(
        static_bottom=fb.static_bottom.shape[1],
        static_shared=fb.static_shared.shape[0],
        hist_bottom=fb.hist_bottom.shape[1],
        hist_shared=fb.hist_shared.shape[0],
        fut_bottom=fb.fut_bottom.shape[1],
        fut_shared=fb.fut_shared.shape[0],
    )


@dataclass(frozen=True)
class SeriesDataset:
    """Balanced bottom-level count panel plus structure and features."""

    y: np.ndarray  # (n_series, t)
    dates: tuple
    frequency: str
    hierarchy: HierarchyStructure
    horizon: int
    features: FeatureBundle
    scale_factor: float = 1.0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "dates", tuple(self.dates))
        if y.ndim != 2:
            raise DataError(f"panel must be 2-d, got shape {y.shape}")
        if y.shape[0] != self.hierarchy.n_bottom:
            raise DataError(f"panel has {y.shape[0]} series, hierarchy expects {self.hierarchy.n_bottom}")
        if len(self.dates) != y.shape[1]:
            raise DataError(f"{len(self.dates)} dates for a panel of length {y.shape[1]}")
        if self.horizon < 1:
            raise DataError("horizon must be positive")
        if y.shape[1] <= 2 * self.horizon:
            raise DataError(
                f"panel length {y.shape[1]} cannot hold validation and test windows of {self.horizon}"
            )
        if not np.isfinite(y).all() or (y < 0).any():
            raise DataError("panel values must be finite and nonnegative")
        y.setflags(write=False)

    @property
    def n_series(self) -> int:
        return self.y.shape[0]

    @property
    def n_time(self) -> int:
        return self.y.shape[1]

    def is_count_panel(self) -> bool:
        return bool(np.all(self.y == np.rint(self.y)))


@dataclass(frozen=True)
class Partition:
    """Index ranges [start, end) for the three chronological windows."""

    train_end: int
    val_end: int
    n_time: int

    @property
    def train(self) -> range:
        return range(0, self.train_end)

    @property
    def val(self) -> range:
        return range(self.train_end, self.val_end)

    @property
    def test(self) -> range:
        return range(self.val_end, self.n_time)


def partition(ds: SeriesDataset) -> Partition:
    """Last horizon as test, the preceding horizon as validation, rest as train."""
    h = ds.horizon
    return Partition(train_end=ds.n_time - 2 * h, val_end=ds.n_time - h, n_time=ds.n_time)


# -- calendar --------------------------------------------------------------

_FREQ_STEPS = {"daily": None, "weekly": None, "monthly": None}


def _next_date(d: datetime.date, frequency: str) -> datetime.date:
    if frequency == "daily":
        return d + datetime.timedelta(days=1)
    if frequency == "weekly":
        return d + datetime.timedelta(days=7)
    if frequency == "monthly":
        year, month = (d.year + 1, 1) if d.month == 12 else (d.year, d.month + 1)
        return datetime.date(year, month, min(d.day, 28))
    raise DataError(f"unsupported frequency '{frequency}'; use daily, weekly, or monthly")


def extend_dates(dates, frequency: str, extra: int) -> tuple:
    out = list(dates)
    for _ in range(extra):
        out.append(_next_date(out[-1], frequency))
    return tuple(out)


def build_calendar_features(dates, frequency: str) -> np.ndarray:
    """One-hot seasonal indicators per time step.

    daily -> 7 day-of-week channels, monthly -> 12 month channels,
    weekly -> 12 month channels of the week start.  Each column sums to 1.
    """
    if frequency == "daily":
        idx = np.array([d.weekday() for d in dates])
        width = 7
    elif frequency in ("monthly", "weekly"):
        idx = np.array([d.month - 1 for d in dates])
        width = 12
    else:
        raise DataError(f"unsupported frequency '{frequency}'; use daily, weekly, or monthly")
    out = np.zeros((width, len(idx)))
    out[idx, np.arange(len(idx))] = 1.0
    return out


def infer_frequency(dates) -> str:
    if len(dates) < 2:
        raise DataError("need at least two dates to infer a frequency")
    delta = (dates[1] - dates[0]).days
    if delta == 1:
        return "daily"
    if delta == 7:
        return "weekly"
    if 28 <= delta <= 31:
        return "monthly"
    raise DataError(f"cannot infer frequency from a spacing of {delta} days")


def _check_calendar(dates, frequency: str) -> None:
    for a, b in zip(dates, dates[1:]):
        expected = _next_date(a, frequency)
        ok = b == expected if frequency != "monthly" else (b.year, b.month) == (expected.year, expected.month)
        if not ok:
            raise DataError(f"calendar gap: {a} is not followed by {b} at {frequency} frequency")


# -- feature assembly ------------------------------------------------------


def build_feature_bundle(
    y: np.ndarray,
    hierarchy: HierarchyStructure,
    dates,
    frequency: str,
    horizon: int,
    extra_hist: dict | None = None,
    extra_fut: dict | None = None,
) -> FeatureBundle:
    """Assemble the standard feature layout from a panel.

    Static: series one-hot plus aggregate-membership one-hots (the static
    dense layer turns these into learned embeddings).  Historical: the
    series' own log1p counts (bottom) and log1p aggregate histories plus
    calendar one-hots (shared).  Future: calendar one-hots (shared).
    ``extra_hist`` / ``extra_fut`` append externally supplied channels,
    keyed ``(name) -> array``; see :func:`load_feature_csv`.
    """
    n_b, t = y.shape
    full_dates = extend_dates(dates, frequency, horizon)
    calendar = build_calendar_features(full_dates, frequency)

    static_bottom = np.concatenate([np.eye(n_b), hierarchy.agg_matrix.T], axis=1)
    static_shared = np.ones(1)

    hist_bottom = np.log1p(y)[:, None, :]
    agg_hist = np.log1p(aggregate_values(hierarchy, y)[: hierarchy.n_agg])
    hist_shared = np.concatenate([agg_hist, calendar[:, :t]], axis=0)

    fut_bottom = np.zeros((n_b, 0, t + horizon))
    fut_shared = calendar

    if extra_hist:
        for name, arr in extra_hist.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape == (t,):
                hist_shared = np.concatenate([hist_shared, arr[None, :]], axis=0)
            elif arr.shape == (n_b, t):
                hist_bottom = np.concatenate([hist_bottom, arr[:, None, :]], axis=1)
            else:
                raise DataError(f"historical feature '{name}' has shape {arr.shape}, want ({t},) or ({n_b}, {t})")
    if extra_fut:
        for name, arr in extra_fut.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape == (t + horizon,):
                fut_shared = np.concatenate([fut_shared, arr[None, :]], axis=0)
            elif arr.shape == (n_b, t + horizon):
                fut_bottom = np.concatenate([fut_bottom, arr[:, None, :]], axis=1)
            else:
                raise DataError(
                    f"future feature '{name}' has shape {arr.shape}, want ({t + horizon},) or ({n_b}, {t + horizon})"
                )

    return FeatureBundle(
        static_bottom=static_bottom,
        static_shared=static_shared,
        hist_bottom=hist_bottom,
        hist_shared=hist_shared,
        fut_bottom=fut_bottom,
        fut_shared=fut_shared,
    )


# -- CSV ingestion ---------------------------------------------------------


def _parse_dates(raw) -> list:
    out = []
    for value in raw:
        try:
            out.append(datetime.date.fromisoformat(str(value)))
        except ValueError:
            raise DataError(f"date '{value}' is not ISO formatted (YYYY-MM-DD)") from None
    return out


def load_csv(
    path: str,
    hierarchy: HierarchyStructure,
    horizon: int,
    frequency: str | None = None,
    feature_paths=(),
    start_date: str | None = None,
) -> SeriesDataset:
    """Read a long-format panel (series_id, date, value) into a dataset.

    The panel must be balanced: every bottom series of the hierarchy needs a
    value for every date.  ``start_date`` optionally drops history before a
    cutoff.  ``feature_paths`` name extra covariate CSVs keyed
    (series_id | __shared__, date, feature, value).
    """
    frame = pd.read_csv(path, dtype={"series_id": str})
    needed = {"series_id", "date", "value"}
    if set(frame.columns) < needed:
        raise DataError(f"panel CSV needs columns {sorted(needed)}, got {list(frame.columns)}")
    frame["date"] = _parse_dates(frame["date"])
    if start_date is not None:
        cutoff = datetime.date.fromisoformat(start_date)
        frame = frame[frame["date"] >= cutoff]
        if frame.empty:
            raise DataError(f"no observations on or after {start_date}")

    known = set(hierarchy.bottom_names)
    seen = set(frame["series_id"])
    unknown = seen - known
    if unknown:
        raise DataError(f"panel contains series not in the hierarchy: {sorted(unknown)[:5]}")
    missing_series = known - seen
    if missing_series:
        raise DataError(f"panel is missing hierarchy series: {sorted(missing_series)[:5]}")

    if frame.duplicated(["series_id", "date"]).any():
        dup = frame[frame.duplicated(["series_id", "date"])].iloc[0]
        raise DataError(f"duplicate observation for ({dup['series_id']}, {dup['date']})")
    wide = frame.pivot_table(index="series_id", columns="date", values="value", aggfunc="first")
    if wide.isna().any().any():
        rows, cols = np.where(wide.isna().values)
        holes = [(str(wide.index[r]), str(wide.columns[c])) for r, c in zip(rows[:5], cols[:5])]
        raise DataError(f"unbalanced panel; first missing cells: {holes}")

    dates = list(wide.columns)
    freq = frequency or infer_frequency(dates)
    _check_calendar(dates, freq)
    y = wide.loc[list(hierarchy.bottom_names)].to_numpy(dtype=np.float64)
    if (y < 0).any():
        raise DataError("panel contains negative values")

    extra_hist: dict[str, np.ndarray] = {}
    extra_fut: dict[str, np.ndarray] = {}
    for fpath in feature_paths:
        hist_part, fut_part = load_feature_csv(fpath, hierarchy, dates, freq, horizon)
        extra_hist.update(hist_part)
        extra_fut.update(fut_part)

    features = build_feature_bundle(y, hierarchy, dates, freq, horizon, extra_hist, extra_fut)
    return SeriesDataset(
        y=y,
        dates=tuple(dates),
        frequency=freq,
        hierarchy=hierarchy,
        horizon=horizon,
        features=features,
    )


def load_feature_csv(path: str, hierarchy: HierarchyStructure, dates, frequency: str, horizon: int):
    """Split covariates from a long CSV into historical and future channels.

    A feature whose values extend through the forecast horizon is treated
    as known-future; one covering only the panel dates is historical.
    Shared rows use the ``__shared__`` series id.
    """
    frame = pd.read_csv(path, dtype={"series_id": str, "feature": str})
    needed = {"series_id", "date", "feature", "value"}
    if set(frame.columns) < needed:
        raise DataError(f"feature CSV needs columns {sorted(needed)}, got {list(frame.columns)}")
    frame["date"] = _parse_dates(frame["date"])
    full_dates = extend_dates(dates, frequency, horizon)
    hist_index = {d: i for i, d in enumerate(dates)}
    full_index = {d: i for i, d in enumerate(full_dates)}
    bottom_index = {name: i for i, name in enumerate(hierarchy.bottom_names)}
    t, n_b = len(dates), hierarchy.n_bottom

    hist_out: dict[str, np.ndarray] = {}
    fut_out: dict[str, np.ndarray] = {}
    for name, block in frame.groupby("feature"):
        future_known = block["date"].max() > dates[-1]
        span = full_index if future_known else hist_index
        width = t + horizon if future_known else t
        shared = set(block["series_id"]) == {"__shared__"}
        filled = np.full((1 if shared else n_b, width), np.nan)
        for _, row in block.iterrows():
            if row["date"] not in span:
                continue
            r = 0 if shared else bottom_index.get(row["series_id"])
            if r is None:
                raise DataError(f"feature '{name}' references unknown series '{row['series_id']}'")
            filled[r, span[row["date"]]] = float(row["value"])
        if np.isnan(filled).any():
            raise DataError(f"feature '{name}' does not cover every required (series, date) cell")
        target = fut_out if future_known else hist_out
        target[str(name)] = filled[0] if shared else filled
    return hist_out, fut_out


def preprocess_counts(ds: SeriesDataset, mode: str = "round", scale_factor: float = 1.0) -> SeriesDataset:
    """Turn a real-valued panel into counts.

    ``round`` rounds to the nearest integer; ``scale_round`` multiplies by
    ``scale_factor`` first and records it on the dataset so forecasts can be
    mapped back to original units.
    """
    if mode not in ("round", "scale_round"):
        raise DataError(f"unknown preprocessing mode '{mode}'")
    factor = float(scale_factor) if mode == "scale_round" else 1.0
    if factor <= 0:
        raise DataError("scale factor must be positive")
    y = np.rint(ds.y * factor)
    if (y < 0).any():
        raise DataError("panel contains negative values")
    features = build_feature_bundle(y, ds.hierarchy, ds.dates, ds.frequency, ds.horizon)
    return SeriesDataset(
        y=y,
        dates=ds.dates,
        frequency=ds.frequency,
        hierarchy=ds.hierarchy,
        horizon=ds.horizon,
        features=features,
        scale_factor=ds.scale_factor * factor,
    )


# -- synthetic generation --------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground-truth mixture process for recovery experiments.

    One component index is drawn per horizon-length window (windows tiled
    back from the final date, matching the forecast windows) and shared by
    all series; counts are then independent Poisson draws.  ``shared_idio``
    additionally multiplies each (series, window) rate by a lognormal
    idiosyncratic factor with unit mean, which adds per-series dispersion
    while keeping the cross-series component structure.
    """

    n_bottom: int = 8
    k_true: int = 4
    horizon: int = 7
    length: int = 200
    law: str = "shared"  # or "shared_idio"
    weights: tuple | None = None
    rate_low: float = 2.0
    rate_high: float = 10.0
    multiplier_spread: float = 0.65
    idio_sigma: float = 0.5
    group_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.law not in ("shared", "shared_idio"):
            raise DataError(f"unknown synthetic law '{self.law}'")
        if self.length <= 2 * self.horizon:
            raise DataError("synthetic length must exceed two horizons")
        if self.weights is not None and len(self.weights) != self.k_true:
            raise DataError(f"{len(self.weights)} weights for {self.k_true} components")
        if not 0.0 <= self.multiplier_spread < 1.0:
            raise DataError("multiplier spread must lie in [0, 1)")


def component_multipliers(k: int, spread: float, weights: np.ndarray) -> np.ndarray:
    """Evenly spread per-component level multipliers with unit mixture mean."""
    if k == 1:
        return np.ones(1)
    raw = np.linspace(1.0 - spread, 1.0 + spread, k)
    return raw / float(weights @ raw)


def chunked_hierarchy(n_bottom: int, chunk: int = 4) -> HierarchyStructure:
    """Three-level structure: total, consecutive chunks, bottom series."""
    bottoms = tuple(f"b{i:03d}" for i in range(n_bottom))
    starts = list(range(0, n_bottom, chunk))
    groups = [(f"g{gi:02d}", list(range(s, min(s + chunk, n_bottom)))) for gi, s in enumerate(starts)]
    matrix = np.zeros((1 + len(groups), n_bottom), dtype=np.int64)
    matrix[0] = 1
    for gi, (_, members) in enumerate(groups):
        matrix[1 + gi, members] = 1
    agg_names = ("total",) + tuple(name for name, _ in groups)
    levels = {
        "total": (0,),
        "groups": tuple(range(1, 1 + len(groups))),
        "bottom": tuple(range(1 + len(groups), 1 + len(groups) + n_bottom)),
    }
    return HierarchyStructure(bottoms, agg_names, matrix, levels)


def generate_synthetic(spec: SyntheticSpec):
    """Draw a dataset from the described mixture process.

    Returns:
        (dataset, truth) where ``truth`` is the exact mixture
        parameterization of a fresh forecast window (for ``shared_idio``
        the idiosyncratic factor is integrated out to its mean, so the
        returned truth is the shared-structure part).
    """
    rng = np.random.default_rng(spec.seed)
    n_b, k, h, t = spec.n_bottom, spec.k_true, spec.horizon, spec.length
    weights = (
        np.full(k, 1.0 / k) if spec.weights is None else np.asarray(spec.weights, dtype=np.float64)
    )
    base = rng.uniform(spec.rate_low, spec.rate_high, size=n_b)
    mult = component_multipliers(k, spec.multiplier_spread, weights)
    true_rates = np.repeat((base[:, None] * mult[None, :])[:, :, None], h, axis=2)

    window_id = (t - 1 - np.arange(t)) // h
    n_windows = int(window_id.max()) + 1
    comp_per_window = rng.choice(k, size=n_windows, p=weights)
    comp = comp_per_window[window_id]  # (t,)
    lam = base[:, None] * mult[comp][None, :]
    if spec.law == "shared_idio":
        sigma = spec.idio_sigma
        idio = rng.lognormal(mean=-0.5 * sigma**2, sigma=sigma, size=(n_b, n_windows))
        lam = lam * idio[:, window_id]
    y = rng.poisson(lam).astype(np.float64)

    hierarchy = chunked_hierarchy(n_b, spec.group_size)
    start = datetime.date(2024, 1, 1)
    dates = tuple(start + datetime.timedelta(days=i) for i in range(t))
    features = build_feature_bundle(y, hierarchy, dates, "daily", h)
    ds = SeriesDataset(
        y=y,
        dates=dates,
        frequency="daily",
        hierarchy=hierarchy,
        horizon=h,
        features=features,
    )
    truth = PoissonMixtureForecast(weights, true_rates)
    return ds, truth
