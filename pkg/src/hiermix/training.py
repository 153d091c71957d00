"""Fitting loop: adaptive moment optimizer, checkpoint selection, search.

Training forks decoders from many creation dates along one encoder pass
per step and averages the configured composite likelihood over those
windows.  Validation quality (scaled CRPS across hierarchy levels on the
held-out window) picks the checkpoint to keep; a final refit can shift the
training window forward to reuse the validation data before scoring the
test window.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tensor
from .data import SeriesDataset, partition
from .metrics import QuantileGrid, evaluate
from .mixture import PoissonMixtureForecast
from .network import ModelConfig, PoissonMixtureNet
from .objectives import GroupingScheme, default_grouping, nll_batch

_OBJECTIVES = ("joint", "naive_bu", "group_bu")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "group_bu"
    grouping: GroupingScheme | None = None  # derived from the hierarchy when omitted
    learning_rate: float = 5e-3
    max_epochs: int = 60
    batch_size: int = 0  # groups per step; 0 trains on all groups at once
    rng_seed: int = 0
    eval_every: int = 5
    val_quantiles: int = 9
    date_stride: int = 1
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.objective not in _OBJECTIVES:
            raise ValueError(f"objective must be one of {_OBJECTIVES}, got {self.objective!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("need at least one epoch")
        if self.eval_every < 1 or self.date_stride < 1:
            raise ValueError("eval_every and date_stride must be positive")


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """One bias-corrected adaptive moment update, in place.

    Args:
        params: name -> Tensor leaves to update.
        grads: name -> gradient array; a missing name means zero gradient
            and leaves that parameter untouched this step.

    Returns:
        True if the step was applied; False if any gradient was non-finite,
        in which case parameters and state are left exactly as they were.
    """
    for g in grads.values():
        if not np.isfinite(g).all():
            return False
    state.t += 1
    correct1 = 1.0 - beta1**state.t
    correct2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / correct1) / (np.sqrt(v / correct2) + eps)
    return True


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients down to a global norm cap; returns the raw norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


@dataclass
class TrainResult:
    model: PoissonMixtureNet
    curves: list
    best_epoch: int
    best_val_scrps: float
    aborted: bool = False


def creation_dates(train_end: int, horizon: int, stride: int) -> np.ndarray:
    """Forecast creation dates whose target window stays inside the train range.

    Walks back from the last valid date in steps of ``stride``, so a stride
    equal to the horizon yields non-overlapping windows aligned with the
    validation and test windows.
    """
    last = train_end - horizon - 1
    if last < 0:
        raise ValueError(f"train range of {train_end} cannot hold a horizon-{horizon} window")
    return np.arange(last, -1, -stride)[::-1].copy()


def _resolve_scheme(cfg: TrainConfig, ds: SeriesDataset) -> GroupingScheme | None:
    if cfg.objective == "joint":
        return None
    if cfg.objective == "naive_bu":
        return GroupingScheme.singletons(ds.n_series)
    return cfg.grouping if cfg.grouping is not None else default_grouping(ds.hierarchy)


def _epoch_batches(scheme, cfg: TrainConfig, rng) -> list:
    """Membership matrices for one epoch's steps; whole groups, order shuffled."""
    if scheme is None:
        return [None]
    member = scheme.membership_matrix()
    if cfg.batch_size <= 0 or cfg.batch_size >= scheme.n_groups:
        return [member]
    order = rng.permutation(scheme.n_groups)
    return [member[order[lo : lo + cfg.batch_size]] for lo in range(0, len(order), cfg.batch_size)]


def _validation_scrps(model: PoissonMixtureNet, ds: SeriesDataset, train_end: int, cfg: TrainConfig) -> float:
    rates, weights = model.forward(ds.features, train_end - 1)
    forecast = PoissonMixtureForecast(weights.values, rates.values)
    report = evaluate(
        forecast, ds.hierarchy, ds.y, train_end, QuantileGrid.uniform(cfg.val_quantiles)
    )
    return report.overall_scrps


def _fit(
    model: PoissonMixtureNet,
    ds: SeriesDataset,
    cfg: TrainConfig,
    train_end: int,
    epochs: int,
    validate: bool,
) -> TrainResult:
    if not ds.is_count_panel():
        raise ValueError("panel holds non-integer values; run preprocess_counts first")
    h = ds.horizon
    dates = creation_dates(train_end, h, cfg.date_stride)
    targets = np.stack([ds.y[:, t + 1 : t + 1 + h] for t in dates])
    scheme = _resolve_scheme(cfg, ds)
    rng = np.random.default_rng(cfg.rng_seed)
    state = AdamState()
    curves: list[dict] = []
    best_val = float("inf")
    best_epoch = -1
    best_state = model.state_arrays()
    aborted = False

    # GroupBU subsets of the composite need matching target subsets; the
    # scheme itself filters which series enter the loss, so the full target
    # block can be passed for every batch.
    for epoch in range(1, epochs + 1):
        losses = []
        for step_member in _epoch_batches(scheme, cfg, rng):
            rates, weights = model.forward_stacked(ds.features, dates)
            loss = nll_batch(rates, weights, targets, step_member)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                aborted = True
                break
            model.zero_grads()
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
            clip_gradients(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, cfg.learning_rate)
            losses.append(loss_val)
        if aborted:
            break
        record: dict = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if validate and (epoch % cfg.eval_every == 0 or epoch == epochs):
            val = _validation_scrps(model, ds, train_end, cfg)
            record["val_scrps"] = val
            if np.isfinite(val) and val < best_val:
                best_val = val
                best_epoch = epoch
                best_state = model.state_arrays()
        curves.append(record)

    if validate and best_epoch > 0:
        model.load_state(best_state)
    elif aborted:
        model.load_state(best_state)
    if not validate:
        best_epoch = epochs
        best_val = float("nan")
    return TrainResult(
        model=model,
        curves=curves,
        best_epoch=best_epoch,
        best_val_scrps=best_val,
        aborted=aborted,
    )


def train(model: PoissonMixtureNet, ds: SeriesDataset, cfg: TrainConfig) -> TrainResult:
    """Fit on the training window, keeping the best validation checkpoint.

    A loss that turns non-finite aborts the run and restores the last good
    checkpoint (initial parameters if no validation pass succeeded yet).
    """
    part = partition(ds)
    return _fit(model, ds, cfg, part.train_end, cfg.max_epochs, validate=True)


def retrain_shift(
    model_config: ModelConfig, ds: SeriesDataset, cfg: TrainConfig, epochs: int | None = None
) -> PoissonMixtureNet:
    """Refit from scratch with the training window shifted over validation.

    Trains a fresh model on everything before the test window for a fixed
    number of epochs (no further selection), matching the protocol of
    choosing epochs on validation and then reusing that budget on the
    shifted window.
    """
    from .data import feature_dims

    part = partition(ds)
    model = PoissonMixtureNet(model_config, feature_dims(ds.features), ds.horizon, seed=cfg.rng_seed)
    result = _fit(model, ds, cfg, part.val_end, epochs or cfg.max_epochs, validate=False)
    return result.model


def hyper_search(
    ds: SeriesDataset,
    model_config: ModelConfig,
    base_cfg: TrainConfig,
    space: dict,
    budget: int,
    seed: int,
):
    """Random search over training settings, scored by validation sCRPS.

    Args:
        space: mapping of TrainConfig field name to a list of candidate
            values (e.g. learning_rate, max_epochs, rng_seed).
        budget: number of independent draws.

    Returns:
        (best_cfg, trials) where trials is a list of
        {"config": ..., "val_scrps": ...} in draw order.  Ties keep the
        earliest draw; draws are deterministic given ``seed``.
    """
    from .data import feature_dims

    if budget < 1:
        raise ValueError("search budget must be positive")
    if not space:
        raise ValueError("search space is empty")
    for key in space:
        if not hasattr(base_cfg, key):
            raise ValueError(f"unknown TrainConfig field '{key}' in search space")
    rng = np.random.default_rng(seed)
    trials = []
    best_cfg = None
    best_val = float("inf")
    for _ in range(budget):
        draw = {}
        for key, options in space.items():
            options = list(options)
            pick = options[int(rng.integers(len(options)))]
            draw[key] = pick
        cfg = replace(base_cfg, **draw)
        model = PoissonMixtureNet(model_config, feature_dims(ds.features), ds.horizon, seed=cfg.rng_seed)
        result = train(model, ds, cfg)
        trials.append({"config": draw, "val_scrps": result.best_val_scrps, "best_epoch": result.best_epoch})
        if np.isfinite(result.best_val_scrps) and result.best_val_scrps < best_val:
            best_val = result.best_val_scrps
            best_cfg = cfg
    if best_cfg is None:
        raise RuntimeError("no search trial produced a finite validation score")
    return best_cfg, trials
