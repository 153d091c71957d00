import numpy as np
import pytest

from hiermix import (
    AdamState,
    GroupingScheme,
    ModelConfig,
    PoissonMixtureNet,
    SyntheticSpec,
    Tensor,
    TrainConfig,
    adam_step,
    clip_gradients,
    creation_dates,
    generate_synthetic,
    hyper_search,
    partition,
    retrain_shift,
    train,
)
from hiermix.data import feature_dims
from hiermix.training import _epoch_batches, _validation_scrps

SLIM = ModelConfig(
    n_components=2,
    conv_filters=4,
    conv_layers=2,
    kernel_width=3,
    dilations=(1, 2),
    static_width=3,
    future_width=3,
    context_agg=5,
    context_spec=4,
    decoder_hidden=6,
)


def _tiny_dataset(seed=3, length=30, horizon=3):
    spec = SyntheticSpec(n_bottom=4, k_true=2, horizon=horizon, length=length, seed=seed)
    ds, _ = generate_synthetic(spec)
    return ds


def _fresh_model(ds, seed=0):
    return PoissonMixtureNet(SLIM, feature_dims(ds.features), ds.horizon, seed=seed)


# -- optimizer -------------------------------------------------------------


def test_adam_first_step_moves_by_signed_rate():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    grads = {"p": np.array([0.3, -4.0, 1e-6])}
    before = p.values.copy()
    applied = adam_step({"p": p}, grads, AdamState(), lr=0.01)
    assert applied
    # bias correction makes the first update lr * g/|g| up to eps
    np.testing.assert_allclose(before - p.values, 0.01 * np.sign(grads["p"]), atol=1e-4)


def test_adam_leaves_unlisted_params_alone():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([5.0]), requires_grad=True)
    adam_step({"a": a, "b": b}, {"a": np.array([1.0])}, AdamState(), lr=0.1)
    assert b.values[0] == 5.0
    assert a.values[0] != 1.0


def test_adam_minimizes_a_quadratic():
    x = Tensor(np.array([2.0]), requires_grad=True)
    state = AdamState()
    for _ in range(100):
        adam_step({"x": x}, {"x": 2.0 * x.values}, state, lr=0.1)
    assert abs(x.values[0]) < 0.05


def test_adam_skips_nonfinite_gradients():
    x = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState()
    adam_step({"x": x}, {"x": np.array([1.0])}, state, lr=0.1)
    snapshot = x.values.copy()
    applied = adam_step({"x": x}, {"x": np.array([np.nan])}, state, lr=0.1)
    assert not applied
    assert state.t == 1  # counter untouched by the rejected step
    np.testing.assert_array_equal(x.values, snapshot)


def test_clip_gradients_caps_global_norm():
    grads = {"a": np.array([3.0, 4.0]), "b": np.array([0.0, 12.0])}
    raw = clip_gradients(grads, max_norm=6.5)
    assert raw == pytest.approx(13.0)
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    assert total == pytest.approx(6.5)

    small = {"a": np.array([0.3])}
    assert clip_gradients(small, max_norm=10.0) == pytest.approx(0.3)
    np.testing.assert_array_equal(small["a"], np.array([0.3]))


def test_clip_disabled_with_zero_cap():
    grads = {"a": np.array([30.0])}
    clip_gradients(grads, max_norm=0.0)
    np.testing.assert_array_equal(grads["a"], np.array([30.0]))


# -- schedule helpers ------------------------------------------------------


def test_creation_dates_dense_stride():
    dates = creation_dates(train_end=86, horizon=7, stride=1)
    assert len(dates) == 79
    assert dates[0] == 0 and dates[-1] == 78
    assert np.all(np.diff(dates) == 1)


def test_creation_dates_horizon_stride_aligns_with_train_end():
    dates = creation_dates(train_end=86, horizon=7, stride=7)
    assert dates[-1] == 78  # window [79, 86) touches the train boundary
    assert np.all(np.diff(dates) == 7)


def test_creation_dates_need_one_window():
    with pytest.raises(ValueError):
        creation_dates(train_end=7, horizon=7, stride=1)
    single = creation_dates(train_end=8, horizon=7, stride=1)
    np.testing.assert_array_equal(single, [0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(objective="reconcile")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(eval_every=0)
    with pytest.raises(ValueError):
        TrainConfig(date_stride=-1)


# -- batching --------------------------------------------------------------


def test_groupbu_batches_keep_groups_whole(three_level):
    scheme = GroupingScheme.from_hierarchy_level(three_level, "halves")
    cfg = TrainConfig(objective="group_bu", batch_size=1)
    member = scheme.membership_matrix()
    batches = _epoch_batches(scheme, cfg, np.random.default_rng(0))
    assert len(batches) == scheme.n_groups
    seen = np.zeros(ds_rows := member.shape[0])
    for batch in batches:
        assert batch.shape == (1, member.shape[1])
        match = [i for i in range(member.shape[0]) if np.array_equal(batch[0], member[i])]
        assert len(match) == 1  # every batch is exactly one whole group
        seen[match[0]] += 1
    np.testing.assert_array_equal(seen, np.ones(ds_rows))


def test_full_batch_when_size_covers_all_groups(three_level):
    scheme = GroupingScheme.from_hierarchy_level(three_level, "halves")
    cfg = TrainConfig(objective="group_bu", batch_size=0)
    batches = _epoch_batches(scheme, cfg, np.random.default_rng(0))
    assert len(batches) == 1
    np.testing.assert_array_equal(batches[0], scheme.membership_matrix())


def test_joint_objective_uses_single_unit_batch():
    cfg = TrainConfig(objective="joint")
    assert _epoch_batches(None, cfg, np.random.default_rng(0)) == [None]


# -- training loop ---------------------------------------------------------


def test_train_runs_and_records_curves():
    ds = _tiny_dataset()
    cfg = TrainConfig(objective="group_bu", max_epochs=4, eval_every=2, learning_rate=3e-3)
    result = train(_fresh_model(ds), ds, cfg)
    assert not result.aborted
    assert [c["epoch"] for c in result.curves] == [1, 2, 3, 4]
    assert all(np.isfinite(c["train_loss"]) for c in result.curves)
    assert "val_scrps" in result.curves[1] and "val_scrps" not in result.curves[0]
    assert result.best_epoch in (2, 4)


def test_train_is_seed_reproducible():
    ds = _tiny_dataset()
    cfg = TrainConfig(objective="group_bu", max_epochs=3, eval_every=1, rng_seed=7)
    res_a = train(_fresh_model(ds, seed=2), ds, cfg)
    res_b = train(_fresh_model(ds, seed=2), ds, cfg)
    assert res_a.curves == res_b.curves
    state_a, state_b = res_a.model.state_arrays(), res_b.model.state_arrays()
    for name in state_a:
        np.testing.assert_array_equal(state_a[name], state_b[name])


def test_train_selects_checkpoint_with_recorded_score():
    ds = _tiny_dataset()
    cfg = TrainConfig(objective="naive_bu", max_epochs=4, eval_every=1, learning_rate=3e-3)
    result = train(_fresh_model(ds), ds, cfg)
    part = partition(ds)
    rescored = _validation_scrps(result.model, ds, part.train_end, cfg)
    assert rescored == pytest.approx(result.best_val_scrps, abs=1e-12)
    evaluated = [c["val_scrps"] for c in result.curves if "val_scrps" in c]
    assert result.best_val_scrps == pytest.approx(min(evaluated), abs=1e-15)


def test_train_aborts_on_nonfinite_loss_without_stepping():
    ds = _tiny_dataset()
    model = _fresh_model(ds)
    poisoned = model.state_arrays()
    first = next(iter(poisoned))
    poisoned[first] = poisoned[first].copy()
    poisoned[first][...] = np.nan
    model.load_state(poisoned)
    with np.errstate(invalid="ignore"):
        result = train(model, ds, TrainConfig(objective="joint", max_epochs=3))
    assert result.aborted
    assert result.curves == []
    assert result.best_epoch == -1


def test_train_requires_count_panel(three_level):
    import datetime

    from hiermix import SeriesDataset
    from hiermix.data import build_feature_bundle

    y = np.full((4, 20), 1.5)
    dates = [datetime.date(2024, 1, 1) + datetime.timedelta(days=d) for d in range(20)]
    fb = build_feature_bundle(y, three_level, dates, "daily", 3)
    ds = SeriesDataset(y=y, dates=dates, frequency="daily", hierarchy=three_level,
                       horizon=3, features=fb)
    with pytest.raises(ValueError, match="preprocess"):
        train(_fresh_model(ds), ds, TrainConfig(max_epochs=1))


def test_low_rate_descent_is_nearly_monotone():
    ds = _tiny_dataset(seed=5)
    cfg = TrainConfig(objective="joint", max_epochs=8, eval_every=8, learning_rate=1e-4)
    result = train(_fresh_model(ds), ds, cfg)
    losses = [c["train_loss"] for c in result.curves]
    violations = sum(1 for a, b in zip(losses, losses[1:]) if b > a)
    assert violations <= 1


# -- shifted refit and search ----------------------------------------------


def test_retrain_shift_uses_the_extended_window():
    ds = _tiny_dataset(length=24)
    cfg = TrainConfig(objective="group_bu", max_epochs=2, rng_seed=1)
    model = retrain_shift(SLIM, ds, cfg, epochs=2)
    part = partition(ds)
    rates, weights = model.forward(ds.features, part.val_end - 1)
    assert np.isfinite(rates.values).all() and np.isfinite(weights.values).all()
    assert rates.values.shape == (4, SLIM.n_components, ds.horizon)
    # shifted window holds more creation dates than the plain train range
    assert len(creation_dates(part.val_end, ds.horizon, 1)) > len(
        creation_dates(part.train_end, ds.horizon, 1)
    )


def test_hyper_search_budget_one_returns_that_draw():
    ds = _tiny_dataset(length=24)
    base = TrainConfig(objective="naive_bu", max_epochs=2, eval_every=2)
    space = {"learning_rate": [1e-3, 5e-3]}
    best_cfg, trials = hyper_search(ds, SLIM, base, space, budget=1, seed=0)
    assert len(trials) == 1
    assert best_cfg.learning_rate == trials[0]["config"]["learning_rate"]
    assert np.isfinite(trials[0]["val_scrps"])


def test_hyper_search_best_bounds_all_trials_and_reproduces():
    ds = _tiny_dataset(length=24)
    base = TrainConfig(objective="naive_bu", max_epochs=2, eval_every=2)
    space = {"learning_rate": [1e-3, 5e-3], "rng_seed": [0, 1]}
    best_cfg, trials = hyper_search(ds, SLIM, base, space, budget=3, seed=11)
    best_score = min(t["val_scrps"] for t in trials)
    chosen = [t for t in trials if t["val_scrps"] == best_score][0]
    assert best_cfg.learning_rate == chosen["config"].get("learning_rate", base.learning_rate)

    _, trials_again = hyper_search(ds, SLIM, base, space, budget=3, seed=11)
    assert [t["config"] for t in trials] == [t["config"] for t in trials_again]
    assert [t["val_scrps"] for t in trials] == [t["val_scrps"] for t in trials_again]


def test_hyper_search_validates_inputs():
    ds = _tiny_dataset(length=24)
    base = TrainConfig(max_epochs=1)
    with pytest.raises(ValueError):
        hyper_search(ds, SLIM, base, {"learning_rate": [1e-3]}, budget=0, seed=0)
    with pytest.raises(ValueError):
        hyper_search(ds, SLIM, base, {}, budget=1, seed=0)
    with pytest.raises(ValueError):
        hyper_search(ds, SLIM, base, {"warp_speed": [1]}, budget=1, seed=0)
