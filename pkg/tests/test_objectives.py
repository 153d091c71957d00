import numpy as np
import pytest

import hiermix.autograd as ag
from hiermix import (
    GroupingScheme,
    default_grouping,
    nll_batch,
    nll_groupbu,
    nll_joint,
    nll_naivebu,
)
from hiermix.objectives import logsumexp


def _tensors(rates, weights):
    return ag.Tensor(np.asarray(rates, float)), ag.Tensor(np.asarray(weights, float))


# -- logsumexp -------------------------------------------------------------


def test_logsumexp_of_two_zeros():
    v = ag.Tensor(np.array([0.0, 0.0]))
    assert logsumexp(v).item() == pytest.approx(np.log(2.0), abs=1e-15)


def test_logsumexp_resists_underflow():
    v = ag.Tensor(np.array([-1000.0, -1000.0]))
    assert logsumexp(v).item() == pytest.approx(-1000.0 + np.log(2.0), abs=1e-12)


def test_logsumexp_matches_naive_formula():
    rng = np.random.default_rng(0)
    vals = rng.normal(0, 3, size=7)
    naive = np.log(np.exp(vals).sum())
    assert logsumexp(ag.Tensor(vals)).item() == pytest.approx(naive, abs=1e-12)


def test_logsumexp_gradient_is_softmax():
    vals = np.array([0.3, -1.2, 2.0])
    x = ag.Tensor(vals, requires_grad=True)
    logsumexp(x).backward()
    soft = np.exp(vals) / np.exp(vals).sum()
    np.testing.assert_allclose(x.grad, soft, atol=1e-12)


# -- grouping scheme -------------------------------------------------------


def test_grouping_requires_full_cover():
    with pytest.raises(ValueError):
        GroupingScheme(groups=((0, 1),), n_bottom=3)


def test_grouping_rejects_empty_group():
    with pytest.raises(ValueError):
        GroupingScheme(groups=((0, 1), ()), n_bottom=2)


def test_grouping_membership_matrix():
    scheme = GroupingScheme(groups=((0, 2), (1,)), n_bottom=3)
    np.testing.assert_array_equal(scheme.membership_matrix(), [[1, 0, 1], [0, 1, 0]])


def test_grouping_from_hierarchy_level(three_level):
    scheme = GroupingScheme.from_hierarchy_level(three_level, "halves")
    assert scheme.groups == ((0, 1), (2, 3))


def test_default_grouping_prefers_finest_covering_level(three_level):
    scheme = default_grouping(three_level)
    assert scheme.groups == ((0, 1), (2, 3))


def test_grouping_from_yaml():
    text = "groups:\n  left: [a, b]\n  right: [c]\n"
    scheme = GroupingScheme.from_yaml(text, ("a", "b", "c"))
    assert scheme.groups == ((0, 1), (2,))


# -- scalar oracles --------------------------------------------------------


def test_joint_single_cell_value():
    rates, weights = _tensors(np.full((1, 1, 1), 2.0), [1.0])
    assert nll_joint(rates, weights, np.zeros((1, 1))).item() == pytest.approx(2.0, abs=1e-12)


def test_joint_gradient_single_component():
    # d/dlam of (lam - y log lam) = 1 - y/lam = -1 at lam=2, y=4
    rates = ag.Tensor(np.full((1, 1, 1), 2.0), requires_grad=True)
    weights = ag.Tensor(np.array([1.0]))
    nll_joint(rates, weights, np.full((1, 1), 4.0)).backward()
    assert rates.grad[0, 0, 0] == pytest.approx(-1.0, abs=1e-9)


def test_naivebu_two_series_single_component():
    rates, weights = _tensors(np.array([[[1.5]], [[0.7]]]), [1.0])
    got = nll_naivebu(rates, weights, np.array([[2.0], [1.0]])).item()
    assert got == pytest.approx(1.2194459541411744, abs=1e-12)


def test_joint_equals_naivebu_for_single_component():
    rng = np.random.default_rng(1)
    rates = rng.uniform(0.5, 4.0, size=(3, 1, 2))
    y = rng.poisson(2.0, size=(3, 2)).astype(float)
    r, w = _tensors(rates, [1.0])
    assert nll_joint(r, w, y).item() == pytest.approx(nll_naivebu(r, w, y).item(), abs=1e-12)


def test_groupbu_two_groups_frozen_value():
    rng = np.random.default_rng(42)
    rates = rng.uniform(0.5, 4.0, size=(4, 2, 2))
    weights = np.array([0.3, 0.7])
    y = rng.poisson(2.0, size=(4, 2)).astype(float)
    scheme = GroupingScheme(groups=((0, 1), (2, 3)), n_bottom=4)
    r, w = _tensors(rates, weights)
    got = nll_groupbu(r, w, y, scheme).item()
    assert got == pytest.approx(1.9258616943418827, abs=1e-12)


# -- composite-likelihood equivalences -------------------------------------


def test_single_group_equals_joint():
    rng = np.random.default_rng(2)
    for _ in range(10):
        n_b, k, h = (int(rng.integers(1, 5)) for _ in range(3))
        r, w = _tensors(rng.uniform(0.2, 5.0, (n_b, k, h)), rng.dirichlet(np.ones(k)))
        y = rng.poisson(2.0, size=(n_b, h)).astype(float)
        scheme = GroupingScheme.single_group(n_b)
        assert nll_groupbu(r, w, y, scheme).item() == pytest.approx(
            nll_joint(r, w, y).item(), abs=1e-10
        )


def test_singleton_groups_equal_naivebu():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n_b, k, h = (int(rng.integers(1, 5)) for _ in range(3))
        r, w = _tensors(rng.uniform(0.2, 5.0, (n_b, k, h)), rng.dirichlet(np.ones(k)))
        y = rng.poisson(2.0, size=(n_b, h)).astype(float)
        scheme = GroupingScheme.singletons(n_b)
        assert nll_groupbu(r, w, y, scheme).item() == pytest.approx(
            nll_naivebu(r, w, y).item(), abs=1e-10
        )


def test_objectives_invariant_to_component_relabeling():
    rng = np.random.default_rng(4)
    rates = rng.uniform(0.2, 5.0, (4, 3, 2))
    weights = rng.dirichlet(np.ones(3))
    y = rng.poisson(2.0, size=(4, 2)).astype(float)
    perm = np.array([2, 0, 1])
    scheme = GroupingScheme(groups=((0, 1), (2, 3)), n_bottom=4)
    for fn in (
        nll_joint,
        nll_naivebu,
        lambda r, w, yy: nll_groupbu(r, w, yy, scheme),
    ):
        a = fn(*_tensors(rates, weights), y).item()
        b = fn(*_tensors(rates[:, perm, :], weights[perm]), y).item()
        assert a == pytest.approx(b, abs=1e-12)


# -- gradients -------------------------------------------------------------


def test_all_objective_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    n_b, k, h = 4, 3, 3
    y = rng.poisson(3.0, size=(n_b, h)).astype(float)
    scheme = GroupingScheme(groups=((0, 1), (1, 2, 3)), n_bottom=n_b)
    log_rates = ag.Tensor(rng.normal(0.3, 0.4, (n_b, k, h)), requires_grad=True)
    logits = ag.Tensor(rng.normal(0, 0.5, (1, k)), requires_grad=True)

    for objective in (
        nll_joint,
        nll_naivebu,
        lambda r, w, yy: nll_groupbu(r, w, yy, scheme),
    ):
        def f():
            return objective(log_rates.exp(), logits.softmax(axis=1).reshape((k,)), y)

        assert ag.grad_check(f, [log_rates, logits]) < 1e-4


def test_loss_decreases_as_rates_approach_counts():
    # ten small gradient steps on the rates of a fixed batch
    rng = np.random.default_rng(6)
    y = rng.poisson(4.0, size=(3, 2)).astype(float)
    log_rates = ag.Tensor(np.zeros((3, 2, 2)), requires_grad=True)
    weights = ag.Tensor(np.array([0.5, 0.5]))
    losses = []
    for _ in range(10):
        log_rates.zero_grad()
        loss = nll_joint(log_rates.exp(), weights, y)
        losses.append(loss.item())
        loss.backward()
        log_rates = ag.Tensor(log_rates.values - 0.05 * log_rates.grad, requires_grad=True)
    violations = sum(b > a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert violations <= 1


# -- batched form ----------------------------------------------------------


def test_batched_joint_averages_single_date_losses():
    rng = np.random.default_rng(7)
    d, n_b, k, h = 3, 2, 2, 2
    rates = rng.uniform(0.5, 3.0, (d, n_b, k, h))
    weights = rng.dirichlet(np.ones(k), size=d)
    y = rng.poisson(2.0, size=(d, n_b, h)).astype(float)
    batched = nll_batch(ag.Tensor(rates), ag.Tensor(weights), y, None).item()
    singles = [
        nll_joint(ag.Tensor(rates[i]), ag.Tensor(weights[i]), y[i]).item() for i in range(d)
    ]
    assert batched == pytest.approx(np.mean(singles), abs=1e-12)


def test_batched_group_matches_scheme_average():
    rng = np.random.default_rng(8)
    d, n_b, k, h = 2, 4, 3, 2
    scheme = GroupingScheme(groups=((0, 1), (2, 3)), n_bottom=n_b)
    rates = rng.uniform(0.5, 3.0, (d, n_b, k, h))
    weights = rng.dirichlet(np.ones(k), size=d)
    y = rng.poisson(2.0, size=(d, n_b, h)).astype(float)
    batched = nll_batch(ag.Tensor(rates), ag.Tensor(weights), y, scheme).item()
    singles = [
        nll_groupbu(ag.Tensor(rates[i]), ag.Tensor(weights[i]), y[i], scheme).item()
        for i in range(d)
    ]
    assert batched == pytest.approx(np.mean(singles), abs=1e-12)


def test_batched_accepts_partial_membership_rows():
    rng = np.random.default_rng(9)
    d, n_b, k, h = 2, 4, 2, 2
    rates = rng.uniform(0.5, 3.0, (d, n_b, k, h))
    weights = rng.dirichlet(np.ones(k), size=d)
    y = rng.poisson(2.0, size=(d, n_b, h)).astype(float)
    member = np.array([[1.0, 1.0, 0.0, 0.0]])  # just the first group
    got = nll_batch(ag.Tensor(rates), ag.Tensor(weights), y, member).item()
    scheme = GroupingScheme(groups=((0, 1),), n_bottom=2)
    singles = [
        nll_groupbu(ag.Tensor(rates[i, :2]), ag.Tensor(weights[i]), y[i, :2], scheme).item()
        for i in range(d)
    ]
    assert got == pytest.approx(np.mean(singles), abs=1e-12)
