"""Self-contained property checks behind the ``verify`` subcommand.

Each check builds its own randomized fixture, compares an implementation
path against an independent reference (brute-force enumeration, Monte
Carlo, or finite differences), and reports pass/fail with a short detail
string. They mirror the invariants the test suite pins down, packaged so
an installed copy can be validated without a checkout.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from . import autograd as ag
from .hierarchy import HierarchyStructure, build_summation_matrix, coherence_residual
from .mixture import (
    MixtureMarginal,
    PoissonMixtureForecast,
    covariance,
    covariance_matrix_nondiag_rank,
    full_forecast,
    marginal_pmf,
    sample_coherent,
)
from .network import ModelConfig, PoissonMixtureNet
from .objectives import GroupingScheme, nll_groupbu, nll_joint, nll_naivebu


def _random_structure(rng: np.random.Generator, n_bottom: int = 6) -> HierarchyStructure:
    half = n_bottom // 2
    agg = np.zeros((3, n_bottom))
    agg[0] = 1.0
    agg[1, :half] = 1.0
    agg[2, half:] = 1.0
    names = [f"b{i}" for i in range(n_bottom)]
    return HierarchyStructure(
        bottom_names=tuple(names),
        agg_names=("total", "left", "right"),
        agg_matrix=agg,
        levels={"top": (0,), "mid": (1, 2), "bottom": tuple(range(3, 3 + n_bottom))},
    )


def _random_forecast(rng: np.random.Generator, n_bottom: int, k: int, horizon: int, rate_cap: float = 8.0) -> PoissonMixtureForecast:
    w = rng.dirichlet(np.ones(k))
    rates = rng.uniform(0.2, rate_cap, size=(n_bottom, k, horizon))
    return PoissonMixtureForecast(w, rates)


def check_sampling_coherence() -> tuple[str, bool, str]:
    rng = np.random.default_rng(11)
    structure = _random_structure(rng)
    forecast = _random_forecast(rng, structure.n_bottom, k=5, horizon=4)
    samples = sample_coherent(forecast, structure, n_samples=2000, rng_seed=3)
    worst = max(coherence_residual(structure, samples[i]) for i in range(samples.shape[0]))
    ok = worst == 0.0 and np.all(samples >= 0) and np.all(samples == np.rint(samples))
    return "sampling_coherence", bool(ok), f"max residual {worst:g} over 2000 paths"


def check_aggregate_marginal() -> tuple[str, bool, str]:
    # The aggregate rate rule must match brute-force convolution of the
    # bottom Poissons within each component.
    rng = np.random.default_rng(12)
    rates = rng.uniform(0.3, 4.0, size=(3, 2, 1))
    w = rng.dirichlet(np.ones(2))
    forecast = PoissonMixtureForecast(w, rates)
    structure = HierarchyStructure(("x", "y", "z"), ("total",), np.ones((1, 3)), {})
    full = full_forecast(forecast, structure)
    agg_marginal = MixtureMarginal(full.weights, full.rates[0, :, 0])
    support = np.arange(0, 60)
    implied = np.array([marginal_pmf(agg_marginal, int(y)) for y in support])
    direct = np.zeros_like(implied)
    for kk in range(2):
        per = [stats.poisson.pmf(support, rates[b, kk, 0]) for b in range(3)]
        conv = per[0]
        for p in per[1:]:
            conv = np.convolve(conv, p)[: len(support)]
        direct += w[kk] * conv
    worst = float(np.max(np.abs(implied - direct)))
    return "aggregate_marginal", worst < 1e-9, f"max abs pmf gap {worst:.2e}"


def check_covariance() -> tuple[str, bool, str]:
    rng = np.random.default_rng(13)
    forecast = _random_forecast(rng, n_bottom=3, k=3, horizon=2, rate_cap=5.0)
    # Closed form vs small-support enumeration for one same-cell and one
    # cross-cell pair.
    support = np.arange(0, 80)
    w, rates = forecast.weights, forecast.rates
    pa = (w[None, :] * stats.poisson.pmf(support[:, None], rates[0, :, 0])).sum(axis=1)
    pb = (w[None, :] * stats.poisson.pmf(support[:, None], rates[1, :, 1])).sum(axis=1)
    mean_a, mean_b = (support * pa).sum(), (support * pb).sum()
    joint = np.zeros((len(support), len(support)))
    for kk in range(3):
        joint += w[kk] * np.outer(
            stats.poisson.pmf(support, rates[0, kk, 0]), stats.poisson.pmf(support, rates[1, kk, 1])
        )
    cross_ref = (np.outer(support - mean_a, support - mean_b) * joint).sum()
    var_ref = ((support - mean_a) ** 2 * pa).sum()
    cross_gap = abs(covariance(forecast, (0, 0), (1, 1)) - cross_ref)
    var_gap = abs(covariance(forecast, (0, 0), (0, 0)) - var_ref)
    worst = float(max(cross_gap, var_gap))
    return "covariance_closed_form", worst < 1e-9, f"max abs gap {worst:.2e}"


def check_covariance_rank() -> tuple[str, bool, str]:
    rng = np.random.default_rng(14)
    worst_excess = -99
    for _ in range(20):
        k = int(rng.integers(2, 6))
        forecast = _random_forecast(rng, n_bottom=int(rng.integers(4, 9)), k=k, horizon=2)
        rank = covariance_matrix_nondiag_rank(forecast, step=1)
        worst_excess = max(worst_excess, rank - (k - 1))
    return "dispersion_rank_bound", worst_excess <= 0, f"max rank excess over k-1: {worst_excess}"


def check_gradients() -> tuple[str, bool, str]:
    rng = np.random.default_rng(15)
    n_b, k, h = 3, 2, 2
    y = rng.poisson(3.0, size=(n_b, h)).astype(np.float64)
    scheme = GroupingScheme(groups=((0, 1), (2,)), n_bottom=n_b)
    log_rates = ag.Tensor(rng.normal(0.5, 0.3, size=(n_b, k, h)), requires_grad=True)
    logits = ag.Tensor(rng.normal(0.0, 0.5, size=(1, k)), requires_grad=True)

    worst = 0.0
    for objective in (nll_joint, nll_naivebu, lambda r, w, yy: nll_groupbu(r, w, yy, scheme)):
        def loss_fn():
            rates = log_rates.exp()
            weights = logits.softmax(axis=1).reshape((k,))
            return objective(rates, weights, y)

        worst = max(worst, ag.grad_check(loss_fn, [log_rates, logits]))
    return "objective_gradients", worst < 1e-3, f"max rel grad gap {worst:.2e}"


def check_network_gradients() -> tuple[str, bool, str]:
    cfg = ModelConfig(
        n_components=2, conv_filters=3, conv_layers=1, kernel_width=2, dilations=(1,),
        static_width=2, future_width=2, context_agg=3, context_spec=3, decoder_hidden=4,
    )
    from .data import SyntheticSpec, feature_dims, generate_synthetic

    ds, _ = generate_synthetic(SyntheticSpec(n_bottom=4, k_true=2, horizon=2, length=40, seed=5))
    net = PoissonMixtureNet(cfg, feature_dims(ds.features), horizon=2, seed=7)
    y = ds.y[:, 20:22]

    names = sorted(net.params)
    picked = [names[i] for i in range(0, len(names), 3)]

    def loss_fn():
        rates, weights = net.forward(ds.features, 19)
        return nll_joint(rates, weights, y)

    gap = ag.grad_check(loss_fn, [net.params[n] for n in picked])
    return "network_gradients", gap < 1e-3, f"max rel grad gap {gap:.2e} over {len(picked)} tensors"


def run_all_checks() -> list[tuple[str, bool, str]]:
    return [
        check_sampling_coherence(),
        check_aggregate_marginal(),
        check_covariance(),
        check_covariance_rank(),
        check_gradients(),
        check_network_gradients(),
    ]
