"""Negative log-likelihood objectives for the mixture output head.

Three training criteria over a rate tensor (series, component, step) and a
weight vector:

* ``nll_joint`` scores the full multivariate window in one mixture;
* ``nll_naivebu`` composites per-series likelihoods, each its own mixture
  over the shared weight vector;
* ``nll_groupbu`` composites likelihoods of configured groups of series,
  the middle ground between the two.

All composite parts get uniform weight, and every objective is divided by
its number of (series, step) terms so values are comparable across schemes
and window sizes.  Mixture components keep their identity across parts
through the shared weight index, which is what lets a model trained on any
of these criteria sample coherently afterwards.

Inputs may be plain arrays or autograd Tensors; the result is always a
scalar Tensor, differentiable w.r.t. rates and weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml
from scipy.special import gammaln

from . import autograd as ag
from .autograd import Tensor, as_tensor
from .hierarchy import HierarchyStructure
from .mixture import RATE_FLOOR, WEIGHT_FLOOR


def logsumexp(values):
    """Stable log-sum-exp over the trailing axis.

    A Tensor argument stays in the autograd graph (the max shift is
    detached, so the gradient is the softmax of the inputs); anything else
    is reduced to a plain float.
    """
    if isinstance(values, Tensor):
        if values.size == 0:
            raise ValueError("logsumexp of an empty vector")
        return _logsumexp_last(values)
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = v.max()
    if not np.isfinite(m):
        # all -inf stays -inf; +inf propagates
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


@dataclass(frozen=True)
class GroupingScheme:
    """Named partition (or cover) of bottom series used by the group objective.

    Groups may overlap; together they must cover every bottom index.
    """

    groups: tuple
    n_bottom: int
    names: tuple = ()

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        names = tuple(self.names) if self.names else tuple(f"group_{i}" for i in range(len(groups)))
        object.__setattr__(self, "names", names)
        if not groups:
            raise ValueError("a grouping needs at least one group")
        if len(names) != len(groups):
            raise ValueError(f"{len(names)} names for {len(groups)} groups")
        covered: set[int] = set()
        for name, g in zip(names, groups):
            if not g:
                raise ValueError(f"group '{name}' is empty")
            if len(set(g)) != len(g):
                raise ValueError(f"group '{name}' repeats a series index")
            for i in g:
                if not 0 <= i < self.n_bottom:
                    raise ValueError(f"group '{name}' index {i} out of range for {self.n_bottom} series")
            covered.update(g)
        if covered != set(range(self.n_bottom)):
            missing = sorted(set(range(self.n_bottom)) - covered)
            raise ValueError(f"groups do not cover bottom series {missing}")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def membership_matrix(self) -> np.ndarray:
        """(n_groups, n_bottom) 0/1 matrix; row g marks the members of group g."""
        mat = np.zeros((self.n_groups, self.n_bottom))
        for gi, g in enumerate(self.groups):
            mat[gi, list(g)] = 1.0
        return mat

    @classmethod
    def singletons(cls, n_bottom: int) -> "GroupingScheme":
        return cls(tuple((i,) for i in range(n_bottom)), n_bottom)

    @classmethod
    def single_group(cls, n_bottom: int) -> "GroupingScheme":
        return cls((tuple(range(n_bottom)),), n_bottom, names=("all",))

    @classmethod
    def from_hierarchy_level(cls, structure: HierarchyStructure, label: str) -> "GroupingScheme":
        """One group per row of the chosen level, holding its bottom members."""
        rows = structure.level_rows(label)
        groups = tuple(structure.members(r) for r in rows)
        names = tuple(structure.row_names[r] for r in rows)
        return cls(groups, structure.n_bottom, names=names)

    @classmethod
    def from_yaml(cls, text: str, bottom_names) -> "GroupingScheme":
        """Parse a document of the form ``groups: {name: [bottom ids]}``."""
        doc = yaml.safe_load(text)
        if not isinstance(doc, dict) or set(doc) != {"groups"} or not isinstance(doc["groups"], dict):
            raise ValueError("grouping file must contain a single 'groups' mapping")
        index = {name: i for i, name in enumerate(bottom_names)}
        names, groups = [], []
        for label, members in doc["groups"].items():
            if not isinstance(members, list) or not members:
                raise ValueError(f"group '{label}' must be a non-empty list")
            try:
                groups.append(tuple(index[m] for m in members))
            except KeyError as err:
                raise ValueError(f"group '{label}' references unknown series {err.args[0]!r}") from None
            names.append(str(label))
        return cls(tuple(groups), len(index), names=tuple(names))


def default_grouping(structure: HierarchyStructure) -> GroupingScheme:
    """Derive a grouping from the finest all-aggregate level of a structure.

    Falls back to one full group when no aggregate level covers the bottom.
    """
    candidate = None
    for label in structure.levels:
        rows = structure.level_rows(label)
        if all(r < structure.n_agg for r in rows):
            covered = set()
            for r in rows:
                covered.update(structure.members(r))
            if covered == set(range(structure.n_bottom)):
                candidate = label
    if candidate is None:
        return GroupingScheme.single_group(structure.n_bottom)
    return GroupingScheme.from_hierarchy_level(structure, candidate)


# -- internals -------------------------------------------------------------


def _prep(rates, weights, y):
    rates = as_tensor(rates)
    weights = as_tensor(weights)
    y = np.asarray(y, dtype=np.float64)
    if rates.ndim != 3:
        raise ValueError(f"rates must be (series, components, steps), got shape {rates.shape}")
    n_b, n_k, h = rates.shape
    if weights.shape != (n_k,):
        raise ValueError(f"weights must have shape ({n_k},), got {weights.shape}")
    if y.shape != (n_b, h):
        raise ValueError(f"counts must have shape {(n_b, h)}, got {y.shape}")
    if (y < 0).any() or not np.all(y == np.rint(y)):
        raise ValueError("counts must be nonnegative integers")
    return rates, weights, y


def _count_terms(rates: Tensor, y: np.ndarray) -> Tensor:
    """Per-cell y*log(rate) - rate, shape (series, components, steps)."""
    y3 = np.broadcast_to(y[:, None, :], rates.shape)
    return Tensor(y3) * rates.clamp_min(RATE_FLOOR).log() - rates


def _log_weights(weights: Tensor) -> Tensor:
    return weights.clamp_min(WEIGHT_FLOOR).log()


def _logsumexp_last(v: Tensor) -> Tensor:
    """Log-sum-exp over the trailing axis of a Tensor, keeping gradients exact.

    The shift uses the detached max, which leaves the gradient (a softmax)
    unchanged.
    """
    m = v.values.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = v - Tensor(np.broadcast_to(m, v.shape))
    return shifted.exp().sum(axis=-1).log() + Tensor(m.squeeze(-1))


def nll_joint(rates, weights, y) -> Tensor:
    """Negative log-likelihood of the full window under the joint mixture.

    Returns a scalar Tensor: -log sum_k w_k prod_cells Poisson(y | rate),
    divided by the number of (series, step) terms.
    """
    rates, weights, y = _prep(rates, weights, y)
    n_b, _, h = rates.shape
    per_comp = _count_terms(rates, y).sum(axis=(0, 2))
    ll = _logsumexp_last(_log_weights(weights) + per_comp) - float(gammaln(y + 1.0).sum())
    return -ll / float(n_b * h)


def nll_naivebu(rates, weights, y) -> Tensor:
    """Composite likelihood with one mixture per bottom series.

    Cross-series dependence drops out of the objective; component identity
    survives only through the shared weight vector.
    """
    rates, weights, y = _prep(rates, weights, y)
    n_b, n_k, h = rates.shape
    per_series = _count_terms(rates, y).sum(axis=2)  # (series, components)
    logw = _log_weights(weights).reshape((1, n_k)).tile_rows(n_b)
    ll = _logsumexp_last(logw + per_series).sum() - float(gammaln(y + 1.0).sum())
    return -ll / float(n_b * h)


def nll_groupbu(rates, weights, y, scheme: GroupingScheme) -> Tensor:
    """Composite likelihood over configured groups of bottom series.

    Each group is scored as one joint mixture over its members and the full
    horizon; parts get uniform weight.  A single all-series group recovers
    the joint objective; singleton groups recover the per-series one.
    """
    rates, weights, y = _prep(rates, weights, y)
    n_b, n_k, h = rates.shape
    if scheme.n_bottom != n_b:
        raise ValueError(f"grouping covers {scheme.n_bottom} series, rates have {n_b}")
    member = scheme.membership_matrix()
    per_series = _count_terms(rates, y).sum(axis=2)  # (series, components)
    per_group = Tensor(member) @ per_series  # (groups, components)
    logw = _log_weights(weights).reshape((1, n_k)).tile_rows(scheme.n_groups)
    const = float((member @ gammaln(y + 1.0).sum(axis=1)).sum())
    ll = _logsumexp_last(logw + per_group).sum() - const
    n_terms = float(member.sum() * h)
    return -ll / n_terms


def nll_batch(rates, weights, y, scheme) -> Tensor:
    """Mean composite NLL over a leading batch of forecast windows.

    Args:
        rates: Tensor (batch, series, components, steps).
        weights: Tensor (batch, components).
        y: array (batch, series, steps).
        scheme: what to composite over -- ``None`` for the joint objective,
            a :class:`GroupingScheme`, or a raw (n_groups, n_series)
            membership matrix (used by the trainer for group sub-batches,
            which need not cover every series).

    One batched graph instead of per-window calls; used by the trainer.
    """
    rates = as_tensor(rates)
    weights = as_tensor(weights)
    y = np.asarray(y, dtype=np.float64)
    if rates.ndim != 4:
        raise ValueError(f"batched rates must be 4-d, got shape {rates.shape}")
    d, n_b, n_k, h = rates.shape
    if weights.shape != (d, n_k) or y.shape != (d, n_b, h):
        raise ValueError(
            f"inconsistent batch shapes: rates {rates.shape}, weights {weights.shape}, counts {y.shape}"
        )
    y4 = np.broadcast_to(y[:, :, None, :], rates.shape)
    terms = (Tensor(y4) * rates.clamp_min(RATE_FLOOR).log() - rates).sum(axis=3)  # (d, b, k)
    logw = _log_weights(weights)
    gam = gammaln(y + 1.0)
    if scheme is None:
        per_part = terms.sum(axis=1)  # (d, k)
        ll = _logsumexp_last(logw + per_part).sum() - float(gam.sum())
        n_terms = d * n_b * h
    else:
        member = scheme.membership_matrix() if isinstance(scheme, GroupingScheme) else np.asarray(scheme, dtype=np.float64)
        if member.ndim != 2 or member.shape[1] != n_b:
            raise ValueError(f"membership matrix shape {member.shape} does not fit {n_b} series")
        n_g = member.shape[0]
        flat = terms.transpose((1, 0, 2)).reshape((n_b, d * n_k))
        per_part = (Tensor(member) @ flat).reshape((n_g, d, n_k)).transpose((1, 0, 2))
        logw3 = logw.reshape((d, 1, n_k)).repeat(n_g, axis=1)
        ll = _logsumexp_last(logw3 + per_part).sum() - float((gam.sum(axis=2) @ member.sum(axis=0)).sum())
        n_terms = d * member.sum() * h
    return -ll / float(n_terms)
