"""Aggregation structure for hierarchical and grouped collections of series.

A structure is defined entirely by a binary aggregation matrix ``A`` of
shape (n_agg, n_bottom): row ``i`` marks the bottom series that sum into
aggregate ``i``.  Grouped (non-tree) structures are supported, so a bottom
series may belong to several aggregates at the same depth.  The summation
matrix stacks ``A`` on top of an identity block, mapping a bottom-level
vector to the full vector over every row of the structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class HierarchyStructure:
    """Named aggregation structure, immutable after construction.

    Attributes:
        bottom_names: names of the bottom-level series, in column order.
        agg_names: names of the aggregate rows, in row order (top first).
        agg_matrix: (n_agg, n_bottom) array with 0/1 entries.
        levels: mapping from level label to row indices into the stacked
            order ``agg_names + bottom_names``.  Every row belongs to
            exactly one level.
    """

    bottom_names: tuple
    agg_names: tuple
    agg_matrix: np.ndarray
    levels: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bottom_names", tuple(self.bottom_names))
        object.__setattr__(self, "agg_names", tuple(self.agg_names))
        mat = np.asarray(self.agg_matrix, dtype=np.int64)
        if mat.size == 0:
            mat = mat.reshape(0, len(self.bottom_names))
        object.__setattr__(self, "agg_matrix", mat)
        object.__setattr__(self, "levels", {str(k): tuple(int(i) for i in v) for k, v in self.levels.items()})
        self._validate()
        self.agg_matrix.setflags(write=False)

    def _validate(self) -> None:
        n_a, n_b = self.agg_matrix.shape
        if len(self.bottom_names) != n_b:
            raise HierarchyError(
                f"{len(self.bottom_names)} bottom names for a matrix with {n_b} columns"
            )
        if len(self.agg_names) != n_a:
            raise HierarchyError(f"{len(self.agg_names)} aggregate names for {n_a} rows")
        if n_b == 0:
            raise HierarchyError("a structure needs at least one bottom series")
        names = list(self.agg_names) + list(self.bottom_names)
        if len(set(names)) != len(names):
            raise HierarchyError("row names must be unique across aggregates and bottoms")
        if not np.isin(self.agg_matrix, (0, 1)).all():
            raise HierarchyError("aggregation matrix entries must be 0 or 1")
        row_sums = self.agg_matrix.sum(axis=1)
        if n_a and (row_sums == 0).any():
            empty = self.agg_names[int(np.argmax(row_sums == 0))]
            raise HierarchyError(f"aggregate '{empty}' aggregates no bottom series")
        # If some row covers every bottom series, that total must come first.
        full = row_sums == n_b
        if full.any() and not full[0]:
            raise HierarchyError("the all-ones total row must be the first aggregate")
        if self.levels:
            used = [i for idxs in self.levels.values() for i in idxs]
            for label, idxs in self.levels.items():
                if not idxs:
                    raise HierarchyError(f"level '{label}' is empty")
            if sorted(used) != list(range(self.n_total)):
                raise HierarchyError("levels must cover every row exactly once")

    @property
    def n_bottom(self) -> int:
        return self.agg_matrix.shape[1]

    @property
    def n_agg(self) -> int:
        return self.agg_matrix.shape[0]

    @property
    def n_total(self) -> int:
        return self.n_agg + self.n_bottom

    @property
    def row_names(self) -> tuple:
        return self.agg_names + self.bottom_names

    def level_rows(self, label: str) -> tuple:
        if label not in self.levels:
            raise HierarchyError(f"unknown level '{label}'; have {sorted(self.levels)}")
        return self.levels[label]

    def members(self, row: int) -> tuple:
        """Bottom column indices aggregated by ``row`` (identity for bottom rows)."""
        if row < self.n_agg:
            return tuple(int(j) for j in np.flatnonzero(self.agg_matrix[row]))
        return (row - self.n_agg,)


def build_summation_matrix(structure: HierarchyStructure) -> np.ndarray:
    """Stack the aggregation matrix over an identity block.

    Returns:
        Integer array of shape (n_agg + n_bottom, n_bottom).
    """
    eye = np.eye(structure.n_bottom, dtype=np.int64)
    if structure.n_agg == 0:
        return eye
    return np.vstack([structure.agg_matrix, eye])


def aggregate_values(structure: HierarchyStructure, y_bottom: np.ndarray) -> np.ndarray:
    """Map bottom-level values to the full stacked vector of rows.

    Args:
        y_bottom: array whose leading axis has length n_bottom; trailing
            axes (time, horizon, samples) are carried through.

    Returns:
        Array with leading axis n_agg + n_bottom.
    """
    y_bottom = np.asarray(y_bottom)
    if y_bottom.shape[0] != structure.n_bottom:
        raise HierarchyError(
            f"expected leading axis {structure.n_bottom}, got shape {y_bottom.shape}"
        )
    s = build_summation_matrix(structure)
    return np.tensordot(s, y_bottom, axes=(1, 0))


def coherence_residual(structure: HierarchyStructure, y_full: np.ndarray) -> float:
    """Max absolute mismatch between stated aggregates and recomputed sums.

    A coherent vector satisfies ``y_full == S @ y_full[bottom block]``
    exactly; the residual is 0.0 in that case.
    """
    y_full = np.asarray(y_full)
    if y_full.shape[0] != structure.n_total:
        raise HierarchyError(
            f"expected leading axis {structure.n_total}, got shape {y_full.shape}"
        )
    recomputed = aggregate_values(structure, y_full[structure.n_agg :])
    return float(np.abs(y_full - recomputed).max())


_TOP_KEYS = {"bottom", "aggregates", "levels"}
_AGG_KEYS = {"name", "members", "children"}


def parse_hierarchy_spec(text: str) -> HierarchyStructure:
    """Build a structure from its YAML description.

    The document has a ``bottom`` list, an ``aggregates`` list whose entries
    carry ``name`` plus either ``members`` (bottom names) or ``children``
    (other aggregate or bottom names, resolved transitively), and an
    optional ``levels`` map from label to row names.  Unknown fields are
    rejected; so are duplicate names, unknown identifiers, and cyclic
    ``children`` references.
    """
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise HierarchyError("hierarchy description must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise HierarchyError(f"unknown fields in hierarchy description: {sorted(unknown)}")
    bottom = doc.get("bottom")
    if not isinstance(bottom, list) or not bottom or not all(isinstance(n, str) for n in bottom):
        raise HierarchyError("'bottom' must be a non-empty list of names")
    if len(set(bottom)) != len(bottom):
        raise HierarchyError("duplicate names in 'bottom'")
    bottom_index = {name: j for j, name in enumerate(bottom)}

    agg_entries = doc.get("aggregates", [])
    if not isinstance(agg_entries, list):
        raise HierarchyError("'aggregates' must be a list")
    specs: dict[str, dict] = {}
    order: list[str] = []
    for entry in agg_entries:
        if not isinstance(entry, dict):
            raise HierarchyError(f"aggregate entries must be mappings, got {entry!r}")
        unknown = set(entry) - _AGG_KEYS
        if unknown:
            raise HierarchyError(f"unknown fields in aggregate entry: {sorted(unknown)}")
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise HierarchyError(f"aggregate entry without a name: {entry!r}")
        if name in specs or name in bottom_index:
            raise HierarchyError(f"duplicate name '{name}'")
        has_members = "members" in entry
        has_children = "children" in entry
        if has_members == has_children:
            raise HierarchyError(f"aggregate '{name}' needs exactly one of members/children")
        specs[name] = entry
        order.append(name)

    resolved: dict[str, set] = {}

    def resolve(name: str, trail: tuple) -> set:
        if name in bottom_index:
            return {bottom_index[name]}
        if name not in specs:
            raise HierarchyError(f"unknown identifier '{name}' referenced by {trail[-1]!r}")
        if name in trail:
            raise HierarchyError(f"cycle in aggregate children at '{name}'")
        if name in resolved:
            return resolved[name]
        entry = specs[name]
        members: set[int] = set()
        if "members" in entry:
            refs = entry["members"]
            if not isinstance(refs, list) or not refs:
                raise HierarchyError(f"aggregate '{name}' has an empty or invalid members list")
            for ref in refs:
                if ref not in bottom_index:
                    raise HierarchyError(f"aggregate '{name}' lists unknown bottom series '{ref}'")
                members.add(bottom_index[ref])
        else:
            refs = entry["children"]
            if not isinstance(refs, list) or not refs:
                raise HierarchyError(f"aggregate '{name}' has an empty or invalid children list")
            for ref in refs:
                members |= resolve(ref, trail + (name,))
        resolved[name] = members
        return members

    for name in order:
        resolve(name, ())

    matrix = np.zeros((len(order), len(bottom)), dtype=np.int64)
    for i, name in enumerate(order):
        matrix[i, sorted(resolved[name])] = 1

    row_index = {name: i for i, name in enumerate(order)}
    for name, j in bottom_index.items():
        row_index[name] = len(order) + j

    levels_doc = doc.get("levels")
    if levels_doc is None:
        levels = {}
        if order:
            levels["aggregate"] = tuple(range(len(order)))
        levels["bottom"] = tuple(len(order) + j for j in range(len(bottom)))
    else:
        if not isinstance(levels_doc, dict):
            raise HierarchyError("'levels' must be a mapping of label to row names")
        levels = {}
        for label, names in levels_doc.items():
            if not isinstance(names, list) or not names:
                raise HierarchyError(f"level '{label}' must be a non-empty list of row names")
            idxs = []
            for n in names:
                if n not in row_index:
                    raise HierarchyError(f"level '{label}' references unknown row '{n}'")
                idxs.append(row_index[n])
            levels[str(label)] = tuple(idxs)

    return HierarchyStructure(
        bottom_names=tuple(bottom),
        agg_names=tuple(order),
        agg_matrix=matrix,
        levels=levels,
    )


def load_hierarchy(path: str) -> HierarchyStructure:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_hierarchy_spec(fh.read())
