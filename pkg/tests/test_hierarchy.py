import numpy as np
import pytest

from hiermix import (
    HierarchyError,
    HierarchyStructure,
    aggregate_values,
    build_summation_matrix,
    coherence_residual,
    parse_hierarchy_spec,
)

THREE_LEVEL_YAML = """
bottom: [b1, b2, b3, b4]
aggregates:
  - name: total
    members: [b1, b2, b3, b4]
  - name: half1
    members: [b1, b2]
  - name: half2
    members: [b3, b4]
levels:
  total: [total]
  halves: [half1, half2]
  bottom: [b1, b2, b3, b4]
"""


def test_summation_matrix_stacks_aggregation_over_identity(three_level):
    s = build_summation_matrix(three_level)
    assert s.shape == (7, 4)
    np.testing.assert_array_equal(s[:3], three_level.agg_matrix)
    np.testing.assert_array_equal(s[3:], np.eye(4))


def test_no_aggregates_gives_identity():
    flat = HierarchyStructure(("a", "b"), (), np.zeros((0, 2)), {})
    np.testing.assert_array_equal(build_summation_matrix(flat), np.eye(2))


def test_empty_aggregate_row_rejected():
    with pytest.raises(HierarchyError):
        HierarchyStructure(("a", "b"), ("dead",), np.zeros((1, 2)), {})


def test_total_row_must_come_first():
    with pytest.raises(HierarchyError):
        HierarchyStructure(
            ("a", "b"), ("partial", "total"), np.array([[1, 0], [1, 1]]), {}
        )


def test_matrix_entries_must_be_binary():
    with pytest.raises(HierarchyError):
        HierarchyStructure(("a", "b"), ("x",), np.array([[1, 2]]), {})


def test_aggregate_values_known_column(three_level):
    out = aggregate_values(three_level, np.array([1.0, 2.0, 3.0, 4.0]))
    np.testing.assert_array_equal(out, [10, 3, 7, 1, 2, 3, 4])


def test_aggregate_values_zero_panel(three_level):
    out = aggregate_values(three_level, np.zeros((4, 5)))
    np.testing.assert_array_equal(out, np.zeros((7, 5)))


def test_single_series_duplicated_by_total():
    structure = HierarchyStructure(("only",), ("total",), np.array([[1]]), {})
    out = aggregate_values(structure, np.array([[3.0, 1.0]]))
    np.testing.assert_array_equal(out, [[3, 1], [3, 1]])


def test_aggregate_values_carries_trailing_axes(three_level):
    rates = np.random.default_rng(0).uniform(size=(4, 2, 3))
    out = aggregate_values(three_level, rates)
    assert out.shape == (7, 2, 3)
    np.testing.assert_allclose(out[0], rates.sum(axis=0))
    np.testing.assert_allclose(out[3:], rates)


def test_residual_zero_for_aggregated_panel(three_level):
    rng = np.random.default_rng(1)
    panel = rng.poisson(4.0, size=(4, 9)).astype(float)
    full = aggregate_values(three_level, panel)
    assert coherence_residual(three_level, full) == 0.0


def test_residual_counts_a_perturbation(three_level):
    full = aggregate_values(three_level, np.ones(4))
    full[1] += 1.0
    assert coherence_residual(three_level, full) == 1.0


def test_parse_round_trip(three_level):
    parsed = parse_hierarchy_spec(THREE_LEVEL_YAML)
    np.testing.assert_array_equal(parsed.agg_matrix, three_level.agg_matrix)
    assert parsed.row_names == three_level.row_names
    assert parsed.levels == three_level.levels
    # total of an aggregated column really is the bottom sum
    col = np.array([1.0, 2.0, 3.0, 4.0])
    assert aggregate_values(parsed, col)[0] == col.sum()


def test_parse_children_resolve_transitively():
    text = """
bottom: [x, y, z]
aggregates:
  - name: total
    children: [pair, z]
  - name: pair
    members: [x, y]
"""
    parsed = parse_hierarchy_spec(text)
    np.testing.assert_array_equal(parsed.agg_matrix, [[1, 1, 1], [1, 1, 0]])


def test_parse_bottom_only():
    parsed = parse_hierarchy_spec("bottom: [u, v]\n")
    assert parsed.n_agg == 0
    assert parsed.n_bottom == 2


def test_parse_rejects_unknown_fields():
    with pytest.raises(HierarchyError):
        parse_hierarchy_spec("bottom: [a]\nextra: 1\n")
    with pytest.raises(HierarchyError):
        parse_hierarchy_spec(
            "bottom: [a]\naggregates:\n  - name: t\n    members: [a]\n    color: red\n"
        )


def test_parse_rejects_unknown_member():
    with pytest.raises(HierarchyError):
        parse_hierarchy_spec("bottom: [a]\naggregates:\n  - name: t\n    members: [ghost]\n")


def test_parse_rejects_child_cycle():
    text = """
bottom: [a]
aggregates:
  - name: p
    children: [q]
  - name: q
    children: [p]
"""
    with pytest.raises(HierarchyError):
        parse_hierarchy_spec(text)


def test_level_lookup(three_level):
    assert three_level.level_rows("halves") == (1, 2)
    with pytest.raises(HierarchyError):
        three_level.level_rows("nope")


def test_members(three_level):
    assert three_level.members(1) == (0, 1)
    assert three_level.members(4) == (1,)


def _tourism_shaped_yaml() -> str:
    """Two crossed groupings: geography (7/27/76 nodes) times 4 purposes.

    Counting rows: 1+7+27+76 geography aggregates, 4+28+108 purpose-crossed
    aggregates, 304 bottom cells.
    """
    zones_per_state = [4, 4, 4, 4, 4, 4, 3]
    regions_per_zone = [3] * 22 + [2] * 5
    purposes = ["hol", "vis", "bus", "oth"]
    state_of_zone, zone_of_region = [], []
    for s, nz in enumerate(zones_per_state):
        state_of_zone += [s] * nz
    for z, nr in enumerate(regions_per_zone):
        zone_of_region += [z] * nr
    n_regions = len(zone_of_region)

    bottoms = [f"r{r:02d}_{p}" for r in range(n_regions) for p in purposes]
    lines = ["bottom:"] + [f"  - {b}" for b in bottoms] + ["aggregates:"]

    def agg(name, members):
        lines.append(f"  - name: {name}")
        lines.append("    members: [" + ", ".join(members) + "]")

    by_region = {r: [f"r{r:02d}_{p}" for p in purposes] for r in range(n_regions)}
    by_zone = {z: sum((by_region[r] for r in range(n_regions) if zone_of_region[r] == z), []) for z in range(27)}
    by_state = {s: sum((by_zone[z] for z in range(27) if state_of_zone[z] == s), []) for s in range(7)}

    agg("total", bottoms)
    for s in range(7):
        agg(f"state{s}", by_state[s])
    for z in range(27):
        agg(f"zone{z:02d}", by_zone[z])
    for r in range(n_regions):
        agg(f"region{r:02d}", by_region[r])
    for p in purposes:
        agg(f"all_{p}", [b for b in bottoms if b.endswith(p)])
    for s in range(7):
        for p in purposes:
            agg(f"state{s}_{p}", [b for b in by_state[s] if b.endswith(p)])
    for z in range(27):
        for p in purposes:
            agg(f"zone{z:02d}_{p}", [b for b in by_zone[z] if b.endswith(p)])
    return "\n".join(lines) + "\n"


def test_crossed_grouping_row_count():
    parsed = parse_hierarchy_spec(_tourism_shaped_yaml())
    assert parsed.n_bottom == 304
    assert parsed.n_agg == 251
    assert parsed.n_total == 555
    # grouped structure: each bottom cell sits in the geography chain
    # (total/state/zone/region) and the purpose-crossed chain (all/state/zone)
    memberships = parsed.agg_matrix[:, 0].sum()
    assert memberships == 4 + 3
