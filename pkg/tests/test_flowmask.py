"""Block mask wiring, expansion, verification, and reachability."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualflow import flowmask as fm


def brute_force_expand(mask: fm.BlockMask, groups) -> np.ndarray:
    """Independent oracle: tag every token, then test each (query, key) pair."""
    tags = [g.tag for g in groups for _ in range(g.count)]
    n = len(tags)
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            out[i, j] = mask.allows(tags[i], tags[j])
    return out


def test_canonical_rows():
    m = fm.canonical_mask()
    assert m.allowed_keys("OBS") == ("OBS",)
    assert m.allowed_keys("SQ") == ("OBS", "SQ")
    assert m.allowed_keys("N1") == ("OBS", "N1")
    assert m.allowed_keys("MQ") == ("N1", "MQ")
    assert m.allowed_keys("AQ") == ("OBS", "SQ", "MQ", "AQ", "N2")
    assert m.allowed_keys("N2") == ("OBS", "SQ", "MQ", "AQ", "N2")


def test_canonical_diagonal_and_cell_count():
    m = fm.canonical_mask()
    assert np.all(np.diag(m.allowed))
    # Row sets sum to 1+2+2+2+5+5 = 17 allowed block cells.
    assert int(m.allowed.sum()) == 17


def test_canonical_carveouts():
    m = fm.canonical_mask()
    # The added groups never leak into the pretrained computation:
    assert not m.allows("OBS", "SQ") and not m.allows("N1", "SQ")
    assert not m.allows("N1", "MQ") and not m.allows("N1", "N2")
    # Motor queries are blind to the observation prefix:
    assert not m.allows("MQ", "OBS") and not m.allows("MQ", "SQ")
    # The adaptation branch never reads the prior branch's noisy tokens:
    assert not m.allows("AQ", "N1") and not m.allows("N2", "N1")


def test_expand_counts_and_brute_force():
    m = fm.canonical_mask()
    groups = [
        fm.TokenGroup("OBS", 2),
        fm.TokenGroup("SQ", 1),
        fm.TokenGroup("N1", 2),
        fm.TokenGroup("MQ", 1),
        fm.TokenGroup("AQ", 1),
        fm.TokenGroup("N2", 2),
    ]
    tok = fm.expand(m, groups)
    assert tok.shape == (9, 9)
    ref = brute_force_expand(m, groups)
    assert np.array_equal(tok, ref)
    # Per-row-group true cells: OBS 2*2, SQ 1*3, N1 2*4, MQ 1*3, AQ 1*7, N2 2*7.
    assert int(tok.sum()) == 4 + 3 + 8 + 3 + 7 + 14 == 39


def test_expand_zero_count_group_drops_out():
    m = fm.canonical_mask()
    with_empty = fm.expand(
        m, [fm.TokenGroup("OBS", 3), fm.TokenGroup("SQ", 0), fm.TokenGroup("N1", 2)]
    )
    without = fm.expand(m, [fm.TokenGroup("OBS", 3), fm.TokenGroup("N1", 2)])
    assert np.array_equal(with_empty, without)


def test_expand_rejects_empty_total_and_negative():
    m = fm.canonical_mask()
    with pytest.raises(ValueError):
        fm.expand(m, [fm.TokenGroup("OBS", 0)])
    with pytest.raises(ValueError):
        fm.TokenGroup("OBS", -1)
    with pytest.raises(ValueError):
        fm.TokenGroup("XYZ", 1)


def test_verify_against_canonical_counts():
    assert fm.verify_against_canonical(fm.canonical_mask()) == []
    all_on = fm.BlockMask(np.ones((6, 6), dtype=bool))
    violations = fm.verify_against_canonical(all_on)
    # 36 cells minus the 17 canonically allowed ones.
    assert len(violations) == 19
    assert all(v.found and not v.expected for v in violations)
    v = violations[0]
    assert {v.query, v.key} <= set(fm.GROUP_ORDER)


def test_reachability_hop1_equals_rows():
    m = fm.canonical_mask()
    reach = fm.reachability(m, 1)
    for g in fm.GROUP_ORDER:
        assert reach[g] == frozenset(m.allowed_keys(g))


def test_reachability_motor_queries_reach_obs_at_two_hops():
    m = fm.canonical_mask()
    assert fm.reachability(m, 1)["MQ"] == frozenset({"N1", "MQ"})
    assert fm.reachability(m, 2)["MQ"] == frozenset({"OBS", "N1", "MQ"})


def test_reachability_fixed_points():
    m = fm.canonical_mask()
    deep = fm.reachability(m, 64)
    assert deep["OBS"] == frozenset({"OBS"})
    assert deep["N1"] == frozenset({"OBS", "N1"})
    assert deep["SQ"] == frozenset({"OBS", "SQ"})
    # Prior-branch information reaches the adaptation branch only through the
    # motor-query bottleneck: blocked directly, present from two hops on.
    assert "N1" not in fm.reachability(m, 1)["AQ"]
    assert "N1" in fm.reachability(m, 2)["AQ"]
    assert deep["AQ"] == frozenset(fm.GROUP_ORDER)
    assert deep["N2"] == frozenset(fm.GROUP_ORDER)


def test_reachability_monotone_in_hops():
    m = fm.canonical_mask()
    prev = fm.reachability(m, 1)
    for h in range(2, 8):
        cur = fm.reachability(m, h)
        for g in fm.GROUP_ORDER:
            assert prev[g] <= cur[g]
        prev = cur


GOLDEN_GRID = """\
     OBS  SQ  N1  MQ  AQ  N2
 OBS   #   .   .   .   .   .
  SQ   #   #   .   .   .   .
  N1   #   .   #   .   .   .
  MQ   .   .   #   #   .   .
  AQ   #   #   .   #   #   #
  N2   #   #   .   #   #   #"""


def test_render_grid_golden():
    assert fm.render_grid(fm.canonical_mask()) == GOLDEN_GRID


@settings(max_examples=60, deadline=None)
@given(
    bits=st.lists(st.booleans(), min_size=36, max_size=36),
    counts=st.lists(st.integers(min_value=0, max_value=3), min_size=6, max_size=6),
)
def test_expand_matches_brute_force_on_random_masks(bits, counts):
    grid = np.array(bits, dtype=bool).reshape(6, 6)
    np.fill_diagonal(grid, True)
    mask = fm.BlockMask(grid)
    groups = [fm.TokenGroup(tag, c) for tag, c in zip(fm.GROUP_ORDER, counts)]
    if sum(counts) == 0:
        with pytest.raises(ValueError):
            fm.expand(mask, groups)
        return
    assert np.array_equal(fm.expand(mask, groups), brute_force_expand(mask, groups))
