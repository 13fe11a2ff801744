"""Projection correctness against independent brute-force oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admmforge.errors import InputError
from admmforge.projections import (Cardinality, ColumnGroup, LevelGrid, Levels,
                                   make_levels, project_cardinality,
                                   project_columns, project_levels)


# ---------------------------------------------------------------- oracles

def best_support_oracle(v: np.ndarray, alpha: int) -> float:
    """Min Euclidean distance over every alpha-element support set."""
    flat = v.ravel()
    best = np.inf
    for keep in itertools.combinations(range(flat.size), alpha):
        z = np.zeros_like(flat)
        z[list(keep)] = flat[list(keep)]
        best = min(best, float(((flat - z) ** 2).sum()))
    return best


def best_columns_oracle(w: np.ndarray, kept: int) -> float:
    best = np.inf
    for keep in itertools.combinations(range(w.shape[1]), kept):
        z = np.zeros_like(w)
        z[:, list(keep)] = w[:, list(keep)]
        best = min(best, float(((w - z) ** 2).sum()))
    return best


def nearest_level_scan(v: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """O(n*M) scan; midpoint ties go to the smaller-magnitude level."""
    out = np.empty_like(v)
    flat = v.ravel()
    res = out.ravel()
    for i, x in enumerate(flat):
        d = np.abs(levels - x)
        cand = np.flatnonzero(d == d.min())
        mags = np.abs(levels[cand])
        cand = cand[mags == mags.min()]
        res[i] = levels[cand[0]]
    return out


# ----------------------------------------------------- cardinality

def test_cardinality_pinned_example():
    v = np.array([3.0, -1.0, 0.5, -2.0])
    got = project_cardinality(v, 2)
    assert np.array_equal(got, [3.0, 0.0, 0.0, -2.0])
    # matches the exhaustive-support optimum
    assert ((v - got) ** 2).sum() == pytest.approx(best_support_oracle(v, 2))


def test_cardinality_identity_and_zeros():
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(project_cardinality(v, 3), v)
    z = np.zeros(5)
    assert np.array_equal(project_cardinality(z, 2), z)


def test_cardinality_alpha_out_of_range():
    v = np.ones(4)
    with pytest.raises(InputError):
        project_cardinality(v, 0)
    with pytest.raises(InputError):
        project_cardinality(v, 5)


def test_cardinality_tie_keeps_lower_flat_index():
    v = np.array([1.0, -1.0, 1.0])
    got = project_cardinality(v, 2)
    assert np.array_equal(got, [1.0, -1.0, 0.0])


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_cardinality_matches_enumeration(data):
    n = data.draw(st.integers(2, 12))
    alpha = data.draw(st.integers(1, min(n, 6)))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    v = rng.standard_normal(n)
    got = project_cardinality(v, alpha)
    assert np.count_nonzero(got) <= alpha
    # kept entries keep their original value
    assert np.all((got == 0) | (got == v))
    assert ((v - got) ** 2).sum() == pytest.approx(best_support_oracle(v, alpha))


def test_cardinality_idempotent():
    rng = np.random.default_rng(5)
    v = rng.standard_normal((4, 6))
    once = project_cardinality(v, 7)
    assert np.array_equal(project_cardinality(once, 7), once)


# ----------------------------------------------------- columns

def test_columns_identity_and_simple():
    w = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert np.array_equal(project_columns(w, 2), w)
    got = project_columns(w, 1)
    assert np.array_equal(got, w)  # column 0 already the only nonzero


def test_columns_tie_lower_index():
    w = np.array([[1.0, 1.0], [1.0, 1.0]])
    got = project_columns(w, 1)
    assert np.array_equal(got, [[1.0, 0.0], [1.0, 0.0]])


def test_columns_out_of_range():
    w = np.ones((2, 3))
    with pytest.raises(InputError):
        project_columns(w, 0)
    with pytest.raises(InputError):
        project_columns(w, 4)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_columns_match_enumeration(data):
    rows = data.draw(st.integers(1, 4))
    cols = data.draw(st.integers(2, 5))
    kept = data.draw(st.integers(1, cols))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    w = rng.standard_normal((rows, cols))
    got = project_columns(w, kept)
    surviving = np.flatnonzero(np.abs(got).sum(axis=0))
    assert len(surviving) <= kept
    assert ((w - got) ** 2).sum() == pytest.approx(best_columns_oracle(w, kept))


def test_columns_idempotent():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((3, 8))
    once = project_columns(w, 3)
    assert np.array_equal(project_columns(once, 3), once)


# ----------------------------------------------------- levels

def test_levels_pinned_example():
    v = np.array([0.3, -0.7, 0.1])
    got = project_levels(v, np.array([-0.5, 0.0, 0.5]))
    assert np.array_equal(got, [0.5, -0.5, 0.0])


def test_levels_grid_fixed_point():
    levels = np.array([-1.0, 0.0, 1.0])
    v = np.array([-1.0, 1.0, 0.0, 1.0])
    assert np.array_equal(project_levels(v, levels), v)


def test_levels_midpoint_tie_smaller_magnitude():
    levels = np.array([-0.5, 0.0, 0.5])
    v = np.array([0.25, -0.25])  # exactly between 0 and +/-0.5
    got = project_levels(v, levels)
    assert np.array_equal(got, [0.0, 0.0])


def test_levels_empty_error():
    with pytest.raises(InputError):
        project_levels(np.ones(3), np.array([]))


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_levels_match_scan_oracle(data):
    m = data.draw(st.integers(1, 9))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    spacing = rng.uniform(0.05, 1.0)
    start = rng.uniform(-2, 0)
    levels = start + spacing * np.arange(m)
    v = rng.uniform(-3, 3, size=data.draw(st.integers(1, 30)))
    got = project_levels(v, levels)
    assert np.array_equal(got, nearest_level_scan(v, levels))
    assert np.isin(got, levels).all()


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_levels_projection_nonexpansive(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    levels = np.linspace(-1, 1, data.draw(st.integers(2, 7)))
    u = rng.uniform(-2, 2, size=12)
    v = rng.uniform(-2, 2, size=12)
    pu, pv = project_levels(u, levels), project_levels(v, levels)
    # nearest-point map inside convex cells; allow one spacing of slack
    # for points that fall in different cells
    tol = 1e-9 + (levels[1] - levels[0]) * 0.0
    assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + (levels[1]-levels[0]) + tol


def test_levels_idempotent():
    rng = np.random.default_rng(7)
    levels = np.linspace(-0.9, 0.9, 5)
    v = rng.standard_normal(40)
    once = project_levels(v, levels)
    assert np.array_equal(project_levels(once, levels), once)


# ----------------------------------------------------- level construction

def test_make_levels_balanced_binary():
    w = np.array([-1.0, 1.0, 1.0, -1.0])
    ls = make_levels(w, bit_width=1)
    assert ls.values == pytest.approx([-1.0, 1.0], abs=1e-6)


def test_make_levels_binary_matches_grid_search():
    w = np.array([0.4, -0.6])
    ls = make_levels(w, bit_width=1)
    # dense grid-search oracle over the same scale interval
    cands = np.linspace(1e-6, np.abs(w).max(), 10_000)
    objs = [((np.where(w >= 0, a, -a) - w) ** 2).sum() for a in cands]
    best = cands[int(np.argmin(objs))]
    assert ls.scale == pytest.approx(best, rel=1e-3)


def test_make_levels_ternary_equal_gaps():
    rng = np.random.default_rng(8)
    ls = make_levels(rng.standard_normal(50), bit_width=2, include_zero=True)
    vals = np.asarray(ls.values)
    assert len(vals) == 3 and vals[1] == 0.0
    gaps = np.diff(vals)
    assert gaps[0] == pytest.approx(gaps[1], rel=1e-9)


def test_make_levels_all_zero_degenerate():
    ls = make_levels(np.zeros(10), bit_width=2)
    assert ls.degenerate
    assert ls.scale == 1.0


def test_make_levels_exclude_zero_equal_gaps():
    rng = np.random.default_rng(9)
    ls = make_levels(rng.standard_normal(64), bit_width=3, include_zero=False)
    vals = np.asarray(ls.values)
    assert len(vals) == 8
    assert 0.0 not in vals
    gaps = np.diff(vals)
    assert np.allclose(gaps, gaps[0], rtol=1e-9)


def test_levels_spec_validation():
    with pytest.raises(InputError):
        Levels(values=(0.0, 0.3, 1.0))  # unequal gaps
    Levels(values=(-0.5, 0.0, 0.5))


def test_constraint_validation():
    with pytest.raises(InputError):
        Cardinality(alpha=0)
    with pytest.raises(InputError):
        ColumnGroup(kept_columns=0)
    with pytest.raises(InputError):
        LevelGrid(bit_width=0)
