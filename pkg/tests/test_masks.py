import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subnet_tune.masks import (
    MaskSet,
    dump_state,
    keep_count,
    load_state,
    mix_scores,
    ranked_mask_dense,
    ranked_mask_mix,
)
from subnet_tune.tensor import make_rng


def brute_force_mask(scores, p):
    """Full Python sort over (score desc, tensor name, flat index)."""
    entries = []
    for name, arr in scores.items():
        for i, v in enumerate(np.asarray(arr).reshape(-1).tolist()):
            entries.append((-v, name, i))
    entries.sort()
    k = math.ceil((1 - Fraction(str(p))) * len(entries))
    keep = {(name, i) for _, name, i in entries[:k]}
    return {
        name: np.array([1.0 if (name, i) in keep else 0.0 for i in range(arr.size)]).reshape(arr.shape)
        for name, arr in scores.items()
    }


def test_dense_example():
    m = ranked_mask_dense({"w": np.array([[0.4, 0.1, 0.3, 0.2]])}, 0.5)
    assert m["w"].tolist() == [[1, 0, 1, 0]]


def test_dense_p_zero_all_ones():
    m = ranked_mask_dense({"w": make_rng(0).random((3, 4))}, 0.0)
    assert np.all(m["w"] == 1)


def test_dense_tie_break():
    m = ranked_mask_dense({"w": np.full((1, 4), 0.7)}, 0.5)
    assert m["w"].tolist() == [[1, 1, 0, 0]]


def test_tie_break_across_tensors_by_name():
    m = ranked_mask_dense({"b": np.ones((1, 2)), "a": np.ones((1, 2))}, 0.5)
    assert m["a"].tolist() == [[1, 1]] and m["b"].tolist() == [[0, 0]]


def test_empty_accumulator():
    with pytest.raises(ValueError):
        ranked_mask_dense({}, 0.1)
    with pytest.raises(ValueError):
        ranked_mask_mix({}, {}, 10, 0.1)


def test_mix_score_penalised():
    expect = mpmath.mpf(2) / 50 * mpmath.exp(-mpmath.mpf(50) / 100)
    s = mix_scores({"w": np.array([[2.0]])}, {"w": np.array([[50.0]])}, us=100)["w"][0, 0]
    assert abs(s - float(expect)) < 1e-15
    assert abs(s - 0.0242612) < 1e-6


def test_mix_score_below_boundary_has_no_penalty():
    s = mix_scores({"w": np.array([[2.0]])}, {"w": np.array([[50.0]])}, us=40)["w"][0, 0]
    assert s == 0.04


def test_mix_two_entry_selection():
    gam = {"w": np.array([[1.0, 1.0]])}
    fam = {"w": np.array([[10.0, 90.0]])}
    s = mix_scores(gam, fam, 100)["w"]
    assert s[0, 0] == pytest.approx(math.exp(-0.1) / 10, rel=1e-12)
    assert s[0, 1] == pytest.approx(math.exp(-0.9) / 90, rel=1e-12)
    assert ranked_mask_mix(gam, fam, 100, 0.5)["w"].tolist() == [[1, 0]]


def test_zero_frequency_never_selected_before_updated_entries():
    gam = {"w": np.array([[0.0, 0.5, 0.0]])}
    fam = {"w": np.array([[0.0, 2.0, 0.0]])}
    assert mix_scores(gam, fam, 10)["w"].tolist() == [[0.0, 0.25, 0.0]]
    assert ranked_mask_mix(gam, fam, 10, 0.7)["w"].tolist() == [[0, 1, 0]]
    assert ranked_mask_mix(gam, fam, 10, 0.6)["w"].tolist() == [[1, 1, 0]]


@pytest.mark.parametrize("n,p,k", [(10, 0.3, 7), (10, 0.1, 9), (3, 0.5, 2), (7, 0.0, 7), (1, 0.9, 1)])
def test_keep_count(n, p, k):
    assert keep_count(n, p) == k


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.1, 0.2, 0.3, 0.4, 0.5]), st.booleans())
def test_matches_brute_force(seed, p, ties):
    rng = make_rng(seed)
    scores = {}
    for name in ("c", "a", "b"):
        shape = tuple(rng.integers(1, 6, size=2))
        v = rng.random(shape)
        scores[name] = np.round(v * 3) / 3 if ties else v
    got = ranked_mask_dense(scores, p)
    want = brute_force_mask(scores, p)
    for name in scores:
        np.testing.assert_array_equal(got[name], want[name])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_selection_monotone(seed):
    rng = make_rng(seed)
    gam = {"w": rng.random((4, 5))}
    m = ranked_mask_dense(gam, 0.4)["w"].reshape(-1)
    g = gam["w"].reshape(-1)
    for a in range(g.size):
        for b in range(g.size):
            if g[a] > g[b]:
                assert m[a] >= m[b]


def test_penalty_strictly_decreasing_in_frequency():
    ratio, us = 0.3, 100
    freqs = np.arange(1, 101, dtype=float)
    s = mix_scores({"w": (ratio * freqs)[None, :]}, {"w": freqs[None, :]}, us)["w"][0]
    assert np.all(np.diff(s) < 0)


def test_dump_round_trip(tmp_path):
    gam = {"w": np.array([[0.1, 0.2]])}
    mask = MaskSet({"w": np.array([[1.0, 0.0]])}, "fixed")
    dump_state(tmp_path / "s.json", gam=gam, mask=mask)
    back = load_state(tmp_path / "s.json")
    np.testing.assert_array_equal(back["gam"]["w"], gam["w"])
    assert back["mask"].provenance == "fixed"
    np.testing.assert_array_equal(back["mask"]["w"], mask["w"])
