from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibench import divergence as dv
from calibench.numkit import ConfigError, ContractError


def loop_h(src, tgt, thresholds):
    """Independent scalar oracle: thresholds with both orientations."""
    best = 0.0
    for t, flip in product(thresholds, (False, True)):
        h = (lambda x: (x > t) != flip)
        ps = sum(h(x) for x in src) / len(src)
        pt = sum(h(x) for x in tgt) / len(tgt)
        best = max(best, abs(ps - pt))
    return 2 * best


def loop_hdh(src, tgt, thresholds):
    hs = [(t, f) for t in thresholds for f in (False, True)]
    ev = lambda h, x: (x > h[0]) != h[1]  # noqa: E731
    best = 0.0
    for a, b in product(hs, hs):
        ps = sum(ev(a, x) != ev(b, x) for x in src) / len(src)
        pt = sum(ev(a, x) != ev(b, x) for x in tgt) / len(tgt)
        best = max(best, abs(ps - pt))
    return 2 * best


HALF = [-0.5, 0.5, 1.5, 2.5]


def small_sets():
    return dv.SampleSets([0.0, 1.0], [1.0, 2.0])


def test_brute_force_h_examples():
    H = dv.ThresholdClass.grid(HALF)
    assert dv.brute_force_h_divergence(dv.SampleSets([0, 1], [0, 1]), H) == 0.0
    assert dv.brute_force_h_divergence(dv.SampleSets([0, 0], [2, 2]), H) == 2.0
    assert dv.brute_force_h_divergence(small_sets(), H) == pytest.approx(1.0)


def test_brute_force_hdh_examples():
    H = dv.ThresholdClass.grid(HALF)
    assert dv.brute_force_hdh_distance(dv.SampleSets([0, 1, 2], [0, 1, 2]), H) == 0.0
    got = dv.brute_force_hdh_distance(small_sets(), H)
    assert got == pytest.approx(loop_hdh([0, 1], [1, 2], HALF))
    assert got == pytest.approx(1.0)


def test_diagonal_pairs_contribute_nothing():
    E = dv.ThresholdClass.grid(HALF).evaluate(np.array([0.0, 1.0, 2.0]))
    assert np.all(np.diag(dv._disagreement(E)) == 0)


def test_estimator_examples():
    assert dv.estimate_h_divergence(small_sets()) == pytest.approx(1.0, abs=1e-9)
    rng = np.random.default_rng(0)
    same = rng.normal(size=(200, 2))
    assert dv.estimate_h_divergence(dv.SampleSets(same, same.copy())) < 0.1
    far = dv.SampleSets(rng.normal(size=(100, 2)) * 0.1, rng.normal(size=(100, 2)) * 0.1 + 10)
    assert dv.estimate_h_divergence(far) > 1.9


def test_empty_set_rejected():
    with pytest.raises(ContractError):
        dv.SampleSets(np.zeros((0, 1)), [1.0])
    with pytest.raises(ContractError):
        dv.SampleSets(np.zeros((2, 1)), np.zeros((2, 2)))


def test_bound_relation_identical_and_premise():
    s = dv.SampleSets([0, 1, 3], [0, 1, 3])
    H = dv.ThresholdClass.covering(s)
    assert dv.bound_relation_check(s, H, dv.UnionClass(H, dv.XorClass(H))) == (0.0, 0.0, True)
    H2 = dv.ThresholdClass.covering(small_sets())
    with pytest.raises(ConfigError):
        dv.bound_relation_check(small_sets(), H2, H2)


@pytest.mark.parametrize("block", range(4))
def test_bound_relation_random_sets(block):
    for i in range(block * 50, block * 50 + 50):
        s = dv.random_1d_sets(7, i)
        H = dv.ThresholdClass.covering(s)
        d_hdh, d_hd, holds = dv.bound_relation_check(s, H, dv.UnionClass(H, dv.XorClass(H)))
        assert holds and d_hdh <= d_hd + 1e-12


@settings(max_examples=60)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=7), st.lists(st.integers(0, 5), min_size=1, max_size=7))
def test_oracles_match_loop_and_are_symmetric(a, b):
    s = dv.SampleSets(np.array(a, float), np.array(b, float))
    cuts = [t + 0.5 for t in range(-1, 6)]
    H = dv.ThresholdClass.grid(cuts)
    h = dv.brute_force_h_divergence(s, H)
    assert h == pytest.approx(loop_h(a, b, cuts))
    assert h == pytest.approx(dv.brute_force_h_divergence(s.swapped(), H))
    hdh = dv.brute_force_hdh_distance(s, H)
    assert hdh == pytest.approx(dv.brute_force_hdh_distance(s.swapped(), H))
    for v in (h, hdh):
        assert 0 <= v <= 2


@settings(max_examples=40)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=7), st.lists(st.integers(0, 5), min_size=1, max_size=7),
       st.sets(st.integers(-1, 5), min_size=1, max_size=4))
def test_enlarging_h_never_decreases(a, b, extra):
    s = dv.SampleSets(np.array(a, float), np.array(b, float))
    small = dv.ThresholdClass.grid([1.5])
    big = dv.ThresholdClass.grid([1.5] + [e + 0.5 for e in extra])
    assert dv.brute_force_h_divergence(s, big) >= dv.brute_force_h_divergence(s, small)
    assert dv.brute_force_h_divergence(s, dv.IntervalClass([0.5, 2.5])) <= 2


@pytest.mark.parametrize("seed", range(5))
def test_estimator_cannot_beat_exact_sup(seed):
    s = dv.random_1d_sets(seed, 0, max_size=30)
    est = dv.estimate_h_divergence(s, seed=seed)
    assert 0 <= est <= dv.brute_force_h_divergence(s, dv.ThresholdClass.covering(s)) + 0.15


def test_report_fields_and_subsample():
    rng = np.random.default_rng(1)
    s = dv.SampleSets(rng.normal(size=(100, 1)), rng.normal(size=(80, 1)) + 1)
    rep = dv.report(s, oracle_points=20)
    assert {"estimate", "brute_force_h", "brute_force_hdh", "holds"} <= set(rep)
    assert rep["holds"] and rep["oracle_points"] == 20 and rep["n_source"] == 100
    assert rep == dv.report(s, oracle_points=20)
