import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sidsearch.codec import build_trie
from sidsearch.metrics import SliceResult, hr_mrr, item_hr, valid_sid_rate


def scan(preds, truths, n):
    """Oracle: per-PV linear scan for the first hit."""
    h = r = 0.0
    for p, t in zip(preds, truths):
        ranks = [i + 1 for i, s in enumerate(p[:n]) if s in t]
        if ranks:
            h += 1
            r += 1 / ranks[0]
    return h / len(preds), r / len(preds)


def random_case(seed, n_pv=50):
    rng = np.random.default_rng(seed)
    preds = [[tuple(int(c) for c in rng.integers(0, 3, 2)) for _ in range(int(rng.integers(0, 15)))]
             for _ in range(n_pv)]
    truths = [{tuple(int(c) for c in rng.integers(0, 3, 2)) for _ in range(int(rng.integers(1, 3)))}
              for _ in range(n_pv)]
    return preds, truths


def test_trivial_cases():
    preds = [[(0, 1), (1, 1)], [(2, 2)]]
    assert hr_mrr(preds, [{(0, 1)}, {(2, 2)}]) == (1.0, 1.0)
    assert hr_mrr(preds, [{(5, 5)}, {(5, 5)}]) == (0.0, 0.0)
    assert hr_mrr([], []) == (0.0, 0.0)
    with pytest.raises(ValueError):
        hr_mrr(preds, [set()])


def test_rank_is_one_based_and_cut_at_n():
    preds = [[(i,) for i in range(12)]]
    assert hr_mrr(preds, [{(2,)}]) == (1.0, pytest.approx(1 / 3))
    assert hr_mrr(preds, [{(10,)}], n=10) == (0.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_hr_mrr_match_linear_scan(seed):
    preds, truths = random_case(seed)
    assert hr_mrr(preds, truths, 10) == pytest.approx(scan(preds, truths, 10), abs=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mrr_bounded_by_hr_and_order_invariant(seed):
    preds, truths = random_case(seed, 20)
    hr, mrr = hr_mrr(preds, truths)
    assert 0 <= mrr <= hr <= 1
    perm = np.random.default_rng(seed).permutation(20)
    hr2, mrr2 = hr_mrr([preds[i] for i in perm], [truths[i] for i in perm])
    assert hr2 == pytest.approx(hr, abs=1e-15) and mrr2 == pytest.approx(mrr, abs=1e-12)


def test_valid_sid_rate():
    trie = build_trie([(0, (0, 0)), (1, (0, 1)), (2, (1, 1))])
    assert valid_sid_rate([[(0, 0), (1, 1)]], trie) == 1.0
    assert valid_sid_rate([[(2, 2), (1, 0)]], trie) == 0.0
    rng = np.random.default_rng(0)
    preds = [[tuple(int(c) for c in rng.integers(0, 3, 2)) for _ in range(5)] for _ in range(30)]
    members = {(0, 0), (0, 1), (1, 1)}
    want = np.mean([sum(s in members for s in p) / 5 for p in preds])
    assert valid_sid_rate(preds, trie) == pytest.approx(want, abs=1e-15)


def test_item_hr_expands_collided_leaves():
    trie = build_trie([(0, (0, 0)), (7, (0, 0)), (1, (1, 1))])
    assert item_hr([[(0, 0)]], [{7}], trie) == 1.0
    assert item_hr([[(1, 1)]], [{7}], trie) == 0.0


def test_slice_check_flags_inconsistent_metrics():
    assert SliceResult("m", "all", 3, 0.5, 0.4, 1.0, 0.5).check() == []
    assert SliceResult("m", "all", 3, 0.5, 0.6, 1.0, 0.5).check()
    assert SliceResult("m", "all", 3, 1.5, 0.6, 1.0, 0.5).check()
