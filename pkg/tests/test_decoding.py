import itertools

import numpy as np
import pytest

from sidsearch import autodiff as ad
from sidsearch.codec import build_trie
from sidsearch.decoding import beam_search, greedy_tokens, sample
from sidsearch.metrics import valid_sid_rate
from sidsearch.model import ModelConfig, forward, init_params, make_batch
from sidsearch.vocab import Prompt, Vocabulary


@pytest.fixture(scope="module")
def setup():
    vocab = Vocabulary(("red", "shoe", "blue"), n_users=2, L=3, K=6)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=1, d_ff=24, max_len=16,
                      item_dim=4, init_std=0.5)
    params = init_params(cfg, 7)
    prompts = [Prompt([vocab.task("q2sid"), vocab.word(w), vocab.sep]) for w in ("red", "shoe", "blue")]
    return vocab, cfg, params, prompts


def path_score(params, cfg, vocab, prompt, sid):
    """Oracle: teacher-forced sum of full-vocabulary log-probabilities of the SID tokens."""
    b = make_batch([(prompt, vocab.sid_tokens(sid))], vocab, cfg.item_dim)
    lp = ad._log_softmax_np(forward(params, cfg, b).data)[0]
    return float(sum(lp[l, tok] for l, tok in enumerate(vocab.sid_tokens(sid))))


def exhaustive(params, cfg, vocab, prompt, sids):
    scored = [(s, path_score(params, cfg, vocab, prompt, s)) for s in sids]
    return sorted(scored, key=lambda x: (-x[1], x[0]))


def random_trie(rng, n, K, L):
    sids = set()
    while len(sids) < n:
        sids.add(tuple(int(c) for c in rng.integers(0, K, L)))
    return sorted(sids)


def test_single_sid_trie_forces_the_path(setup):
    vocab, cfg, params, prompts = setup
    trie = build_trie([(0, (5, 0, 3))])
    for res in beam_search(params, cfg, vocab, prompts, trie, beam=1):
        assert [s for s, _ in res] == [(5, 0, 3)]


def test_empty_trie_gives_empty_results(setup):
    vocab, cfg, params, prompts = setup
    assert beam_search(params, cfg, vocab, prompts, build_trie([]), beam=4) == [[], [], []]
    with pytest.raises(ValueError):
        beam_search(params, cfg, vocab, prompts, build_trie([]), beam=0)


def test_uniform_model_returns_every_catalog_sid(setup):
    vocab, cfg, _, prompts = setup
    zcfg = ModelConfig(**{**cfg.__dict__, "zero_output": True})
    params = init_params(zcfg, 0)
    sids = random_trie(np.random.default_rng(0), 17, vocab.K, vocab.L)
    res = beam_search(params, zcfg, vocab, prompts[:1], build_trie(enumerate(sids)), beam=20)[0]
    assert sorted(s for s, _ in res) == sids
    assert [s for s, _ in res] == sids                         # equal scores fall back to code order


@pytest.mark.parametrize("seed,n", [(0, 10), (1, 30), (2, 50)])
def test_exhaustive_beam_equals_path_enumeration(setup, seed, n):
    vocab, cfg, params, prompts = setup
    sids = random_trie(np.random.default_rng(seed), n, vocab.K, vocab.L)
    trie = build_trie(enumerate(sids))
    res = beam_search(params, cfg, vocab, prompts, trie, beam=n)
    for prompt, got in zip(prompts, res):
        want = exhaustive(params, cfg, vocab, prompt, sids)
        assert [s for s, _ in got] == [s for s, _ in want]
        assert np.allclose([x for _, x in got], [x for _, x in want], atol=1e-9)


def test_beam_8_on_20_sid_trie_with_narrow_prefixes(setup):
    """Top-8 equals exhaustive top-8 whenever no level has more than 8 live prefixes."""
    vocab, cfg, params, prompts = setup
    rng = np.random.default_rng(3)
    firsts = [(a, b) for a in (0, 3) for b in (1, 2, 4, 5)]          # 8 two-level prefixes
    sids = sorted({p + (int(c),) for p in firsts for c in rng.choice(vocab.K, 3, replace=False)})[:20]
    trie = build_trie(enumerate(sids))
    assert len(sids) == 20
    for prompt, got in zip(prompts, beam_search(params, cfg, vocab, prompts, trie, beam=8)):
        want = exhaustive(params, cfg, vocab, prompt, sids)[:8]
        assert [s for s, _ in got] == [s for s, _ in want]


def test_beam_results_are_sorted_valid_and_prefix_consistent(setup):
    vocab, cfg, params, prompts = setup
    sids = random_trie(np.random.default_rng(4), 40, vocab.K, vocab.L)
    trie = build_trie(enumerate(sids))
    res = beam_search(params, cfg, vocab, prompts, trie, beam=5)
    for r in res:
        scores = [x for _, x in r]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        assert all(s in trie for s, _ in r)
    assert valid_sid_rate([[s for s, _ in r] for r in res], trie) == 1.0


def test_unconstrained_untrained_model_rarely_hits_the_catalog(setup):
    vocab, cfg, params, prompts = setup
    sids = random_trie(np.random.default_rng(5), 8, vocab.K, vocab.L)
    trie = build_trie(enumerate(sids))
    res = beam_search(params, cfg, vocab, prompts, trie, beam=16, constrained=False)
    rate = valid_sid_rate([[s for s, _ in r] for r in res], trie)
    assert rate <= 0.25          # catalog / K^L = 8/216; allow slack for 3 prompts
    # unconstrained search over all K^L paths agrees with exhaustive enumeration of every code tuple
    allp = list(itertools.product(range(vocab.K), repeat=vocab.L))
    want = exhaustive(params, cfg, vocab, prompts[0], allp)[:1]
    got = beam_search(params, cfg, vocab, prompts[:1], None, beam=len(allp), constrained=False)[0][:1]
    assert got[0][0] == want[0][0]


def test_zero_temperature_sampling_is_greedy(setup):
    vocab, cfg, params, prompts = setup
    sids = random_trie(np.random.default_rng(6), 30, vocab.K, vocab.L)
    trie = build_trie(enumerate(sids))
    ro = sample(params, cfg, vocab, prompts, trie, G=4, temperature=0.0, seed=1)
    greedy = beam_search(params, cfg, vocab, prompts, trie, beam=1)
    for b in range(3):
        assert all(tuple(ro.sids[b, g]) == greedy[b][0][0] for g in range(4))
    assert ro.valid.all()


def test_sampling_is_seed_deterministic(setup):
    vocab, cfg, params, prompts = setup
    trie = build_trie(enumerate(random_trie(np.random.default_rng(7), 30, vocab.K, vocab.L)))
    a = sample(params, cfg, vocab, prompts, trie, 5, 1.0, seed=(2, "x"))
    b = sample(params, cfg, vocab, prompts, trie, 5, 1.0, seed=(2, "x"))
    c = sample(params, cfg, vocab, prompts, trie, 5, 1.0, seed=(3, "x"))
    assert a.sids.tobytes() == b.sids.tobytes() and a.logp_full.tobytes() == b.logp_full.tobytes()
    assert not np.array_equal(a.sids, c.sids)


def test_first_token_frequencies_match_softmax(setup):
    vocab, cfg, params, prompts = setup
    n = 10_000
    ro = sample(params, cfg, vocab, prompts[:1] * n, None, G=1, temperature=1.0, seed=11, constrained=False)
    b = make_batch([(prompts[0], [vocab.sid_token(0, 0)])], vocab, cfg.item_dim)
    lp = ad._log_softmax_np(forward(params, cfg, b).data)[0, 0]
    lo, hi = vocab.level_range(0)
    p = np.exp(lp[lo:hi])
    p = p / p.sum()                  # sampling renormalises over the level's codes
    counts = np.bincount(ro.sids[:, 0, 0], minlength=vocab.K)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-9)
    # recorded log-probs are the full-vocabulary values of the sampled tokens
    assert np.allclose(ro.logp_full[:20, 0, 0], lp[lo + ro.sids[:20, 0, 0]], atol=1e-10)


def test_greedy_tokens_stops_at_stop_token(setup):
    vocab, cfg, params, prompts = setup
    allowed = np.arange(vocab.word_base, vocab.user_base)
    out = greedy_tokens(params, cfg, vocab, prompts, allowed, vocab.sep, max_len=4)
    assert all(len(o) <= 4 and all(vocab.word_base <= t < vocab.user_base for t in o) for o in out)
