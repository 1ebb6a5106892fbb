"""Beam search and ancestral sampling over the SID segment."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import SidTrie
from .model import InferenceCache, ModelConfig, Params
from .rng import generator
from .vocab import Prompt, Vocabulary

NEG = -np.inf


def _allowed(trie: SidTrie | None, prefixes: np.ndarray, K: int, cache: dict) -> np.ndarray:
    """(B, W, K) mask of codes that extend each prefix inside the trie."""
    B, W, l = prefixes.shape
    out = np.zeros((B, W, K), dtype=bool)
    for b in range(B):
        for w in range(W):
            key = tuple(prefixes[b, w].tolist())
            row = cache.get(key)
            if row is None:
                row = np.zeros(K, dtype=bool)
                row[trie.children(key)] = True
                cache[key] = row
            out[b, w] = row
    return out


def beam_search(params: Params, cfg: ModelConfig, vocab: Vocabulary, prompts: Sequence[Prompt],
                trie: SidTrie | None, beam: int, constrained: bool = True,
                chunk: int = 64) -> list[list[tuple[tuple[int, ...], float]]]:
    """Top-``beam`` SIDs per prompt with their summed full-vocabulary log-probabilities.

    Every step keeps only codes of the current level. In constrained mode the
    candidates are further intersected with the trie children of each prefix.
    Equal scores are ordered by the code tuple, smallest first.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if constrained and (trie is None or len(trie) == 0):
        return [[] for _ in prompts]
    out = []
    for s in range(0, len(prompts), chunk):
        out += _beam_chunk(params, cfg, vocab, prompts[s:s + chunk], trie, beam, constrained)
    return out


def _beam_chunk(params, cfg, vocab, prompts, trie, W, constrained):
    L, K = vocab.L, vocab.K
    B = len(prompts)
    cache = InferenceCache(params, cfg, prompts, vocab)
    lp = cache.start(W)
    score = np.full((B, W), NEG)
    score[:, 0] = 0.0
    prefix = np.zeros((B, W, 0), dtype=np.int64)
    child_cache: dict = {}
    for l in range(L):
        lo, hi = vocab.level_range(l)
        cand = score[:, :, None] + lp[:, :, lo:hi]
        if constrained:
            cand = np.where(_allowed(trie, prefix, K, child_cache), cand, NEG)
        cand = np.where(np.isfinite(score)[:, :, None], cand, NEG)
        flat = cand.reshape(B, W * K)
        codes = np.broadcast_to(np.arange(K), (B, W, K)).reshape(B, W * K)
        keys = [codes]
        for j in range(l - 1, -1, -1):
            keys.append(np.repeat(prefix[:, :, j], K, axis=1))
        keys.append(-flat)
        order = np.lexsort(keys, axis=-1)[:, :W]
        parents = order // K
        chosen = order % K
        score = np.take_along_axis(flat, order, axis=1)
        prefix = np.concatenate([np.take_along_axis(prefix, parents[:, :, None], axis=1),
                                 chosen[:, :, None]], axis=2)
        if l + 1 < L:
            lp = cache.advance(parents, vocab.sid_base + l * K + chosen)
    results = []
    for b in range(B):
        rows = [(tuple(int(c) for c in prefix[b, w]), float(score[b, w]))
                for w in range(W) if np.isfinite(score[b, w])]
        results.append(rows)
    return results


@dataclass
class Rollouts:
    """G sampled SIDs per prompt with log-probs recorded under the sampling snapshot."""

    sids: np.ndarray         # (B, G, L) codes
    logp_full: np.ndarray    # (B, G, L) full-vocabulary log-prob of each sampled token
    logp_masked: np.ndarray  # (B, G, L) log-prob renormalised over the allowed codes
    valid: np.ndarray        # (B, G) trie membership


def sample(params: Params, cfg: ModelConfig, vocab: Vocabulary, prompts: Sequence[Prompt],
           trie: SidTrie | None, G: int, temperature: float, seed, constrained: bool = True,
           chunk: int = 64) -> Rollouts:
    """Ancestral sampling of G SIDs per prompt.

    Uses the Gumbel-max trick on temperature-scaled logits restricted to the
    allowed codes; ``temperature == 0`` is greedy (lowest code on ties).
    """
    if G < 1:
        raise ValueError("G must be >= 1")
    parts = [_sample_chunk(params, cfg, vocab, prompts[s:s + chunk], trie, G, temperature,
                           (*_tuple(seed), s), constrained)
             for s in range(0, len(prompts), chunk)]
    return Rollouts(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                      ("sids", "logp_full", "logp_masked", "valid")))


def _tuple(seed):
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


def _sample_chunk(params, cfg, vocab, prompts, trie, G, temperature, seed, constrained):
    L, K = vocab.L, vocab.K
    B = len(prompts)
    cache = InferenceCache(params, cfg, prompts, vocab)
    lp = cache.start(G)
    prefix = np.zeros((B, G, 0), dtype=np.int64)
    lpf = np.zeros((B, G, L))
    lpm = np.zeros((B, G, L))
    ident = np.broadcast_to(np.arange(G), (B, G))
    child_cache: dict = {}
    for l in range(L):
        lo, hi = vocab.level_range(l)
        lev = lp[:, :, lo:hi]
        if constrained:
            ok = _allowed(trie, prefix, K, child_cache)
            # a prefix with no children can only arise without a trie; fall back to all codes
            ok = np.where(ok.any(-1, keepdims=True), ok, True)
        else:
            ok = np.ones_like(lev, dtype=bool)
        if temperature == 0:
            pick = np.argmax(np.where(ok, lev, NEG), axis=-1)
        else:
            g = generator(*seed, "gumbel", l).gumbel(size=lev.shape)
            pick = np.argmax(np.where(ok, lev / temperature + g, NEG), axis=-1)
        masked = np.where(ok, lev, NEG)
        mmax = masked.max(-1, keepdims=True)
        norm = mmax[..., 0] + np.log(np.exp(masked - mmax).sum(-1))
        lpf[:, :, l] = np.take_along_axis(lev, pick[:, :, None], axis=2)[..., 0]
        lpm[:, :, l] = lpf[:, :, l] - norm
        prefix = np.concatenate([prefix, pick[:, :, None]], axis=2)
        if l + 1 < L:
            lp = cache.advance(ident, vocab.sid_base + l * K + pick)
    valid = np.array([[trie is not None and tuple(prefix[b, i].tolist()) in trie for i in range(G)]
                      for b in range(B)], dtype=bool).reshape(B, G)
    return Rollouts(prefix, lpf, lpm, valid)


def greedy_tokens(params: Params, cfg: ModelConfig, vocab: Vocabulary, prompts: Sequence[Prompt],
                  allowed: np.ndarray, stop: int, max_len: int) -> list[list[int]]:
    """Greedy decode over the token ids in ``allowed`` (plus ``stop``) until ``stop`` or ``max_len``."""
    B = len(prompts)
    cache = InferenceCache(params, cfg, prompts, vocab)
    lp = cache.start(1)[:, 0]
    cand = np.append(np.asarray(allowed, dtype=np.int64), stop)
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    ident = np.zeros((B, 1), dtype=np.int64)
    for t in range(max_len):
        tok = cand[np.argmax(lp[:, cand], axis=-1)]
        for b in range(B):
            if not done[b]:
                if tok[b] == stop:
                    done[b] = True
                else:
                    out[b].append(int(tok[b]))
        if done.all() or t + 1 == max_len:
            break
        lp = cache.advance(ident, tok[:, None])[:, 0]
    return out
