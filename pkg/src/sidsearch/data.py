"""Prompt/target construction for every training stage and for evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import CodebookSet, build_trie
from .corpus import (History, Interaction, NotExtractable, World, cot_tasks, session_keywords,
                     split_by_time, user_histories)
from .vocab import Prompt, Vocabulary, personal_prompt

STAGE_TASKS = {
    1: ("q2sid", "sid2q", "i2sid", "sid2i", "q2cat", "i2cat", "sid2cat"),
    2: ("q2i", "i2q", "sidq2sid", "sid2sidq"),
    3: ("personal",),
}
COT_TASKS = ("cot_intent", "cot_category", "cot_attribute", "cot_keyword")


@dataclass
class Example:
    prompt: Prompt
    target: list[int]
    teacher: Prompt | None = None
    task: str = ""


@dataclass
class PageView:
    session: int
    user: int
    query: int
    clicked: list[int]
    ordered: list[int]
    tier: str
    history: History


@dataclass
class StageSpec:
    """Task mixture for one supervised stage."""

    stage: int
    weights: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if not self.weights or any(w < 0 for w in self.weights.values()):
            raise ValueError("mixture weights must be non-negative and non-empty")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError(f"stage {self.stage} mixture weights sum to {sum(self.weights.values())}, not 1")

    def with_cot(self, cot_mass: float) -> "StageSpec":
        """Scale the existing tasks by ``1 - cot_mass`` and spread ``cot_mass`` over the CoT tasks."""
        w = {k: v * (1.0 - cot_mass) for k, v in self.weights.items()}
        for t in COT_TASKS:
            w[t] = cot_mass / len(COT_TASKS)
        return StageSpec(self.stage, w)


DEFAULT_MIXTURES = {
    1: {"q2sid": 0.3, "sid2q": 0.1, "i2sid": 0.25, "sid2i": 0.1, "q2cat": 0.1, "i2cat": 0.05, "sid2cat": 0.1},
    2: {"q2i": 0.3, "i2q": 0.1, "sidq2sid": 0.45, "sid2sidq": 0.15},
    3: {"personal": 1.0},
}


class SearchData:
    """Corpus + codebooks viewed as model inputs."""

    def __init__(self, world: World, logs: Sequence[Interaction], codebooks: CodebookSet,
                 catalog: Sequence[tuple[int, Sequence[int]]], short_len: int = 2):
        self.world = world
        self.cb = codebooks
        self.vocab = Vocabulary(tuple(world.words), len(world.users), codebooks.L, codebooks.K)
        self.item_sid = {int(i): tuple(int(c) for c in s) for i, s in catalog}
        self.trie = build_trie(catalog, codebooks.L)
        self.short_len = short_len
        self._emb = np.array([it.embedding for it in world.items])
        self.sid_q = {q.id: codebooks.encode(self.query_vector(q.id)) for q in world.queries}
        hist = user_histories(logs)
        train, test = split_by_time(logs, world.config.test_frac)
        self.train_pvs = [self._pv(r, hist[r.session]) for r in train if r.clicked]
        self.test_pvs = [self._pv(r, hist[r.session]) for r in test if r.clicked]
        self._kw_cache: dict[tuple[int, bool], list[str]] = {}

    def _pv(self, r: Interaction, h: History) -> PageView:
        return PageView(r.session, r.user, r.query, list(r.clicked), list(r.ordered),
                        self.world.queries[r.query].tier, h)

    def query_vector(self, query: int) -> np.ndarray:
        """Mean embedding of the items lexically matched by the query's words.

        Category words must match the item's top or leaf category and attribute
        words must be carried by the item; words such as ``no`` or topic names
        are not understood. Without any match the attribute constraint is
        dropped, and a query with no category word maps to the zero vector.
        """
        w = self.world
        toks = w.queries[query].tokens
        leaves = {int(t[4:]) for t in toks if t in w.leaf_words}
        tops = {int(t[3:]) for t in toks if t in w.top_words}
        attrs = {w.attr_words.index(t) for t in toks if t in w.attr_words}
        if not leaves and not tops:
            return np.zeros(w.config.dim)
        leaf = w._item_leaf
        cat = np.isin(leaf, list(leaves)) | np.isin(leaf // w.config.leaves_per_top, list(tops))
        att = w._attr_onehot[:, sorted(attrs)].sum(1) == len(attrs)
        pick = cat & att if (cat & att).any() else cat
        return self._emb[pick].mean(0)

    # -- prompts
    def keywords(self, pv: PageView, training: bool = False) -> list[str]:
        """Training keywords see the session's clicks; inference keywords only earlier behaviour."""
        key = (pv.session, training)
        hit = self._kw_cache.get(key)
        if hit is None:
            r = Interaction(pv.session, pv.user, pv.query, [], pv.clicked, pv.ordered)
            kw = session_keywords(self.world, r, pv.history, self.short_len, training=training)
            hit = [] if isinstance(kw, NotExtractable) else list(kw.keywords)
            self._kw_cache[key] = hit
        return hit

    def long_embedding(self, pv: PageView) -> np.ndarray:
        if not pv.history.clicked:
            return np.zeros(self.world.config.dim)
        return self._emb[pv.history.clicked].mean(0)

    def prompt(self, pv: PageView, keywords: bool = False, distill_token: bool = False,
               task: str = "personal", training: bool = False) -> Prompt:
        h = pv.history
        seq_q = self.world.queries[h.prev_query].tokens if h.prev_query is not None else ()
        return personal_prompt(
            self.vocab, user=pv.user, query_tokens=self.world.queries[pv.query].tokens,
            sid_q=self.sid_q[pv.query], seq_q=seq_q,
            short_sids=[self.item_sid[i] for i in h.clicked[-self.short_len:]],
            long_emb=self.long_embedding(pv),
            keywords=self.keywords(pv, training) if keywords else None,
            distill_token=distill_token, task=task)

    def truth(self, pv: PageView, kind: str = "click") -> set[tuple[int, ...]]:
        items = pv.ordered if kind == "order" else pv.clicked
        return {self.item_sid[i] for i in items}

    # -- simple task prompts
    def _p(self, task: str, *segments) -> Prompt:
        v = self.vocab
        toks = [v.task(task)]
        for seg in segments:
            toks += seg
        toks.append(v.sep)
        return Prompt(toks)

    def _words(self, words) -> list[int]:
        return [self.vocab.word(w) for w in words]

    def _sid(self, sid) -> list[int]:
        return self.vocab.sid_tokens(sid)

    def _cat_words(self, item: int) -> list[str]:
        it = self.world.items[item]
        return [self.world.top_words[it.top], self.world.leaf_words[it.leaf]]

    def _query_words(self, q: int) -> list[int]:
        return self._words(self.world.queries[q].tokens)

    def pools(self, stage: int, *, cot: bool = False, keywords_in_input: bool = False,
              mode: str | None = None, direct_cot: bool = False) -> dict[str, list[Example]]:
        """Example pools per task for a stage.

        Stage 3 examples carry a keyword-augmented teacher prompt. With
        ``keywords_in_input`` the keywords go straight into the trained prompt
        instead. ``direct_cot`` trains the sequence ``keywords <sep> SID``.
        """
        v, w = self.vocab, self.world
        eos = [v.eos]
        P: dict[str, list[Example]] = {}
        if stage == 1:
            P["i2sid"] = [Example(self._p("i2sid", self._words(w.item_words(i))), self._sid(s)) for i, s in self.item_sid.items()]
            P["sid2i"] = [Example(self._p("sid2i", self._sid(s)), self._words(w.item_words(i)) + eos) for i, s in self.item_sid.items()]
            P["i2cat"] = [Example(self._p("i2cat", self._words(w.item_words(i))), self._words(self._cat_words(i)) + eos) for i in self.item_sid]
            P["sid2cat"] = [Example(self._p("sid2cat", self._sid(s)), self._words(self._cat_words(i)) + eos) for i, s in self.item_sid.items()]
            P["q2sid"], P["sid2q"], P["q2cat"] = [], [], []
            for pv in self.train_pvs:
                qw = self._query_words(pv.query)
                for it in pv.clicked:
                    P["q2sid"].append(Example(self._p("q2sid", qw), self._sid(self.item_sid[it])))
                    P["sid2q"].append(Example(self._p("sid2q", self._sid(self.item_sid[it])), qw + eos))
                    P["q2cat"].append(Example(self._p("q2cat", qw), self._words(self._cat_words(it)) + eos))
            if cot:
                for row in cot_tasks(w):
                    task = "cot_" + row["task"]
                    tgt = [v[t] for t in row["target"]] + eos
                    P.setdefault(task, []).append(Example(self._p(task, self._query_words(row["query"])), tgt))
        elif stage == 2:
            P = {t: [] for t in STAGE_TASKS[2]}
            for pv in self.train_pvs:
                qw = self._query_words(pv.query)
                sq = self._sid(self.sid_q[pv.query])
                for it in pv.clicked:
                    iw = self._words(w.item_words(it))
                    si = self._sid(self.item_sid[it])
                    P["q2i"].append(Example(self._p("q2i", qw), iw + eos))
                    P["i2q"].append(Example(self._p("i2q", iw), qw + eos))
                    P["sidq2sid"].append(Example(self._p("sidq2sid", sq), si))
                    P["sid2sidq"].append(Example(self._p("sid2sidq", si), sq))
        elif stage == 3:
            dt = mode in ("special_token", "codi_l1")
            rows = []
            for pv in self.train_pvs:
                for it in pv.clicked:
                    sid = self._sid(self.item_sid[it])
                    if direct_cot:
                        kw = self._words(self.keywords(pv, training=True))
                        rows.append(Example(self.prompt(pv, task="direct_cot"), kw + [v.sep] + sid, None, "direct_cot"))
                    elif keywords_in_input:
                        rows.append(Example(self.prompt(pv, keywords=True, training=True), sid, None, "personal"))
                    else:
                        teacher = self.prompt(pv, keywords=True, distill_token=(mode == "codi_l1"), training=True)
                        rows.append(Example(self.prompt(pv, distill_token=dt), sid, teacher, "personal"))
            P["personal"] = rows
        else:
            raise ValueError(f"unknown stage {stage}")
        return {k: v_ for k, v_ in P.items() if v_}


def sample_batch(pools: dict[str, list[Example]], spec: StageSpec, batch_size: int,
                 rng: np.random.Generator) -> list[Example]:
    names = sorted(t for t in spec.weights if spec.weights[t] > 0)
    missing = [t for t in names if t not in pools]
    if missing:
        raise KeyError(f"no examples for tasks {missing}")
    p = np.array([spec.weights[t] for t in names])
    picks = rng.choice(len(names), size=batch_size, p=p / p.sum())
    out = []
    for k in picks:
        pool = pools[names[k]]
        out.append(pool[int(rng.integers(len(pool)))])
    return out
