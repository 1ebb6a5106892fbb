"""Synthetic e-commerce world with exact ground truth.

Generative process
------------------
* Taxonomy: ``n_top`` top-level categories, each with ``leaves_per_top`` leaves.
* Attributes: ``n_attr_types`` types with ``n_attr_values`` values each; every
  item carries one value per type.
* Item embedding = top vector + leaf vector + attribute vectors + small noise,
  so residual quantisation recovers category first and attributes after.
* Users hold a preference distribution over the values of each attribute type
  and, with probability ``exclusion_prob``, one excluded attribute value.
* Queries are direct (``[attrs] leaf``), ambiguous (a top category or topic
  word), negation (``leaf no attr``), question (``what for topic``) or
  non-merchandise (``shop top`` / ``live top``). Frequencies follow a Zipf law
  over a rank that favours ambiguous queries at the head.
* Click probability is logistic in relevance tier, user-attribute preference,
  log popularity and an exclusion penalty; orders are logistic given a click.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .rng import generator

SCHEMA_VERSION = 1

QUERY_TYPES = ("direct", "ambiguous", "negation", "question")
INTENTS = ("merchandise", "shop", "live")
FUNCTION_WORDS = ("no", "what", "for", "shop", "live")


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_top: int = 5
    leaves_per_top: int = 4
    n_items: int = 2000
    n_users: int = 200
    n_queries: int = 500
    n_attr_types: int = 3
    n_attr_values: int = 6
    n_topics: int = 6
    topic_leaves: int = 3
    dim: int = 32
    emb_noise: float = 0.05
    frac_ambiguous: float = 0.12
    frac_negation: float = 0.15
    frac_question: float = 0.08
    frac_nonmerch: float = 0.05
    head_frac: float = 0.1
    tail_frac: float = 0.5
    zipf_s: float = 1.0
    exclusion_prob: float = 0.3
    pref_sharpness: float = 1.5
    merchant_frac: float = 0.1
    ctr_bias: float = -3.5
    ctr_rel: float = 0.5
    ctr_pref: float = 1.2
    ctr_pop: float = 0.3
    ctr_excl: float = 3.0
    order_bias: float = -1.5
    order_pref: float = 1.0
    order_rel: float = 0.5
    sessions: int = 6000
    expose: int = 10
    exposure_noise: float = 1.0
    test_frac: float = 0.1

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int",) and v <= 0:
                raise ConfigError(f"world.{f.name} must be positive, got {v}")
        fr = self.frac_ambiguous + self.frac_negation + self.frac_question + self.frac_nonmerch
        if min(self.frac_ambiguous, self.frac_negation, self.frac_question, self.frac_nonmerch) < 0 or fr > 1:
            raise ConfigError("world query-type fractions must be >= 0 and sum to <= 1")
        if not (0 <= self.head_frac <= 1 and 0 <= self.tail_frac <= 1) or self.head_frac + self.tail_frac > 1:
            raise ConfigError("world.head_frac + world.tail_frac must lie in [0, 1]")
        if self.topic_leaves > self.n_top * self.leaves_per_top:
            raise ConfigError("world.topic_leaves exceeds the number of leaf categories")
        if not 0 < self.test_frac < 1:
            raise ConfigError("world.test_frac must lie in (0, 1)")
        if self.expose > self.n_items:
            raise ConfigError("world.expose exceeds the catalog size")


@dataclass
class Item:
    id: int
    top: int
    leaf: int
    attrs: tuple[int, ...]  # global attribute ids, one per type
    popularity: float
    merchant_flag: bool
    embedding: np.ndarray = field(repr=False)


@dataclass
class User:
    id: int
    pref: np.ndarray = field(repr=False)  # (n_attr_total,) per-type distributions
    exclusions: frozenset[int]


@dataclass
class Query:
    id: int
    tokens: tuple[str, ...]
    qtype: str
    intent: str
    leaves: tuple[int, ...]
    required: tuple[int, ...]
    excluded: tuple[int, ...]
    topic: int | None
    weight: float
    tier: str = "torso"


@dataclass
class Interaction:
    session: int
    user: int
    query: int
    exposed: list[int]
    clicked: list[int]
    ordered: list[int]


@dataclass
class Analysis:
    intent: str
    top: tuple[int, ...]
    leaves: tuple[int, ...]
    attributes: tuple[int, ...]
    excluded: tuple[int, ...]
    topics: tuple[int, ...]


@dataclass
class KeywordTuple:
    query: int
    user: int | None
    keywords: list[str]
    analysis: Analysis
    session: int | None = None


@dataclass
class NotExtractable:
    query: int
    intent: str


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class World:
    """Ground truth shared by every downstream module."""

    def __init__(self, config: WorldConfig, seed: int, items: list[Item], users: list[User],
                 queries: list[Query], topic_leaves: list[tuple[int, ...]], topic_attr: list[int]):
        self.config = config
        self.seed = seed
        self.items = items
        self.users = users
        self.queries = queries
        self.topic_leaves = topic_leaves
        self.topic_attr = topic_attr
        c = config
        self.n_leaves = c.n_top * c.leaves_per_top
        self.n_attrs = c.n_attr_types * c.n_attr_values
        self.top_words = [f"top{t}" for t in range(c.n_top)]
        self.leaf_words = [f"leaf{l}" for l in range(self.n_leaves)]
        self.attr_words = [f"a{t}_{v}" for t in range(c.n_attr_types) for v in range(c.n_attr_values)]
        self.topic_words = [f"topic{k}" for k in range(c.n_topics)]
        self.words = self.top_words + self.leaf_words + self.attr_words + self.topic_words + list(FUNCTION_WORDS)
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self._item_leaf = np.array([it.leaf for it in items])
        self._item_attrs = np.array([it.attrs for it in items], dtype=np.int64).reshape(len(items), -1)
        self._item_logpop = np.log(np.array([it.popularity for it in items]))
        self._attr_onehot = np.zeros((len(items), self.n_attrs))
        for it in items:
            self._attr_onehot[it.id, list(it.attrs)] = 1.0
        self._tier_cache: dict[int, np.ndarray] = {}
        self.ctr_override: Callable | None = None
        self.order_override: Callable | None = None

    # -- taxonomy helpers
    def leaf_top(self, leaf: int) -> int:
        return leaf // self.config.leaves_per_top

    def leaves_of_top(self, top: int) -> tuple[int, ...]:
        k = self.config.leaves_per_top
        return tuple(range(top * k, (top + 1) * k))

    def attr_type(self, attr: int) -> int:
        return attr // self.config.n_attr_values

    def item_words(self, item: int) -> list[str]:
        it = self.items[item]
        return [self.leaf_words[it.leaf]] + [self.attr_words[a] for a in it.attrs]

    # -- relevance
    def tiers(self, query: int) -> np.ndarray:
        """Relevance tier of every catalog item for ``query`` (3 best, 0 irrelevant)."""
        hit = self._tier_cache.get(query)
        if hit is not None:
            return hit
        q = self.queries[query]
        in_leaf = np.isin(self._item_leaf, q.leaves)
        q_tops = {self.leaf_top(l) for l in q.leaves}
        sibling = np.isin(self._item_leaf // self.config.leaves_per_top, list(q_tops)) & ~in_leaf
        has_req = self._attr_onehot[:, list(q.required)].sum(1) == len(q.required) if q.required else np.ones(len(self.items), bool)
        has_excl = self._attr_onehot[:, list(q.excluded)].sum(1) > 0 if q.excluded else np.zeros(len(self.items), bool)
        t = np.zeros(len(self.items), dtype=np.int64)
        t[sibling] = 1
        t[in_leaf] = 2
        t[in_leaf & has_req & ~has_excl] = 3
        t[in_leaf & has_excl] = 1
        self._tier_cache[query] = t
        return t

    def relevance_tier(self, query: int, item: int) -> int:
        if not 0 <= item < len(self.items):
            raise KeyError(f"unknown item {item}")
        return int(self.tiers(query)[item])

    # -- behaviour model
    def pref_score(self, user: int, items) -> np.ndarray:
        """Mean over attribute types of ``V * pref - 1``; zero for an indifferent user."""
        V = self.config.n_attr_values
        p = self.users[user].pref[self._item_attrs[items]]
        return (V * p - 1.0).mean(axis=-1)

    def _excluded(self, user: int, items) -> np.ndarray:
        ex = self.users[user].exclusions
        if not ex:
            return np.zeros(np.shape(items), dtype=bool)
        return self._attr_onehot[items][..., sorted(ex)].sum(-1) > 0

    def ctr(self, user: int, query: int, items) -> np.ndarray:
        """Click probability, strictly inside (0, 1) unless overridden."""
        items = np.asarray(items)
        if self.ctr_override is not None:
            return np.broadcast_to(np.asarray(self.ctr_override(user, query, items), dtype=float), items.shape)
        c = self.config
        z = (c.ctr_bias + c.ctr_rel * self.tiers(query)[items] + c.ctr_pref * self.pref_score(user, items)
             + c.ctr_pop * self._item_logpop[items] - c.ctr_excl * self._excluded(user, items))
        return np.clip(_sigmoid(z), 1e-12, 1 - 1e-12)

    def order_prob(self, user: int, query: int, items) -> np.ndarray:
        items = np.asarray(items)
        if self.order_override is not None:
            return np.broadcast_to(np.asarray(self.order_override(user, query, items), dtype=float), items.shape)
        c = self.config
        z = c.order_bias + c.order_pref * self.pref_score(user, items) + c.order_rel * (self.tiers(query)[items] == 3)
        return np.clip(_sigmoid(z), 1e-12, 1 - 1e-12)

    def sample_click(self, user: int, query: int, item: int, rng: np.random.Generator) -> bool:
        return bool(rng.random() < float(self.ctr(user, query, np.array([item]))[0]))

    def exposure(self, query: int, rng: np.random.Generator) -> list[int]:
        """Top-``expose`` items by relevance tier, then jittered popularity."""
        c = self.config
        score = self.tiers(query) * 100.0 + self._item_logpop + c.exposure_noise * rng.gumbel(size=len(self.items))
        top = np.argsort(-score, kind="stable")[: c.expose]
        return [int(i) for i in top]

    def merchandise_queries(self) -> list[int]:
        return [q.id for q in self.queries if q.intent == "merchandise"]

    # -- keyword oracle
    def analyse(self, query: int) -> Analysis:
        q = self.queries[query]
        tops = tuple(sorted({self.leaf_top(l) for l in q.leaves}))
        return Analysis(q.intent, tops, tuple(q.leaves), tuple(q.required), tuple(q.excluded),
                        (q.topic,) if q.topic is not None else ())

    def _word_popularity(self, leaves: Sequence[int]) -> dict[str, float]:
        mask = np.isin(self._item_leaf, leaves)
        pops = np.exp(self._item_logpop)
        out: dict[str, float] = {}
        for l in leaves:
            out[self.leaf_words[l]] = float(pops[self._item_leaf == l].sum())
        attr_pop = (self._attr_onehot[mask] * pops[mask, None]).sum(0)
        for a in range(self.n_attrs):
            if attr_pop[a] > 0:
                out[self.attr_words[a]] = float(attr_pop[a])
        return out

    def keyword_oracle(self, query: int, user: int | None = None,
                       session_items: Sequence[int] | None = None,
                       max_plain: int = 8, max_personal: int = 5) -> KeywordTuple | NotExtractable:
        """Deterministic stand-in for the three-step keyword extraction pipeline."""
        q = self.queries[query]
        if q.intent != "merchandise":
            return NotExtractable(query, q.intent)
        an = self.analyse(query)
        pop = self._word_popularity(q.leaves)
        banned = {self.attr_words[a] for a in q.excluded}

        def rank(words):
            words = [w for w in dict.fromkeys(words) if w in pop and w not in banned]
            return sorted(words, key=lambda w: (-pop[w], self.word_index[w]))

        # step 2: categories, query attributes, then popular attributes of tier-3 items
        tiers = self.tiers(query)
        good = tiers == 3
        attr_mass = (self._attr_onehot[good] * np.exp(self._item_logpop[good])[:, None]).sum(0)
        suggested = [self.attr_words[a] for a in np.argsort(-attr_mass, kind="stable") if attr_mass[a] > 0]
        required = [self.attr_words[a] for a in q.required]
        leaves = [self.leaf_words[l] for l in q.leaves]
        must = rank(leaves + required)
        step2 = rank(must + [w for w in suggested if w in pop and w not in banned and w not in must][: max(0, max_plain - len(must))])
        if user is None and session_items is None:
            return KeywordTuple(query, None, step2, an)

        # step 3: preference calibration
        priority: list[str] = []
        if session_items:
            for it in session_items:
                # only words consistent with the query's categories survive
                priority += [w for w in self.item_words(it) if w in pop and w not in banned]
        base = list(step2)
        if user is not None:
            u = self.users[user]
            ex_words = {self.attr_words[a] for a in u.exclusions}
            base = [w for w in base if w not in ex_words]
            V = self.config.n_attr_values
            for t in range(self.config.n_attr_types):
                fav = t * V + int(np.argmax(u.pref[t * V:(t + 1) * V]))
                w = self.attr_words[fav]
                if w in pop and w not in ex_words and w not in banned:
                    priority.append(w)
        chosen = list(dict.fromkeys(priority + base))[:max_personal]
        chosen = sorted(chosen, key=lambda w: (-pop.get(w, 0.0), self.word_index[w]))
        return KeywordTuple(query, user, chosen, an)

    # -- tiers
    def tier_counts(self) -> dict[str, int]:
        out = {"head": 0, "torso": 0, "tail": 0}
        for q in self.queries:
            out[q.tier] += 1
        return out


# --------------------------------------------------------------- generation

def generate_world(config: WorldConfig | None = None, seed: int = 0) -> World:
    c = config or WorldConfig()
    c.validate()
    rng = generator(seed, "world")
    n_leaves = c.n_top * c.leaves_per_top
    n_attrs = c.n_attr_types * c.n_attr_values

    top_vec = rng.normal(size=(c.n_top, c.dim))
    leaf_vec = 0.6 * rng.normal(size=(n_leaves, c.dim))
    attr_vec = 0.35 * rng.normal(size=(n_attrs, c.dim))

    items = []
    leaf_of = rng.integers(n_leaves, size=c.n_items)
    for i in range(c.n_items):
        leaf = int(leaf_of[i])
        vals = rng.integers(c.n_attr_values, size=c.n_attr_types)
        attrs = tuple(int(t * c.n_attr_values + v) for t, v in enumerate(vals))
        emb = top_vec[leaf // c.leaves_per_top] + leaf_vec[leaf] + attr_vec[list(attrs)].sum(0)
        emb = emb + c.emb_noise * rng.normal(size=c.dim)
        items.append(Item(i, leaf // c.leaves_per_top, leaf, attrs, float(rng.lognormal(0.0, 1.0)),
                          bool(rng.random() < c.merchant_frac), emb))

    users = []
    for u in range(c.n_users):
        logits = c.pref_sharpness * rng.normal(size=(c.n_attr_types, c.n_attr_values))
        p = np.exp(logits - logits.max(1, keepdims=True))
        p = (p / p.sum(1, keepdims=True)).reshape(-1)
        excl: frozenset[int] = frozenset()
        if rng.random() < c.exclusion_prob:
            t = int(rng.integers(c.n_attr_types))
            block = p[t * c.n_attr_values:(t + 1) * c.n_attr_values]
            # never exclude the favourite value
            candidates = [v for v in range(c.n_attr_values) if v != int(np.argmax(block))]
            excl = frozenset({t * c.n_attr_values + int(rng.choice(candidates))})
        users.append(User(u, p, excl))

    topic_leaves = [tuple(sorted(int(x) for x in rng.choice(n_leaves, c.topic_leaves, replace=False)))
                    for _ in range(c.n_topics)]
    topic_attr = [int(rng.integers(n_attrs)) for _ in range(c.n_topics)]

    queries = _generate_queries(c, rng, n_leaves, topic_leaves, topic_attr)
    world = World(c, seed, items, users, queries, topic_leaves, topic_attr)
    return world


def _generate_queries(c: WorldConfig, rng, n_leaves, topic_leaves, topic_attr) -> list[Query]:
    V = c.n_attr_values
    quotas = {
        "ambiguous": int(round(c.frac_ambiguous * c.n_queries)),
        "negation": int(round(c.frac_negation * c.n_queries)),
        "question": int(round(c.frac_question * c.n_queries)),
        "nonmerch": int(round(c.frac_nonmerch * c.n_queries)),
    }
    quotas["direct"] = c.n_queries - sum(quotas.values())
    if quotas["direct"] < 0:
        raise ConfigError("query-type fractions exceed the number of queries")
    seen: set[tuple] = set()
    specs: list[dict] = []

    def attr_word(a):
        return f"a{a // V}_{a % V}"

    def make(kind):
        if kind == "direct":
            leaf = int(rng.integers(n_leaves))
            k = int(rng.choice([0, 1, 1, 2]))
            types = sorted(rng.choice(c.n_attr_types, k, replace=False).tolist())
            req = tuple(int(t * V + rng.integers(V)) for t in types)
            return dict(tokens=tuple(attr_word(a) for a in req) + (f"leaf{leaf}",), qtype="direct",
                        intent="merchandise", leaves=(leaf,), required=req, excluded=(), topic=None)
        if kind == "negation":
            leaf = int(rng.integers(n_leaves))
            ex = int(rng.integers(c.n_attr_types * V))
            return dict(tokens=(f"leaf{leaf}", "no", attr_word(ex)), qtype="negation", intent="merchandise",
                        leaves=(leaf,), required=(), excluded=(ex,), topic=None)
        if kind == "ambiguous":
            req = (int(rng.integers(c.n_attr_types * V)),) if rng.random() < 0.7 else ()
            words = tuple(attr_word(a) for a in req)
            if rng.random() < 0.6:
                top = int(rng.integers(c.n_top))
                leaves = tuple(range(top * c.leaves_per_top, (top + 1) * c.leaves_per_top))
                return dict(tokens=words + (f"top{top}",), qtype="ambiguous", intent="merchandise",
                            leaves=leaves, required=req, excluded=(), topic=None)
            k = int(rng.integers(c.n_topics))
            return dict(tokens=words + (f"topic{k}",), qtype="ambiguous", intent="merchandise",
                        leaves=topic_leaves[k], required=req, excluded=(), topic=k)
        if kind == "question":
            k = int(rng.integers(c.n_topics))
            leaf = int(rng.choice(topic_leaves[k]))
            extra = ()
            if rng.random() < 0.7:
                t = int(rng.integers(c.n_attr_types))
                if t != topic_attr[k] // V:
                    extra = (int(t * V + rng.integers(V)),)
            req = tuple(sorted((topic_attr[k],) + extra))
            return dict(tokens=("what",) + tuple(attr_word(a) for a in extra) + (f"leaf{leaf}", "for", f"topic{k}"),
                        qtype="question", intent="merchandise", leaves=(leaf,), required=req, excluded=(), topic=k)
        intent = "shop" if rng.random() < 0.5 else "live"
        if rng.random() < 0.3:
            top = int(rng.integers(c.n_top))
            return dict(tokens=(intent, f"top{top}"), qtype="direct", intent=intent,
                        leaves=tuple(range(top * c.leaves_per_top, (top + 1) * c.leaves_per_top)),
                        required=(), excluded=(), topic=None)
        leaf = int(rng.integers(n_leaves))
        return dict(tokens=(intent, f"leaf{leaf}"), qtype="direct", intent=intent, leaves=(leaf,),
                    required=(), excluded=(), topic=None)

    for kind in ("ambiguous", "negation", "question", "nonmerch", "direct"):
        made, attempts = 0, 0
        while made < quotas[kind]:
            attempts += 1
            if attempts > 200 * (quotas[kind] + 10):
                raise ConfigError(f"cannot generate {quotas[kind]} distinct {kind} queries")
            s = make(kind)
            if s["tokens"] in seen:
                continue
            seen.add(s["tokens"])
            specs.append(s)
            made += 1

    # popularity rank: ambiguous queries lean towards the head
    prior = np.array([1.5 if s["qtype"] == "ambiguous" else 0.0 for s in specs]) + rng.random(len(specs)) * 2.0
    order = np.argsort(-prior, kind="stable")
    n = len(specs)
    weights = 1.0 / (np.arange(1, n + 1) ** c.zipf_s)
    n_head = int(round(c.head_frac * n))
    n_tail = int(round(c.tail_frac * n))
    queries: list[Query] = []
    for rank, idx in enumerate(order):
        tier = "head" if rank < n_head else ("tail" if rank >= n - n_tail else "torso")
        queries.append(Query(rank, weight=float(weights[rank]), tier=tier, **specs[idx]))
    return queries


def simulate_logs(world: World, sessions: int | None = None, seed: int = 0) -> list[Interaction]:
    """Sessions in time order; each samples a user, a merchandise query, exposure, clicks and orders."""
    n = world.config.sessions if sessions is None else sessions
    rng = generator(seed, "logs")
    merch = world.merchandise_queries()
    w = np.array([world.queries[q].weight for q in merch])
    w = w / w.sum()
    out = []
    for s in range(n):
        u = int(rng.integers(len(world.users)))
        q = int(merch[int(rng.choice(len(merch), p=w))])
        exposed = world.exposure(q, rng)
        p_click = world.ctr(u, q, exposed)
        clicked = [i for i, c in zip(exposed, rng.random(len(exposed)) < p_click) if c]
        ordered = []
        if clicked:
            p_order = world.order_prob(u, q, clicked)
            ordered = [i for i, o in zip(clicked, rng.random(len(clicked)) < p_order) if o]
        out.append(Interaction(s, u, q, exposed, clicked, ordered))
    return out


def split_by_time(logs: Sequence[Interaction], test_frac: float) -> tuple[list[Interaction], list[Interaction]]:
    cut = len(logs) - int(round(test_frac * len(logs)))
    ordered = sorted(logs, key=lambda r: r.session)
    return ordered[:cut], ordered[cut:]


@dataclass
class History:
    """What was known about a user just before a session."""

    prev_query: int | None
    clicked: list[int]  # all earlier clicked items, oldest first


def user_histories(logs: Sequence[Interaction]) -> dict[int, History]:
    """Per-session snapshot of the user's earlier behaviour, in session order."""
    last_query: dict[int, int] = {}
    clicks: dict[int, list[int]] = {}
    out = {}
    for r in sorted(logs, key=lambda r: r.session):
        out[r.session] = History(last_query.get(r.user), list(clicks.get(r.user, [])))
        last_query[r.user] = r.query
        clicks.setdefault(r.user, []).extend(r.clicked)
    return out


def session_keywords(world: World, r: Interaction, history: History, recent: int = 2, training: bool = True):
    """Personalised keywords for a session.

    Training tuples inject the items clicked in the session itself ahead of the
    user's recent history, so words of the ground-truth items survive. At
    inference only the earlier behaviour is available.
    """
    items = (list(r.clicked) if training else []) + history.clicked[-recent:]
    return world.keyword_oracle(r.query, r.user, session_items=list(dict.fromkeys(items)))


def cot_tasks(world: World) -> list[dict]:
    """The four query-understanding tasks (intent, category, attribute, keyword) for every query."""
    rows = []
    for q in world.queries:
        an = world.analyse(q.id)
        rows.append(dict(task="intent", query=q.id, target=[f"<intent:{q.intent}>"]))
        if q.intent != "merchandise":
            continue
        cats = [world.top_words[t] for t in an.top] + [world.leaf_words[l] for l in an.leaves]
        rows.append(dict(task="category", query=q.id, target=cats))
        attrs = [world.attr_words[a] for a in an.attributes]
        for a in an.excluded:
            attrs += ["no", world.attr_words[a]]
        rows.append(dict(task="attribute", query=q.id, target=attrs))
        kw = world.keyword_oracle(q.id)
        rows.append(dict(task="keyword", query=q.id, target=list(kw.keywords)))
    return rows


# -------------------------------------------------------------------- files

def _jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_corpus(world: World, logs: Sequence[Interaction], out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    v = {"version": SCHEMA_VERSION}
    (out / "meta.json").write_text(json.dumps(
        {"schema": "sidsearch.corpus", **v, "seed": world.seed, "config": asdict(world.config),
         "topic_leaves": [list(t) for t in world.topic_leaves], "topic_attr": world.topic_attr},
        sort_keys=True, indent=1))
    _jsonl(out / "items.jsonl", (
        {**v, "id": it.id, "top": it.top, "leaf": it.leaf, "attrs": list(it.attrs),
         "popularity": it.popularity, "merchant_flag": it.merchant_flag,
         "embedding": it.embedding.tolist()} for it in world.items))
    _jsonl(out / "users.jsonl", (
        {**v, "id": u.id, "pref": u.pref.tolist(), "exclusions": sorted(u.exclusions)} for u in world.users))
    _jsonl(out / "queries.jsonl", (
        {**v, "id": q.id, "tokens": list(q.tokens), "type": q.qtype, "intent": q.intent,
         "leaves": list(q.leaves), "required": list(q.required), "excluded": list(q.excluded),
         "topic": q.topic, "weight": q.weight, "tier": q.tier} for q in world.queries))
    train, _ = split_by_time(logs, world.config.test_frac)
    train_ids = {r.session for r in train}
    _jsonl(out / "logs.jsonl", (
        {**v, "session": r.session, "user": r.user, "query": r.query, "exposed": r.exposed,
         "clicked": r.clicked, "ordered": r.ordered,
         "split": "train" if r.session in train_ids else "test"} for r in logs))
    kw_rows = []
    for q in world.queries:
        kw = world.keyword_oracle(q.id)
        if isinstance(kw, NotExtractable):
            kw_rows.append({**v, "query": q.id, "user": None, "session": None, "extractable": False,
                            "intent": kw.intent, "keywords": []})
        else:
            kw_rows.append({**v, "query": q.id, "user": None, "session": None, "extractable": True,
                            "intent": q.intent, "keywords": kw.keywords})
    hist = user_histories(logs)
    for r in train:
        if not r.clicked:
            continue
        kw = session_keywords(world, r, hist[r.session])
        kw_rows.append({**v, "query": r.query, "user": r.user, "session": r.session, "extractable": True,
                        "intent": "merchandise", "keywords": kw.keywords})
    _jsonl(out / "keywords.jsonl", kw_rows)
    _jsonl(out / "cot_tasks.jsonl", ({**v, **row} for row in cot_tasks(world)))


def load_corpus(path: str | Path) -> tuple[World, list[Interaction]]:
    path = Path(path)
    if not (path / "meta.json").exists():
        raise FileNotFoundError(f"no corpus at {path}")
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported corpus schema version {meta.get('version')}")
    config = WorldConfig(**meta["config"])
    items = [Item(r["id"], r["top"], r["leaf"], tuple(r["attrs"]), r["popularity"], r["merchant_flag"],
                  np.array(r["embedding"])) for r in _read_jsonl(path / "items.jsonl")]
    users = [User(r["id"], np.array(r["pref"]), frozenset(r["exclusions"])) for r in _read_jsonl(path / "users.jsonl")]
    queries = [Query(r["id"], tuple(r["tokens"]), r["type"], r["intent"], tuple(r["leaves"]), tuple(r["required"]),
                     tuple(r["excluded"]), r["topic"], r["weight"], r["tier"]) for r in _read_jsonl(path / "queries.jsonl")]
    world = World(config, meta["seed"], items, users, queries,
                  [tuple(t) for t in meta["topic_leaves"]], list(meta["topic_attr"]))
    logs = [Interaction(r["session"], r["user"], r["query"], r["exposed"], r["clicked"], r["ordered"])
            for r in _read_jsonl(path / "logs.jsonl")]
    return world, logs
