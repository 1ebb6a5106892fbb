"""Unified token vocabulary and prompt layouts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

CONTROL = ("<pad>", "<bos>", "<sep>", "<eos>", "<kw>", "<long>", "<distill>")
TASKS = (
    "q2sid", "sid2q", "i2sid", "sid2i", "q2cat", "i2cat", "sid2cat",
    "cot_intent", "cot_category", "cot_attribute", "cot_keyword",
    "q2i", "i2q", "sidq2sid", "sid2sidq", "personal", "direct_cot",
)
INTENT_TOKENS = ("<intent:merchandise>", "<intent:shop>", "<intent:live>")


@dataclass
class Vocabulary:
    """Contiguous id ranges: control | task tags | intents | words | users | SID codes."""

    words: tuple[str, ...]
    n_users: int
    L: int
    K: int

    def __post_init__(self):
        self.tokens: list[str] = list(CONTROL) + [f"<task:{t}>" for t in TASKS] + list(INTENT_TOKENS)
        self.word_base = len(self.tokens)
        self.tokens += list(self.words)
        self.user_base = len(self.tokens)
        self.tokens += [f"<u{u}>" for u in range(self.n_users)]
        self.sid_base = len(self.tokens)
        self.tokens += [f"<s{l}_{c}>" for l in range(self.L) for c in range(self.K)]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad, self.bos, self.sep, self.eos, self.kw, self.long, self.distill = (
            self.index[t] for t in CONTROL)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def task(self, name: str) -> int:
        return self.index[f"<task:{name}>"]

    def word(self, w: str) -> int:
        return self.index[w]

    def user(self, u: int) -> int:
        return self.user_base + u

    def sid_token(self, level: int, code: int) -> int:
        return self.sid_base + level * self.K + code

    def sid_tokens(self, sid: Sequence[int]) -> list[int]:
        return [self.sid_token(l, c) for l, c in enumerate(sid)]

    def level_range(self, level: int) -> tuple[int, int]:
        lo = self.sid_base + level * self.K
        return lo, lo + self.K

    def token_class(self, tok: int) -> str:
        if tok < len(CONTROL):
            return "control"
        if tok < self.word_base:
            return "task"
        if tok < self.user_base:
            return "word"
        if tok < self.sid_base:
            return "user"
        if tok < len(self.tokens):
            return "sid"
        raise IndexError(tok)


@dataclass
class Prompt:
    """Token ids plus an optional dense behaviour summary for the ``<long>`` slot."""

    tokens: list[int]
    long_emb: "object | None" = None  # np.ndarray of item-embedding dim


def personal_prompt(vocab: Vocabulary, *, user: int, query_tokens: Sequence[str], sid_q: Sequence[int],
                    seq_q: Sequence[str], short_sids: Sequence[Sequence[int]], long_emb,
                    keywords: Sequence[str] | None = None, distill_token: bool = False,
                    task: str = "personal") -> Prompt:
    """Stage-3 layout: uid, query, SID_q, Seq_q, Seq_short, <long>, [<kw> keywords], <sep> or <distill>.

    The teacher layout is the student layout plus the keyword segment.
    """
    toks = [vocab.task(task), vocab.user(user)]
    toks += [vocab.word(w) for w in query_tokens]
    toks += vocab.sid_tokens(sid_q)
    toks += [vocab.word(w) for w in seq_q]
    for sid in short_sids:
        toks += vocab.sid_tokens(sid)
    toks.append(vocab.long)
    if keywords is not None:
        toks.append(vocab.kw)
        toks += [vocab.word(w) for w in keywords]
    # the distillation token, when present, is the last prompt token before the SIDs
    toks.append(vocab.distill if distill_token else vocab.sep)
    return Prompt(toks, long_emb)
