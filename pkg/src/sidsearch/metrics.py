"""Offline retrieval metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

Sid = tuple


def hr_mrr(predictions: Sequence[Sequence[Sid]], truths: Sequence[set], n: int = 10) -> tuple[float, float]:
    """HR@n and MRR@n with 1-based ranks; an empty evaluation set scores (0, 0)."""
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not predictions:
        return 0.0, 0.0
    hits = 0
    rr = 0.0
    for preds, truth in zip(predictions, truths):
        for rank, sid in enumerate(preds[:n], start=1):
            if tuple(sid) in truth:
                hits += 1
                rr += 1.0 / rank
                break
    return hits / len(predictions), rr / len(predictions)


def valid_sid_rate(predictions: Sequence[Sequence[Sid]], trie) -> float:
    """Mean over page views of the fraction of generated SIDs found in the trie."""
    rates = [sum(tuple(s) in trie for s in preds) / len(preds) for preds in predictions if len(preds)]
    return sum(rates) / len(rates) if rates else 0.0


def item_hr(predictions: Sequence[Sequence[Sid]], truth_items: Sequence[set], trie, n: int = 10) -> float:
    """Hit rate after expanding each predicted SID to every item stored at its leaf."""
    if not predictions:
        return 0.0
    hits = 0
    for preds, items in zip(predictions, truth_items):
        got = set()
        for sid in preds[:n]:
            got.update(trie.items(sid))
        hits += bool(got & set(items))
    return hits / len(predictions)


@dataclass
class SliceResult:
    model: str
    slice: str
    n_pv: int
    hr: float
    mrr: float
    valid_sid_rate: float
    item_hr: float

    def check(self) -> list[str]:
        bad = []
        if not 0.0 <= self.hr <= 1.0:
            bad.append(f"{self.model}/{self.slice}: HR outside [0, 1]")
        if not 0.0 <= self.mrr <= self.hr + 1e-12:
            bad.append(f"{self.model}/{self.slice}: MRR exceeds HR")
        return bad
