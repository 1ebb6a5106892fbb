"""Composite item-level reward: relevance tier, clipped CTR, and click/order feedback."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import SidTrie
from .corpus import World


@dataclass
class RewardConfig:
    v_order: float = 4.0
    v_click: float = 3.0
    tier_values: dict = field(default_factory=lambda: {3: 3.0, 2: 2.0, 1: 0.0, 0: -1.0})
    ctr_clip: tuple = (0.01, 0.99)
    use_ctr: bool = True
    w_item: float = 0.5
    merchant_bonus: float = 0.0

    def validate(self) -> None:
        lo, hi = self.ctr_clip
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"ctr_clip must satisfy 0 < lo < hi < 1, got {self.ctr_clip}")
        if set(int(k) for k in self.tier_values) != {0, 1, 2, 3}:
            raise ValueError("tier_values must map each tier 0..3")
        self.tier_values = {int(k): float(v) for k, v in self.tier_values.items()}
        if self.v_order < self.v_click:
            warnings.warn("v_order < v_click: orders would be rewarded below clicks", stacklevel=2)


@dataclass(frozen=True)
class RewardBreakdown:
    r_rel: float
    r_ctr: float
    r_co: float

    @property
    def r_item(self) -> float:
        return self.r_co + self.r_ctr + self.r_rel


@dataclass
class RewardContext:
    """One page view: who searched what, and which SIDs they clicked or ordered."""

    user: int
    query: int
    s_click: set
    s_order: set


def relevance_tier(query: int, item: int, world: World) -> int:
    return world.relevance_tier(query, item)


def ctr_reward(user: int, query: int, item: int, world: World, clip=(0.01, 0.99)) -> float:
    return float(np.clip(world.ctr(user, query, np.array([item]))[0], clip[0], clip[1]))


def click_order_reward(sid, s_click, s_order, cfg: RewardConfig) -> float:
    sid = tuple(sid)
    if sid in s_order:
        return cfg.v_order
    if sid in s_click:
        return cfg.v_click
    return 0.0


def representative_item(sid, trie: SidTrie) -> int | None:
    """Lowest item id stored at the SID's leaf, or None for an invalid SID."""
    items = trie.items(sid)
    return items[0] if items else None


def composite_reward(sid, ctx: RewardContext, world: World, trie: SidTrie, cfg: RewardConfig) -> RewardBreakdown:
    """Invalid SIDs get the tier-0 value, the lower CTR clip and no click/order credit."""
    item = representative_item(sid, trie)
    r_co = click_order_reward(sid, ctx.s_click, ctx.s_order, cfg)
    if item is None:
        return RewardBreakdown(cfg.tier_values[0], cfg.ctr_clip[0] if cfg.use_ctr else 0.0, r_co)
    r_rel = cfg.tier_values[world.relevance_tier(ctx.query, item)]
    if cfg.merchant_bonus and world.items[item].merchant_flag:
        r_rel += cfg.merchant_bonus
    r_ctr = ctr_reward(ctx.user, ctx.query, item, world, cfg.ctr_clip) if cfg.use_ctr else 0.0
    return RewardBreakdown(r_rel, r_ctr, r_co)


def group_rewards(sids: Sequence, ctx: RewardContext, world: World, trie: SidTrie,
                  cfg: RewardConfig) -> list[RewardBreakdown]:
    return [composite_reward(tuple(int(c) for c in s), ctx, world, trie, cfg) for s in sids]
