"""Group-relative policy optimisation over SID rollouts.

Two credit-assignment schemes share the sampling and reward code:

* ``grpo``: one standardised advantage per rollout, shared by all its tokens,
  with the clipped importance-ratio surrogate.
* ``tpma``: per-position advantages from the marginal gain in weighted prefix
  match against the best target SID, gated by how much of the prefix was
  right, plus a weighted rollout-level advantage; no ratio clipping.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .codec import SidTrie
from .decoding import beam_search, sample
from .model import ModelConfig, Params, forward, make_batch
from .optim import SGD, NonFiniteError
from .reward import RewardConfig, RewardContext, group_rewards
from .rng import generator


@dataclass
class RLConfig:
    algo: str = "tpma"
    G: int = 8
    delta: float = 1e-8
    temperature: float = 1.0
    sft_mix: float = 0.2
    clip_eps: float = 0.2
    steps: int = 40
    prompts_per_step: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    constrained: bool = True
    logprob: str = "full"          # "full" vocabulary or "masked" to the allowed codes
    literal_weights: bool = False  # last SID level weighted 0 instead of 1

    def validate(self) -> None:
        if self.algo not in ("grpo", "tpma"):
            raise ValueError(f"unknown RL algorithm {self.algo!r}")
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if self.logprob not in ("full", "masked"):
            raise ValueError("logprob must be 'full' or 'masked'")


def position_weights(L: int, literal: bool = False) -> np.ndarray:
    """2 for the first two levels, 1 afterwards (0 for the last level if ``literal``)."""
    w = np.array([2.0 if l < 2 else 1.0 for l in range(L)])
    if literal and L > 2:
        w[-1] = 0.0
    return w


# -------------------------------------------------------------- advantages

def grpo_advantage(rewards, delta: float = 1e-8) -> np.ndarray:
    """``(r - mean) / (std + delta)`` with the population std; zero when all rewards agree."""
    r = np.asarray(rewards, dtype=np.float64)
    if np.all(r == r[0]):
        return np.zeros_like(r)
    s = np.abs(r).max()
    x = r / s                 # unit scale, so tiny or huge rewards centre cleanly
    c = x - x.mean()
    c = c - c.mean()          # second pass removes the rounding left by the first
    rms = np.sqrt(np.mean(c * c))
    with np.errstate(over="ignore"):
        d = delta / s         # inf when the spread is far below delta, giving zeros
    return c / (rms + d)


@dataclass
class PrefixReward:
    R: np.ndarray    # (L+1,), R[0] = 0
    M: np.ndarray    # (L+1,), unweighted match counts
    dR: np.ndarray   # (L,)
    target: tuple | None


def prefix_reward(sid: Sequence[int], targets, weights: np.ndarray) -> PrefixReward:
    """Weighted prefix match against the best target (ties: smallest target)."""
    L = len(weights)
    o = np.asarray(sid)
    best, best_score = None, -1.0
    for t in sorted(tuple(int(c) for c in t) for t in targets):
        score = float(np.sum(weights * (o == np.asarray(t))))
        if score > best_score:
            best, best_score = t, score
    if best is None:
        z = np.zeros(L + 1)
        return PrefixReward(z, z.copy(), np.zeros(L), None)
    hit = (o == np.asarray(best)).astype(np.float64)
    R = np.concatenate([[0.0], np.cumsum(weights * hit)])
    M = np.concatenate([[0.0], np.cumsum(hit)])
    return PrefixReward(R, M, R[1:] - R[:-1], best)


def prefix_gate(m_prev: float, l: int) -> float:
    """Gate for 1-based position ``l`` given the match count over positions < l."""
    if l == 1:
        return 1.0
    return float(m_prev) / (l - 1)


def position_advantage(dR: np.ndarray, delta: float = 1e-8) -> np.ndarray:
    """Standardise marginal gains across the group, independently per position. ``dR`` is (G, L)."""
    return np.stack([grpo_advantage(dR[:, l], delta) for l in range(dR.shape[1])], axis=1)


def combined_advantage(pos_adv: np.ndarray, item_adv: np.ndarray, w_item: float) -> np.ndarray:
    return pos_adv + w_item * np.asarray(item_adv)[:, None]


@dataclass
class TpmaTrace:
    M: np.ndarray          # (G, L) match count up to and including l
    R: np.ndarray          # (G, L)
    dR: np.ndarray         # (G, L)
    gate: np.ndarray       # (G, L)
    pos_adv: np.ndarray    # (G, L)
    item_adv: np.ndarray   # (G,)
    final_adv: np.ndarray  # (G, L)

    def to_json(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


def tpma_trace(sids: np.ndarray, targets, item_rewards, weights: np.ndarray, w_item: float,
               delta: float = 1e-8, valid=None) -> TpmaTrace:
    """Everything TPMA needs for one group. Invalid rollouts get zero prefix quantities."""
    G, L = sids.shape
    M = np.zeros((G, L + 1))
    R = np.zeros((G, L + 1))
    for i in range(G):
        if valid is not None and not valid[i]:
            continue
        pr = prefix_reward(sids[i], targets, weights)
        M[i], R[i] = pr.M, pr.R
    dR = R[:, 1:] - R[:, :-1]
    gate = np.ones((G, L))
    for l in range(2, L + 1):
        gate[:, l - 1] = M[:, l - 1] / (l - 1)
    pos = position_advantage(dR, delta)
    item = grpo_advantage(item_rewards, delta)
    return TpmaTrace(M[:, 1:], R[:, 1:], dR, gate, pos, item, combined_advantage(pos, item, w_item))


# ------------------------------------------------------------------ losses

def grpo_loss(logp_new: Tensor, logp_old: np.ndarray, adv: np.ndarray, clip_eps: float) -> Tensor:
    """``-mean min(r A, clip(r, 1-eps, 1+eps) A)`` over rollouts and tokens; A is per rollout.

    ``logp_new`` has shape (..., G, L); ``adv`` has shape (..., G).
    """
    ratio = ad.exp(logp_new - Tensor(logp_old))
    _check_ratio(ratio)
    A = np.asarray(adv, dtype=np.float64)[..., None]
    surr = ad.minimum(ratio * A, ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * A)
    return -ad.mean(surr)


def tpma_loss(logp_new: Tensor, logp_old: np.ndarray, gate: np.ndarray, final_adv: np.ndarray) -> Tensor:
    """``-(1/G) sum_i (1/L) sum_l g r A`` without clipping; averaged over groups if batched."""
    ratio = ad.exp(logp_new - Tensor(logp_old))
    _check_ratio(ratio)
    return -ad.mean(ratio * (np.asarray(gate) * np.asarray(final_adv)))


def _check_ratio(ratio: Tensor) -> None:
    if not np.all(np.isfinite(ratio.data)):
        raise NonFiniteError("importance ratio is not finite")


def rollout_logprobs(params: Params, cfg: ModelConfig, vocab, prompts, sids: np.ndarray, trie: SidTrie | None,
                     masked: bool = False) -> Tensor:
    """Autodiff log-probs ``(N, L)`` of each SID token given its prompt; no dropout."""
    N, L = sids.shape
    targets = [vocab.sid_tokens(s) for s in sids.tolist()]
    b = make_batch(list(zip(prompts, targets)), vocab, cfg.item_dim)
    logits = forward(params, cfg, b)
    V = logits.shape[-1]
    if masked:
        allow = np.full((N, L, V), -1e9)
        for n in range(N):
            for l in range(L):
                lo, _ = vocab.level_range(l)
                if trie is not None:
                    kids = trie.children(tuple(sids[n, :l].tolist()))
                else:
                    kids = np.zeros(0, dtype=np.int64)
                if len(kids) == 0:
                    kids = np.arange(vocab.K)
                allow[n, l, lo + kids] = 0.0
        logits = logits + allow
    lp = ad.log_softmax(logits, axis=-1)
    flat = ad.reshape(lp, (N * L, V))
    picked = flat[np.arange(N * L), b.targets.reshape(-1)]
    return ad.reshape(picked, (N, L))


# ------------------------------------------------------------------- loop

@dataclass
class RLState:
    step: int = 0
    history: list = field(default_factory=list)


def rl_run(params: Params, cfg: ModelConfig, data, rcfg: RLConfig, rwcfg: RewardConfig, seed: int,
           metrics_path=None, trace_path=None, pvs=None) -> list[dict]:
    """Sample groups from logged page views, score them, and update the policy in place."""
    rcfg.validate()
    rwcfg.validate()
    vocab, trie, world = data.vocab, data.trie, data.world
    pvs = data.train_pvs if pvs is None else pvs
    opt = SGD(rcfg.lr, rcfg.momentum, rcfg.clip_norm)
    w = position_weights(vocab.L, rcfg.literal_weights)
    rows = []
    for step in range(rcfg.steps):
        rng = generator(seed, "rl", step)
        idx = rng.choice(len(pvs), size=rcfg.prompts_per_step, replace=False)
        batch = [pvs[int(i)] for i in idx]
        prompts = [data.prompt(pv) for pv in batch]
        ro = sample(params, cfg, vocab, prompts, trie, rcfg.G, rcfg.temperature, (seed, "rollout", step),
                    constrained=rcfg.constrained)
        B, G, L = ro.sids.shape
        item_r = np.zeros((B, G))
        traces = []
        for b, pv in enumerate(batch):
            ctx = RewardContext(pv.user, pv.query, data.truth(pv, "click"), data.truth(pv, "order"))
            bd = group_rewards(ro.sids[b], ctx, world, trie, rwcfg)
            item_r[b] = [x.r_item for x in bd]
            if rcfg.algo == "tpma":
                targets = ctx.s_click | ctx.s_order
                traces.append(tpma_trace(ro.sids[b], targets, item_r[b], w, rwcfg.w_item, rcfg.delta,
                                         valid=ro.valid[b]))
        old = ro.logp_masked if rcfg.logprob == "masked" else ro.logp_full
        flat_prompts = [p for p in prompts for _ in range(G)]
        with Tape() as tape:
            lp = rollout_logprobs(params, cfg, vocab, flat_prompts, ro.sids.reshape(B * G, L), trie,
                                  masked=rcfg.logprob == "masked")
            lp = ad.reshape(lp, (B, G, L))
            if rcfg.algo == "grpo":
                adv = np.stack([grpo_advantage(item_r[b], rcfg.delta) for b in range(B)])
                loss = grpo_loss(lp, old, adv, rcfg.clip_eps)
            else:
                gate = np.stack([t.gate for t in traces])
                fin = np.stack([t.final_adv for t in traces])
                loss = tpma_loss(lp, old, gate, fin)
            total = loss
            sft = None
            if rcfg.sft_mix > 0:
                ex = [(p, vocab.sid_tokens(data.item_sid[pv.clicked[int(rng.integers(len(pv.clicked)))]]))
                      for p, pv in zip(prompts, batch)]
                sb = make_batch(ex, vocab, cfg.item_dim)
                sft = ad.softmax_cross_entropy(forward(params, cfg, sb), sb.targets, sb.target_mask)
                total = total + sft * rcfg.sft_mix
            if not np.isfinite(total.data):
                raise NonFiniteError("RL loss is not finite")
            tape.backward(total)
        opt.step(params)
        row = {"step": step, "algo": rcfg.algo, "loss": float(loss.data),
               "sft": float(sft.data) if sft is not None else 0.0,
               "mean_reward": float(item_r.mean()), "valid_rate": float(ro.valid.mean())}
        if traces:
            row["gate_mean"] = np.mean([t.gate for t in traces], axis=(0, 1)).round(6).tolist()
        rows.append(row)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if trace_path is not None and traces:
            with open(trace_path, "a") as fh:
                for b, t in enumerate(traces):
                    fh.write(json.dumps({"step": step, "group": b, "sids": ro.sids[b].tolist(),
                                         "item_reward": item_r[b].tolist(), **t.to_json()}, sort_keys=True) + "\n")
    return rows


def mean_top1_reward(params: Params, cfg: ModelConfig, data, rwcfg: RewardConfig, pvs, beam: int = 8) -> float:
    """Mean composite reward of the top-1 constrained beam result over ``pvs``."""
    res = beam_search(params, cfg, data.vocab, [data.prompt(pv) for pv in pvs], data.trie, beam)
    total = 0.0
    for pv, r in zip(pvs, res):
        ctx = RewardContext(pv.user, pv.query, data.truth(pv, "click"), data.truth(pv, "order"))
        total += group_rewards([r[0][0]], ctx, data.world, data.trie, rwcfg)[0].r_item
    return total / max(len(pvs), 1)
