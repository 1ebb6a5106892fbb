"""Tiny decoder-only transformer over the unified vocabulary.

Two forward implementations share one parameter dict:

* :func:`forward` builds an autodiff graph (training, teacher passes).
* :class:`InferenceCache` is a plain-numpy path that encodes a prompt batch once
  and then extends it with a few generated tokens per beam; decoding and
  rollout sampling use it. The two are checked against each other in tests.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import generator
from .vocab import Prompt

SCHEMA_VERSION = 1
NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 64
    item_dim: int = 32
    dropout: float = 0.1
    tied: bool = False
    init_std: float = 0.05
    zero_output: bool = False


Params = dict[str, Tensor]


def init_params(cfg: ModelConfig, seed: int) -> Params:
    rng = generator(seed, "init")
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    s = cfg.init_std

    def w(*shape, scale=s):
        return ad.parameter(rng.normal(0.0, scale, size=shape))

    p: Params = {
        "tok_emb": w(V, D),
        "pos_emb": w(cfg.max_len, D),
        "long_proj": w(cfg.item_dim, D),
        "lnf_g": ad.parameter(np.ones(D)),
        "lnf_b": ad.parameter(np.zeros(D)),
    }
    for i in range(cfg.n_layers):
        p[f"h{i}.ln1_g"] = ad.parameter(np.ones(D))
        p[f"h{i}.ln1_b"] = ad.parameter(np.zeros(D))
        p[f"h{i}.w_qkv"] = w(D, 3 * D)
        p[f"h{i}.b_qkv"] = ad.parameter(np.zeros(3 * D))
        p[f"h{i}.w_o"] = w(D, D, scale=s / np.sqrt(2 * cfg.n_layers))
        p[f"h{i}.b_o"] = ad.parameter(np.zeros(D))
        p[f"h{i}.ln2_g"] = ad.parameter(np.ones(D))
        p[f"h{i}.ln2_b"] = ad.parameter(np.zeros(D))
        p[f"h{i}.w_fc"] = w(D, F)
        p[f"h{i}.b_fc"] = ad.parameter(np.zeros(F))
        p[f"h{i}.w_proj"] = w(F, D, scale=s / np.sqrt(2 * cfg.n_layers))
        p[f"h{i}.b_proj"] = ad.parameter(np.zeros(D))
    if not cfg.tied:
        p["w_out"] = ad.parameter(np.zeros((D, V))) if cfg.zero_output else w(D, V)
        p["b_out"] = ad.parameter(np.zeros(V))
    for k, t in p.items():
        t.name = k
    return p


def copy_params(params: Params) -> Params:
    return {k: ad.parameter(v.data.copy(), name=k) for k, v in params.items()}


def zero_grads(params: Params) -> None:
    for t in params.values():
        t.grad = None


# ------------------------------------------------------------------- batches

@dataclass
class Batch:
    tokens: np.ndarray       # (B, T) left padded
    positions: np.ndarray    # (B, T)
    real: np.ndarray         # (B, T) bool
    long_emb: np.ndarray     # (B, item_dim)
    long_slot: np.ndarray    # (B, T) bool
    targets: np.ndarray      # (B, Tt) right aligned
    target_mask: np.ndarray  # (B, Tt) bool
    target_len: np.ndarray   # (B,)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def make_batch(examples: Sequence[tuple[Prompt, Sequence[int]]], vocab, item_dim: int) -> Batch:
    """Left-pad ``prompt + target[:-1]``; the last ``len(target)`` positions predict the target."""
    seqs = [list(p.tokens) + list(t[:-1]) for p, t in examples]
    T = max(len(s) for s in seqs)
    Tt = max(len(t) for _, t in examples)
    B = len(examples)
    tokens = np.full((B, T), vocab.pad, dtype=np.int64)
    real = np.zeros((B, T), dtype=bool)
    targets = np.full((B, Tt), vocab.pad, dtype=np.int64)
    tmask = np.zeros((B, Tt), dtype=bool)
    long_emb = np.zeros((B, item_dim))
    tlen = np.zeros(B, dtype=np.int64)
    for b, ((p, t), s) in enumerate(zip(examples, seqs)):
        tokens[b, T - len(s):] = s
        real[b, T - len(s):] = True
        targets[b, Tt - len(t):] = t
        tmask[b, Tt - len(t):] = True
        tlen[b] = len(t)
        if p.long_emb is not None:
            long_emb[b] = p.long_emb
    positions = np.maximum(np.cumsum(real, axis=1) - 1, 0)
    return Batch(tokens, positions, real, long_emb, tokens == vocab.long, targets, tmask, tlen)


def _attention_bias(real: np.ndarray) -> np.ndarray:
    T = real.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    ok = causal[None, :, :] & real[:, None, :]
    return np.where(ok, 0.0, NEG_INF)[:, None, :, :]


# ------------------------------------------------------------ autodiff path

def forward(params: Params, cfg: ModelConfig, batch: Batch, dropout_seed=None,
            return_hidden: bool = False):
    """Logits ``(B, Tt, V)`` over the target positions.

    ``dropout_seed`` is a tuple of ints; ``None`` disables dropout. With
    ``return_hidden`` the final-layer hidden states ``(B, T, D)`` are returned too.
    """
    if batch.tokens.shape[1] > cfg.max_len:
        raise ValueError(f"sequence length {batch.tokens.shape[1]} exceeds max_len {cfg.max_len}")
    if batch.tokens.min() < 0 or batch.tokens.max() >= cfg.vocab_size:
        raise IndexError("token id out of vocabulary")
    B, T = batch.tokens.shape
    D, H = cfg.d_model, cfg.n_heads
    dh = D // H
    p = cfg.dropout

    def drop(x, site):
        return ad.dropout(x, p, None if dropout_seed is None else (*dropout_seed, site))

    x = ad.embedding(params["tok_emb"], batch.tokens) + ad.embedding(params["pos_emb"], batch.positions)
    if batch.long_slot.any():
        proj = batch.long_emb @ params["long_proj"]  # (B, D)
        x = x + ad.reshape(proj, (B, 1, D)) * batch.long_slot[:, :, None].astype(float)
    x = drop(x, 0)
    bias = _attention_bias(batch.real)
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_layers):
        h = ad.layer_norm(x, params[f"h{i}.ln1_g"], params[f"h{i}.ln1_b"])
        qkv = h @ params[f"h{i}.w_qkv"] + params[f"h{i}.b_qkv"]
        qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(q @ ad.transpose(k, (0, 1, 3, 2)) * scale + bias, axis=-1)
        o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, T, D))
        x = x + drop(o @ params[f"h{i}.w_o"] + params[f"h{i}.b_o"], 2 * i + 1)
        h = ad.layer_norm(x, params[f"h{i}.ln2_g"], params[f"h{i}.ln2_b"])
        m = ad.gelu(h @ params[f"h{i}.w_fc"] + params[f"h{i}.b_fc"]) @ params[f"h{i}.w_proj"]
        x = x + drop(m + params[f"h{i}.b_proj"], 2 * i + 2)
    h = ad.layer_norm(x, params["lnf_g"], params["lnf_b"])
    Tt = batch.targets.shape[1]
    ht = h[:, T - Tt:, :]
    if cfg.tied:
        logits = ht @ ad.transpose(params["tok_emb"], (1, 0))
    else:
        logits = ht @ params["w_out"] + params["b_out"]
    if return_hidden:
        return logits, h
    return logits


# ---------------------------------------------------------- inference path

def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * x * (1.0 + 0.044715 * x * x)))


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


class InferenceCache:
    """Prompt key/value cache for a batch of prompts, extended per beam.

    All shapes keep a leading ``(B, W)`` pair: B prompts, W continuations each.
    """

    def __init__(self, params: Params, cfg: ModelConfig, prompts: Sequence[Prompt], vocab):
        self.P = {k: v.data for k, v in params.items()}
        self.cfg = cfg
        batch = make_batch([(p, [vocab.pad]) for p in prompts], vocab, cfg.item_dim)
        self.batch = batch
        B, T = batch.tokens.shape
        D, H = cfg.d_model, cfg.n_heads
        dh = D // H
        P = self.P
        x = P["tok_emb"][batch.tokens] + P["pos_emb"][batch.positions]
        if batch.long_slot.any():
            x = x + (batch.long_emb @ P["long_proj"])[:, None, :] * batch.long_slot[:, :, None]
        bias = _attention_bias(batch.real)
        self.keys, self.values = [], []
        for i in range(cfg.n_layers):
            h = _ln(x, P[f"h{i}.ln1_g"], P[f"h{i}.ln1_b"])
            qkv = (h @ P[f"h{i}.w_qkv"] + P[f"h{i}.b_qkv"]).reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv
            self.keys.append(k)
            self.values.append(v)
            s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + bias
            s = np.exp(s - s.max(-1, keepdims=True))
            att = s / s.sum(-1, keepdims=True)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
            x = x + o @ P[f"h{i}.w_o"] + P[f"h{i}.b_o"]
            h = _ln(x, P[f"h{i}.ln2_g"], P[f"h{i}.ln2_b"])
            x = x + _gelu(h @ P[f"h{i}.w_fc"] + P[f"h{i}.b_fc"]) @ P[f"h{i}.w_proj"] + P[f"h{i}.b_proj"]
        self.last_hidden = _ln(x[:, -1, :], P["lnf_g"], P["lnf_b"])  # (B, D)
        self.prompt_len = batch.real.sum(1)  # (B,)
        self.key_bias = np.where(batch.real, 0.0, NEG_INF)  # (B, T)

    def _logits(self, h):
        if self.cfg.tied:
            return h @ self.P["tok_emb"].T
        return h @ self.P["w_out"] + self.P["b_out"]

    def next_logprobs(self, generated: np.ndarray) -> np.ndarray:
        """Log-probabilities ``(B, W, V)`` of the next token after ``prompt + generated``.

        ``generated`` has shape ``(B, W, s)``; ``s = 0`` uses the cached prompt state.
        """
        B, W, s = generated.shape
        if s == 0:
            return np.broadcast_to(_log_softmax(self._logits(self.last_hidden))[:, None, :],
                                   (B, W, self.cfg.vocab_size)).copy()
        cfg, P = self.cfg, self.P
        D, H = cfg.d_model, cfg.n_heads
        dh = D // H
        pos = self.prompt_len[:, None, None] + np.arange(s)[None, None, :]
        x = P["tok_emb"][generated] + P["pos_emb"][np.broadcast_to(pos, (B, W, s))]
        causal = np.where(np.tril(np.ones((s, s), dtype=bool)), 0.0, NEG_INF)
        for i in range(cfg.n_layers):
            h = _ln(x, P[f"h{i}.ln1_g"], P[f"h{i}.ln1_b"])
            qkv = (h @ P[f"h{i}.w_qkv"] + P[f"h{i}.b_qkv"]).reshape(B, W, s, 3, H, dh).transpose(3, 0, 1, 4, 2, 5)
            q, k, v = qkv  # (B, W, H, s, dh)
            # prompt keys are shared by all W continuations: fold W into the query axis
            qf = q.transpose(0, 2, 1, 3, 4).reshape(B, H, W * s, dh)
            sp = (qf @ np.swapaxes(self.keys[i], -1, -2)) / np.sqrt(dh) + self.key_bias[:, None, None, :]
            sp = sp.reshape(B, H, W, s, -1).transpose(0, 2, 1, 3, 4)
            sg = q @ np.swapaxes(k, -1, -2) / np.sqrt(dh) + causal
            m = np.maximum(sp.max(-1, keepdims=True), sg.max(-1, keepdims=True))
            ep, eg = np.exp(sp - m), np.exp(sg - m)
            z = ep.sum(-1, keepdims=True) + eg.sum(-1, keepdims=True)
            epf = ep.transpose(0, 2, 1, 3, 4).reshape(B, H, W * s, -1)
            op = (epf @ self.values[i]).reshape(B, H, W, s, dh).transpose(0, 2, 1, 3, 4)
            o = (op + eg @ v) / z  # (B, W, H, s, dh)
            o = o.transpose(0, 1, 3, 2, 4).reshape(B, W, s, D)
            x = x + o @ P[f"h{i}.w_o"] + P[f"h{i}.b_o"]
            h = _ln(x, P[f"h{i}.ln2_g"], P[f"h{i}.ln2_b"])
            x = x + _gelu(h @ P[f"h{i}.w_fc"] + P[f"h{i}.b_fc"]) @ P[f"h{i}.w_proj"] + P[f"h{i}.b_proj"]
        hl = _ln(x[:, :, -1, :], P["lnf_g"], P["lnf_b"])
        return _log_softmax(self._logits(hl))


    # incremental decoding: one new token per continuation per call

    def start(self, W: int) -> np.ndarray:
        """Reset the generated-segment state for W continuations; returns first-step log-probs."""
        self.W = W
        self.step = 0
        self.gen_k = [None] * self.cfg.n_layers
        self.gen_v = [None] * self.cfg.n_layers
        return self.next_logprobs(np.zeros((len(self.prompt_len), W, 0), dtype=np.int64))

    def advance(self, parents: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Continuation w of prompt b becomes ``parents[b, w]``'s history plus ``tokens[b, w]``."""
        cfg, P = self.cfg, self.P
        B, W = tokens.shape
        D, H = cfg.d_model, cfg.n_heads
        dh = D // H
        if self.step > 0:
            idx = parents[:, :, None, None, None]
            for i in range(cfg.n_layers):
                self.gen_k[i] = np.take_along_axis(self.gen_k[i], idx, axis=1)
                self.gen_v[i] = np.take_along_axis(self.gen_v[i], idx, axis=1)
        pos = np.broadcast_to((self.prompt_len + self.step)[:, None], (B, W))
        x = P["tok_emb"][tokens] + P["pos_emb"][pos]  # (B, W, D)
        for i in range(cfg.n_layers):
            h = _ln(x, P[f"h{i}.ln1_g"], P[f"h{i}.ln1_b"])
            q, k, v = (h @ P[f"h{i}.w_qkv"] + P[f"h{i}.b_qkv"]).reshape(B, W, 3, H, dh).transpose(2, 0, 1, 3, 4)
            k, v = k[:, :, :, None, :], v[:, :, :, None, :]  # (B, W, H, 1, dh)
            if self.step == 0:
                self.gen_k[i], self.gen_v[i] = k, v
            else:
                self.gen_k[i] = np.concatenate([self.gen_k[i], k], axis=3)
                self.gen_v[i] = np.concatenate([self.gen_v[i], v], axis=3)
            qh = q.transpose(0, 2, 1, 3)  # (B, H, W, dh)
            sp = (qh @ np.swapaxes(self.keys[i], -1, -2)) / np.sqrt(dh) + self.key_bias[:, None, None, :]
            sg = np.einsum("bwhd,bwhsd->bhws", q, self.gen_k[i]) / np.sqrt(dh)
            m = np.maximum(sp.max(-1, keepdims=True), sg.max(-1, keepdims=True))
            ep, eg = np.exp(sp - m), np.exp(sg - m)
            z = ep.sum(-1, keepdims=True) + eg.sum(-1, keepdims=True)
            o = (ep @ self.values[i] + np.einsum("bhws,bwhsd->bhwd", eg, self.gen_v[i])) / z
            o = o.transpose(0, 2, 1, 3).reshape(B, W, D)
            x = x + o @ P[f"h{i}.w_o"] + P[f"h{i}.b_o"]
            h = _ln(x, P[f"h{i}.ln2_g"], P[f"h{i}.ln2_b"])
            x = x + _gelu(h @ P[f"h{i}.w_fc"] + P[f"h{i}.b_fc"]) @ P[f"h{i}.w_proj"] + P[f"h{i}.b_proj"]
        self.step += 1
        return _log_softmax(self._logits(_ln(x, P["lnf_g"], P["lnf_b"])))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, params: Params, cfg: ModelConfig, meta: dict | None = None) -> None:
    doc = {
        "schema": "sidsearch.checkpoint",
        "version": SCHEMA_VERSION,
        "config": asdict(cfg),
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in sorted(params.items())},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[Params, ModelConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema version {doc.get('version')}")
    cfg = ModelConfig(**doc["config"])
    params = {k: ad.parameter(np.array(v["data"], dtype=np.float64).reshape(v["shape"]), name=k)
              for k, v in doc["params"].items()}
    return params, cfg, doc["meta"]
