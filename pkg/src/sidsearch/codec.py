"""Residual-quantisation codebooks, semantic-ID encoding and the SID trie."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import generator

SCHEMA_VERSION = 1

Sid = tuple[int, ...]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodebookSet:
    levels: tuple[np.ndarray, ...]

    @property
    def L(self) -> int:
        return len(self.levels)

    @property
    def K(self) -> int:
        return self.levels[0].shape[0]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    def encode(self, x: np.ndarray) -> Sid:
        return tuple(int(c) for c in self.encode_batch(np.asarray(x)[None, :])[0])

    def encode_batch(self, X: np.ndarray) -> np.ndarray:
        """Greedy nearest centroid per level on successive residuals."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError(f"expected (n, {self.dim}) embeddings, got {X.shape}")
        residual = X.copy()
        codes = np.empty((X.shape[0], self.L), dtype=np.int64)
        for l, C in enumerate(self.levels):
            idx = _nearest(residual, C)
            codes[:, l] = idx
            residual = residual - C[idx]
        return codes

    def decode(self, sid: Sequence[int]) -> np.ndarray:
        return sum(self.levels[l][c] for l, c in enumerate(sid))

    def residual_norms(self, x: np.ndarray) -> np.ndarray:
        """Norm of the residual after 0..L levels of greedy encoding."""
        r = np.asarray(x, dtype=np.float64).copy()
        norms = [np.linalg.norm(r)]
        for C in self.levels:
            r = r - C[_nearest(r[None, :], C)[0]]
            norms.append(np.linalg.norm(r))
        return np.array(norms)

    def reconstruction_error(self, X: np.ndarray) -> float:
        codes = self.encode_batch(X)
        recon = sum(self.levels[l][codes[:, l]] for l in range(self.L))
        return float(np.mean(np.sum((X - recon) ** 2, axis=1)))


def _sqdist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _nearest(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # argmin returns the first (lowest) index on ties
    return np.argmin(_sqdist(X, C), axis=1)


def kmeans(X: np.ndarray, K: int, iters: int, seed) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded with the point farthest from its current
    centroid (lowest index on ties), so the result never contains NaN rows.
    """
    n = X.shape[0]
    if n < K:
        raise ConfigError(f"need at least K={K} points, got {n}")
    rng = generator(seed, "kmeans", K)
    C = np.empty((K, X.shape[1]))
    C[0] = X[rng.integers(n)]
    d2 = _sqdist(X, C[:1])[:, 0]
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            j = int(rng.integers(n))
        else:
            j = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            j = min(j, n - 1)
        C[k] = X[j]
        d2 = np.minimum(d2, _sqdist(X, C[k:k + 1])[:, 0])
    for _ in range(iters):
        D = _sqdist(X, C)
        assign = np.argmin(D, axis=1)
        counts = np.bincount(assign, minlength=K)
        newC = np.zeros_like(C)
        np.add.at(newC, assign, X)
        nonempty = counts > 0
        newC[nonempty] /= counts[nonempty, None]
        point_err = D[np.arange(n), assign]
        taken: set[int] = set()
        for k in np.flatnonzero(~nonempty):
            order = np.argsort(-point_err, kind="stable")
            j = next(int(i) for i in order if int(i) not in taken)
            taken.add(j)
            newC[k] = X[j]
            point_err[j] = 0.0
        if np.array_equal(newC, C):
            break
        C = newC
    return C


def fit_codebooks(embeddings: np.ndarray, L: int, K: int, iters: int = 25, seed: int = 0) -> CodebookSet:
    """Level 0 clusters the embeddings; level l clusters the residuals left by levels < l."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ConfigError("embeddings must be a non-empty (items, d) matrix")
    if L < 1:
        raise ConfigError("L must be >= 1")
    if X.shape[0] < K:
        raise ConfigError(f"items ({X.shape[0]}) < K ({K})")
    residual = X.copy()
    levels = []
    for l in range(L):
        C = kmeans(residual, K, iters, (seed, l))
        levels.append(C)
        residual = residual - C[_nearest(residual, C)]
    return CodebookSet(tuple(levels))


# ---------------------------------------------------------------------- trie

@dataclass
class SidTrie:
    L: int
    root: dict = field(default_factory=dict)
    leaves: dict[Sid, list[int]] = field(default_factory=dict)
    _children_cache: dict[Sid, np.ndarray] = field(default_factory=dict, repr=False)

    def children(self, prefix: Sequence[int]) -> np.ndarray:
        """Sorted next codes below ``prefix`` (empty array if none)."""
        key = tuple(prefix)
        hit = self._children_cache.get(key)
        if hit is not None:
            return hit
        node = self.root
        for c in key:
            node = node.get(c)
            if node is None:
                break
        out = np.array(sorted(node), dtype=np.int64) if node else np.zeros(0, dtype=np.int64)
        self._children_cache[key] = out
        return out

    def __contains__(self, sid) -> bool:
        return tuple(int(c) for c in sid) in self.leaves

    def __len__(self) -> int:
        return len(self.leaves)

    def items(self, sid: Sequence[int]) -> list[int]:
        return self.leaves.get(tuple(int(c) for c in sid), [])

    def sids(self) -> list[Sid]:
        return sorted(self.leaves)

    @property
    def collisions(self) -> int:
        """Items beyond the first at each leaf."""
        return sum(len(v) - 1 for v in self.leaves.values())


def build_trie(catalog: Iterable[tuple[int, Sequence[int]]], L: int | None = None) -> SidTrie:
    catalog = list(catalog)
    if L is None:
        L = len(catalog[0][1]) if catalog else 0
    trie = SidTrie(L)
    for item_id, sid in catalog:
        sid = tuple(int(c) for c in sid)
        if len(sid) != L:
            raise ValueError(f"SID {sid} has length {len(sid)}, expected {L}")
        node = trie.root
        for c in sid:
            node = node.setdefault(c, {})
        trie.leaves.setdefault(sid, []).append(int(item_id))
    for ids in trie.leaves.values():
        ids.sort()
    return trie


def usage_metrics(cb: CodebookSet, sids: Sequence[Sequence[int]]) -> tuple[float, float]:
    """(codebook usage rate, collision-free rate).

    CUR = sum over levels of distinct codes used, divided by L*K.
    ICR = distinct SIDs / items, so 1.0 means no collisions and a catalog of N
    identical SIDs scores 1/N.
    """
    arr = np.asarray(sids, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("empty catalog")
    used = sum(len(np.unique(arr[:, l])) for l in range(cb.L))
    cur = used / (cb.L * cb.K)
    icr = len({tuple(r) for r in arr.tolist()}) / arr.shape[0]
    return cur, icr


# --------------------------------------------------------------- persistence

def save_codebooks(path: str | Path, cb: CodebookSet, catalog: Sequence[tuple[int, Sequence[int]]]) -> None:
    doc = {
        "schema": "sidsearch.codebooks",
        "version": SCHEMA_VERSION,
        "L": cb.L,
        "K": cb.K,
        "dim": cb.dim,
        "levels": [C.tolist() for C in cb.levels],
        "catalog": [[int(i), [int(c) for c in sid]] for i, sid in catalog],
    }
    Path(path).write_text(json.dumps(doc))


def load_codebooks(path: str | Path) -> tuple[CodebookSet, list[tuple[int, Sid]]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported codebook schema version {doc.get('version')}")
    cb = CodebookSet(tuple(np.array(C, dtype=np.float64) for C in doc["levels"]))
    catalog = [(int(i), tuple(sid)) for i, sid in doc["catalog"]]
    return cb, catalog
