"""Decoder-only forward pass with per-sublayer skipping and tree attention.

Every new position attends to the committed prefix plus its own ancestor
chain, never to uncommitted siblings. All matrix products are evaluated one
row at a time (stacked vector-matrix products) and every reduction runs along
a contiguous last axis, so a row's result depends only on that row's inputs.
That is what makes a tree-masked forward bit-identical to the sequential
forward over the same root-to-node path, and a rolled-back cache bit-identical
to one rebuilt from scratch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadRequest,
    CacheOverflow,
    CommitError,
    DanglingAncestor,
    MaskLengthMismatch,
    NonFiniteInput,
    StaleMark,
)
from .model_io import ArchConfig, ModelBundle

ROOT = -1
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class LayerMask:
    """Skip vector over the L sublayers; 1 means bypass while drafting."""

    bits: tuple[int, ...]
    skip_ratio: float = 0.0

    @classmethod
    def zeros(cls, n_sublayers: int) -> LayerMask:
        return cls((0,) * n_sublayers, 0.0)

    @classmethod
    def from_indices(cls, n_sublayers: int, indices, skip_ratio: float = 0.0) -> LayerMask:
        bits = [0] * n_sublayers
        for i in indices:
            if not 0 <= i < n_sublayers:
                raise MaskLengthMismatch(f"sublayer {i} outside [0, {n_sublayers})")
            bits[i] = 1
        return cls(tuple(bits), skip_ratio)

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def skipped(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    @property
    def popcount(self) -> int:
        return sum(self.bits)

    @property
    def is_zero(self) -> bool:
        return not any(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=bool)

    def key(self) -> str:
        return "".join(str(b) for b in self.bits)


@dataclass(frozen=True)
class AttentionMaskSpec:
    """How the new positions of one forward call attend to each other.

    ``parents[i]`` is the index (within the same call) of position i's parent,
    or -1 when the parent is the existing context: the tip of the pending
    chain if there is one, otherwise the committed prefix.
    """

    mode: str = "causal"
    parents: tuple[int, ...] | None = None

    @classmethod
    def causal(cls) -> AttentionMaskSpec:
        return cls("causal")

    @classmethod
    def tree(cls, parents) -> AttentionMaskSpec:
        return cls("tree", tuple(int(p) for p in parents))

    def parent_table(self, n: int) -> list[int]:
        if self.mode == "causal":
            return list(range(-1, n - 1))
        if self.mode != "tree" or self.parents is None:
            raise DanglingAncestor(f"unknown attention mode {self.mode!r}")
        if len(self.parents) != n:
            raise DanglingAncestor(f"ancestor table has {len(self.parents)} entries for {n} positions")
        return list(self.parents)

    def visibility(self, n: int) -> np.ndarray:
        """Boolean [n, n] matrix: entry (i, j) is True iff i may attend to j."""
        parents = self.parent_table(n)
        vis = np.zeros((n, n), dtype=bool)
        for i in range(n):
            j = i
            while j != ROOT:
                vis[i, j] = True
                j = parents[j]
        return vis


CAUSAL = AttentionMaskSpec.causal()


@dataclass(frozen=True)
class CacheMark:
    cache_id: int
    mark_id: int
    committed_len: int
    length: int


_cache_ids = itertools.count()
_mark_ids = itertools.count()


class KVCache:
    """Key/value history for every attention sublayer.

    Slots ``[0, committed_len)`` hold accepted tokens and are never mutated.
    Slots ``[committed_len, length)`` are pending: draft or verification
    positions linked by ``parent`` into chains rooted at the committed prefix.
    ``filled[b, s]`` records whether attention sublayer ``b`` wrote slot ``s``
    (a skipped sublayer writes nothing).
    """

    def __init__(self, config: ArchConfig, capacity: int | None = None):
        cap = config.max_seq if capacity is None else min(capacity, config.max_seq)
        self.config = config
        self.capacity = cap
        shape = (config.n_blocks, cap, config.n_heads, config.head_dim)
        self.keys = np.zeros(shape, dtype=np.float32)
        self.values = np.zeros(shape, dtype=np.float32)
        self.filled = np.zeros((config.n_blocks, cap), dtype=bool)
        self.parent = np.full(cap, ROOT, dtype=np.int64)
        self.pos = np.zeros(cap, dtype=np.int64)
        self.committed_len = 0
        self.length = 0
        self.id = next(_cache_ids)
        self._marks: list[CacheMark] = []

    @classmethod
    def for_bundle(cls, bundle: ModelBundle, capacity: int | None = None) -> KVCache:
        return cls(bundle.config, capacity)

    @property
    def n_pending(self) -> int:
        return self.length - self.committed_len

    def _clear(self, start: int, stop: int) -> None:
        if stop <= start:
            return
        self.keys[:, start:stop] = 0.0
        self.values[:, start:stop] = 0.0
        self.filled[:, start:stop] = False
        self.parent[start:stop] = ROOT
        self.pos[start:stop] = 0

    def checkpoint(self) -> CacheMark:
        mark = CacheMark(self.id, next(_mark_ids), self.committed_len, self.length)
        self._marks.append(mark)
        return mark

    def rollback(self, mark: CacheMark) -> None:
        if mark.cache_id != self.id or mark not in self._marks:
            raise StaleMark("mark was not taken on this cache or has been invalidated")
        idx = self._marks.index(mark)
        del self._marks[idx + 1 :]
        self._clear(mark.length, self.length)
        self.length = mark.length

    def commit_path(self, slots) -> None:
        """Promote a pending root-to-node chain into the committed prefix.

        The chain's K/V rows were computed with exactly the ancestors and
        rotary positions a sequential forward would have used, so copying them
        into consecutive committed slots reproduces the sequential cache.
        """
        slots = [int(s) for s in slots]
        c = self.committed_len
        prev = ROOT
        for s in slots:
            if not c <= s < self.length or self.parent[s] != prev:
                raise CommitError(f"slot {s} does not continue the chain from the committed prefix")
            if not self.filled[:, s].all():
                raise CommitError(f"slot {s} was written by a layer-skipped pass")
            prev = s
        for i, s in enumerate(slots):
            dst = c + i
            if dst != s:
                self.keys[:, dst] = self.keys[:, s]
                self.values[:, dst] = self.values[:, s]
            self.filled[:, dst] = True
            self.parent[dst] = ROOT
            self.pos[dst] = dst
        new_len = c + len(slots)
        self._clear(new_len, self.length)
        self.committed_len = self.length = new_len
        self._marks.clear()

    def pending_chain(self, slot: int) -> list[int]:
        """Pending ancestors of ``slot`` (excluding itself), root first."""
        chain = []
        s = int(self.parent[slot])
        while s != ROOT:
            chain.append(s)
            s = int(self.parent[s])
        chain.reverse()
        return chain

    def same_state(self, other: KVCache) -> bool:
        """Bitwise equality of the full cache state."""
        return (
            self.committed_len == other.committed_len
            and self.length == other.length
            and self.capacity == other.capacity
            and np.array_equal(self.filled, other.filled)
            and self.keys.tobytes() == other.keys.tobytes()
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.parent, other.parent)
            and np.array_equal(self.pos, other.pos)
        )


def checkpoint(cache: KVCache) -> CacheMark:
    return cache.checkpoint()


def rollback(cache: KVCache, mark: CacheMark) -> None:
    cache.rollback(mark)


def softmax_row(logits, temperature: float = 1.0) -> np.ndarray:
    """Probability vector (float64) of ``logits / temperature``."""
    x = np.asarray(logits, dtype=np.float64)
    if not temperature > 0:
        raise BadRequest("temperature must be positive")
    if not np.isfinite(x).all():
        raise NonFiniteInput("logits contain non-finite values")
    x = x / temperature
    e = np.exp(x - x.max())
    return e / e.sum()


# ---- numerics -------------------------------------------------------------


def _linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # one vector-matrix product per row keeps rows independent of batch size
    return np.matmul(x[:, None, :], w)[:, 0, :]


def _rmsnorm(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x * (np.float32(1.0) / np.sqrt(ms + np.float32(eps))) * w


def _silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return x / (np.float32(1.0) + np.exp(-x))


def _rope_tables(pos: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    angle = pos[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(angle).astype(np.float32), np.sin(angle).astype(np.float32)


def _rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: [n, heads, head_dim]; cos/sin: [n, head_dim/2]
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[:, None, :], sin[:, None, :]
    return np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=-1)


def _rowsum(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).sum(axis=-1)


def _attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray, scale: np.float32) -> np.ndarray:
    """q: [g, H, hd]; keys/values: [g, m, H, hd] -> [g, H, hd]."""
    scores = _rowsum(q[:, None, :, :] * keys) * scale  # [g, m, H]
    scores = np.ascontiguousarray(scores.transpose(0, 2, 1))  # [g, H, m]
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    p = e / _rowsum(e)[..., None]
    vt = np.ascontiguousarray(values.transpose(0, 2, 3, 1))  # [g, H, hd, m]
    return _rowsum(p[:, :, None, :] * vt)


def _mask_array(mask, n_sublayers: int) -> np.ndarray:
    if mask is None:
        return np.zeros(n_sublayers, dtype=bool)
    bits = mask.bits if isinstance(mask, LayerMask) else mask
    arr = np.asarray(bits, dtype=bool)
    if arr.shape != (n_sublayers,):
        raise MaskLengthMismatch(f"mask has {arr.size} entries, model has {n_sublayers} sublayers")
    return arr


def forward(
    bundle: ModelBundle,
    cache: KVCache,
    tokens,
    mask: LayerMask | None = None,
    attn: AttentionMaskSpec | None = None,
    commit: bool = False,
    prefix_len: int | None = None,
) -> np.ndarray:
    """Logits [len(tokens), vocab] for new positions appended to ``cache``.

    ``prefix_len`` (default: the committed length) truncates the committed
    prefix the new positions may see; used to re-predict already committed
    tokens without touching their cache rows. Requires no pending slots.
    """
    cfg = bundle.config
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    n = tokens.size
    if n == 0:
        raise BadRequest("forward needs at least one token")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise BadRequest("token id outside vocabulary")
    skip = _mask_array(mask, cfg.n_sublayers)
    parents = (attn or CAUSAL).parent_table(n)

    c = cache.committed_len
    base = cache.length
    if prefix_len is None or prefix_len == c:
        prefix = c
        tip = base - 1 if base > c else ROOT
    else:
        if not 0 <= prefix_len < c or base != c:
            raise BadRequest("prefix_len must lie inside the committed prefix with nothing pending")
        prefix = prefix_len
        tip = ROOT
    if base + n > cache.capacity:
        raise CacheOverflow(f"{base + n} positions exceed capacity {cache.capacity}")

    if commit:
        if base != c or prefix != c:
            raise CommitError("cannot commit while pending positions exist")
        if parents != list(range(-1, n - 1)):
            raise CommitError("only a causal chain can be committed")
        if skip.any():
            raise CommitError("only a full (unskipped) pass can be committed")

    slots = np.arange(base, base + n)
    slot_parent = np.empty(n, dtype=np.int64)
    for i, p in enumerate(parents):
        if p == -1:
            slot_parent[i] = tip
        elif 0 <= p < i:
            slot_parent[i] = base + p
        else:
            raise DanglingAncestor(f"position {i} has parent {p}")

    try:
        pos = np.empty(n, dtype=np.int64)
        for i in range(n):
            sp = slot_parent[i]
            pos[i] = prefix if sp == ROOT else cache.pos[sp] + 1
            cache.parent[base + i] = sp
            cache.pos[base + i] = pos[i]
        chains = [cache.pending_chain(base + i) for i in range(n)]
        logits = _run_layers(bundle, cache, tokens, skip, slots, pos, chains, prefix)
    except BaseException:
        cache._clear(base, base + n)
        raise

    cache.length = base + n
    if commit:
        # committed slots carry no parent links
        cache.parent[base : base + n] = ROOT
        cache.committed_len = cache.length
        cache._marks.clear()
    return logits


def _run_layers(bundle, cache, tokens, skip, slots, pos, chains, prefix) -> np.ndarray:
    cfg = bundle.config
    t = bundle.tensors
    n = tokens.size
    H, hd = cfg.n_heads, cfg.head_dim
    eps = cfg.norm_eps
    scale = np.float32(1.0 / np.sqrt(hd))
    cos, sin = _rope_tables(pos, hd)
    committed = np.arange(prefix)

    h = t["embed"][tokens].copy()
    for s in range(cfg.n_sublayers):
        if skip[s]:
            continue
        b = s // 2
        p = f"blocks.{b}."
        if s % 2 == 0:
            x = _rmsnorm(h, t[p + "attn_norm"], eps)
            q = _rope(_linear(x, t[p + "wq"]).reshape(n, H, hd), cos, sin)
            k = _rope(_linear(x, t[p + "wk"]).reshape(n, H, hd), cos, sin)
            v = _linear(x, t[p + "wv"]).reshape(n, H, hd)
            cache.keys[b, slots] = k
            cache.values[b, slots] = v
            cache.filled[b, slots] = True

            groups: dict[int, list[tuple[int, np.ndarray]]] = {}
            filled = cache.filled[b]
            for i in range(n):
                anc = [a for a in chains[i] if filled[a]]
                idx = np.concatenate([committed, np.array(anc + [slots[i]], dtype=np.int64)])
                groups.setdefault(idx.size, []).append((i, idx))
            out = np.empty((n, H, hd), dtype=np.float32)
            for members in groups.values():
                rows = np.array([i for i, _ in members])
                idx = np.stack([ix for _, ix in members])
                out[rows] = _attend(q[rows], cache.keys[b][idx], cache.values[b][idx], scale)
            h = h + _linear(out.reshape(n, H * hd), t[p + "wo"])
        else:
            x = _rmsnorm(h, t[p + "mlp_norm"], eps)
            h = h + _linear(_silu(_linear(x, t[p + "w_up"])), t[p + "w_down"])

    logits = _linear(_rmsnorm(h, t["final_norm"], eps), t["lm_head"])
    if not np.isfinite(logits).all():
        raise NonFiniteInput("forward produced non-finite logits")
    return logits
