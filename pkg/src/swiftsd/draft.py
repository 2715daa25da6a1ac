"""Confidence-aware drafting with the layer-skipped model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadRequest, EmptyTree, OutOfRange
from .model_io import ModelBundle
from .sampling import filter_top_p, sample_index
from .transformer import AttentionMaskSpec, KVCache, LayerMask, forward, softmax_row

# (upper bound of the confidence bucket, candidates kept); buckets are left-open
K_BUCKETS = ((0.5, 10), (0.8, 5), (0.95, 3), (1.0, 1))


def k_for_confidence(p: float, vocab_size: int | None = None) -> int:
    if not 0.0 < p <= 1.0:
        raise OutOfRange(f"confidence {p} outside (0, 1]")
    for upper, k in K_BUCKETS:
        if p <= upper:
            break
    return k if vocab_size is None else min(k, vocab_size)


@dataclass
class DraftStep:
    token: int
    confidence: float
    siblings: tuple[int, ...]
    draft_dist: np.ndarray = field(repr=False)


@dataclass
class DraftTree:
    steps: list[DraftStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def spine(self) -> list[int]:
        return [s.token for s in self.steps]

    @property
    def linear_length(self) -> int:
        return sum(len(s.siblings) for s in self.steps)


def top_candidates(probs: np.ndarray, k: int) -> tuple[int, ...]:
    # stable sort: equal probabilities keep ascending token order, so the
    # first candidate is always the argmax
    order = np.argsort(-probs, kind="stable")
    return tuple(int(i) for i in order[:k])


def draft(
    bundle: ModelBundle,
    cache: KVCache,
    mask: LayerMask,
    context,
    epsilon: float = 0.3,
    n_max: int = 25,
    *,
    sample: bool = False,
    temperature: float = 1.0,
    top_p: float = 1.0,
    rng: np.random.Generator | None = None,
) -> DraftTree:
    """Draft up to ``n_max`` tokens after ``context`` with the skipped model.

    ``context`` is the full token history; everything but its last token must
    already be committed in ``cache``. A step is always recorded before the
    confidence check, so a low-confidence token still enters the tree. The
    cache is left exactly as it was found.

    With ``sample=True`` the spine token is drawn from the temperature/top-p
    draft distribution (speculative sampling needs draft tokens distributed
    as the draft distribution); confidence still uses the plain softmax.
    """
    if not 0.0 <= epsilon < 1.0:
        raise BadRequest("epsilon must lie in [0, 1)")
    if n_max < 1:
        raise BadRequest("n_max must be >= 1")
    if len(context) != cache.committed_len + 1 or cache.n_pending:
        raise BadRequest("cache must hold every context token but the last")
    if sample and rng is None:
        raise BadRequest("sampling-mode drafting needs an rng")

    vocab = bundle.config.vocab_size
    tree = DraftTree()
    mark = cache.checkpoint()
    try:
        tok = int(context[-1])
        for _ in range(n_max):
            logits = forward(bundle, cache, [tok], mask, AttentionMaskSpec.causal())[0]
            probs = softmax_row(logits)
            top = int(np.argmax(probs))
            conf = float(probs[top])
            siblings = top_candidates(probs, k_for_confidence(conf, vocab))
            if sample:
                dist = filter_top_p(softmax_row(logits, temperature), top_p)
                tok = sample_index(dist, rng.random())
            else:
                dist = probs
                tok = top
            tree.steps.append(DraftStep(tok, conf, siblings, dist))
            if conf < epsilon:
                break
    finally:
        cache.rollback(mark)
    return tree


def linearize(tree: DraftTree) -> tuple[list[int], AttentionMaskSpec, list[int]]:
    """Flatten the caterpillar tree for one parallel verification pass.

    Per depth the spine token comes first, then its non-top-1 siblings. Every
    depth-j node hangs off the depth-(j-1) spine node (depth 1 hangs off the
    existing context). Returns tokens, the ancestor table, and the linear
    index of each depth's spine node.
    """
    if not tree.steps:
        raise EmptyTree("nothing to linearize")
    tokens: list[int] = []
    parents: list[int] = []
    spine_at: list[int] = []
    parent = -1
    for step in tree.steps:
        spine_at.append(len(tokens))
        tokens.append(step.token)
        parents.append(parent)
        for sib in step.siblings:
            if sib != step.token:
                tokens.append(sib)
                parents.append(parent)
        parent = spine_at[-1]
    return tokens, AttentionMaskSpec.tree(parents), spine_at
