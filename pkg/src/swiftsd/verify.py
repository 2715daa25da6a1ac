"""Parallel verification of draft trees by the full target model.

Random draw order per verification call (sampling mode), for bit-exact
replay: two uniforms per spine position (acceptance, residual), consumed
whether or not they are needed, then one uniform for the bonus token if
every spine token was accepted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .draft import DraftTree, linearize
from .errors import DegenerateResidual, InvalidDistribution
from .model_io import ModelBundle
from .sampling import check_distribution, filter_top_p, sample_index
from .transformer import AttentionMaskSpec, KVCache, forward, softmax_row


@dataclass
class VerifyOutcome:
    accepted_tokens: list[int]
    accepted_draft_count: int
    draft_spine_len: int
    tree_size: int = 0

    def __post_init__(self):
        assert len(self.accepted_tokens) == self.accepted_draft_count + 1
        assert self.accepted_draft_count <= self.draft_spine_len


def target_distribution(logits, temperature: float, top_p: float) -> np.ndarray:
    return filter_top_p(softmax_row(logits, temperature), top_p)


def residual_distribution(target_dist, draft_dist) -> np.ndarray:
    res = np.maximum(0.0, np.asarray(target_dist, np.float64) - np.asarray(draft_dist, np.float64))
    total = res.sum()
    if total <= 0.0:
        raise DegenerateResidual("target equals draft; rejection is impossible")
    return res / total


def spec_sample_accept(target_dist, draft_dist, draft_token: int, u: float, u_residual: float):
    """Speculative-sampling decision for one drafted token.

    Accept iff ``u < min(1, target/draft)`` at the drafted token; otherwise
    draw from the normalized positive part of ``target - draft`` using
    ``u_residual``. Returns ``(accepted, token, residual_used)``.
    """
    p = check_distribution(target_dist)
    q = check_distribution(draft_dist)
    if p.shape != q.shape:
        raise InvalidDistribution("target and draft vocabularies differ")
    if not q[draft_token] > 0:
        raise InvalidDistribution("drafted token has zero draft probability")
    if u < min(1.0, p[draft_token] / q[draft_token]):
        return True, int(draft_token), False
    return False, sample_index(residual_distribution(p, q), u_residual), True


def verify_greedy(bundle: ModelBundle, cache: KVCache, tree: DraftTree, context) -> VerifyOutcome:
    """Verify the whole candidate tree in one target forward, argmax acceptance."""
    lin, spec, spine_at = linearize(tree)
    block = [int(context[-1])] + lin
    parents = [-1] + [p + 1 if p >= 0 else 0 for p in spec.parents]
    base = cache.length
    mark = cache.checkpoint()
    try:
        logits = forward(bundle, cache, block, None, AttentionMaskSpec.tree(parents))
        accepted: list[int] = []
        path = [0]
        row = 0
        for j, step in enumerate(tree.steps):
            t = int(np.argmax(logits[row]))
            # block row = linear index + 1 (row 0 is the context root)
            if t == step.token:
                row = spine_at[j] + 1
            elif t in step.siblings:
                lo = spine_at[j] + 1
                row = lo + 1 + lin[lo : lo + len(step.siblings) - 1].index(t)
            else:
                break
            accepted.append(t)
            path.append(row)
            if t != step.token:
                break
        bonus = int(np.argmax(logits[row]))
        cache.commit_path([base + r for r in path])
    except BaseException:
        if cache.length > base and cache.committed_len == mark.committed_len:
            cache.rollback(mark)
        raise
    return VerifyOutcome(accepted + [bonus], len(accepted), len(tree), len(lin))


def verify_sampling(
    bundle: ModelBundle,
    cache: KVCache,
    tree: DraftTree,
    context,
    temperature: float,
    rng: np.random.Generator,
    top_p: float = 1.0,
) -> VerifyOutcome:
    """Chain speculative sampling along the spine (siblings are ignored)."""
    spine = tree.spine
    base = cache.length
    mark = cache.checkpoint()
    try:
        logits = forward(bundle, cache, [int(context[-1])] + spine, None, AttentionMaskSpec.causal())
        accepted: list[int] = []
        final = None
        for j, step in enumerate(tree.steps):
            p = target_distribution(logits[j], temperature, top_p)
            u, u_res = rng.random(), rng.random()
            ok, tok, _ = spec_sample_accept(p, step.draft_dist, step.token, u, u_res)
            if not ok:
                final = tok
                break
            accepted.append(tok)
        if final is None:
            p = target_distribution(logits[len(spine)], temperature, top_p)
            final = sample_index(p, rng.random())
        cache.commit_path([base + r for r in range(len(accepted) + 1)])
    except BaseException:
        if cache.length > base and cache.committed_len == mark.committed_len:
            cache.rollback(mark)
        raise
    return VerifyOutcome(accepted + [final], len(accepted), len(spine), len(spine))


def target_step(
    bundle: ModelBundle,
    cache: KVCache,
    context,
    *,
    sample: bool = False,
    temperature: float = 1.0,
    top_p: float = 1.0,
    rng: np.random.Generator | None = None,
) -> int:
    """One plain decoding step: commit the last context token, pick the next."""
    logits = forward(bundle, cache, [int(context[-1])], commit=True)[0]
    if not sample:
        return int(np.argmax(logits))
    return sample_index(target_distribution(logits, temperature, top_p), rng.random())
