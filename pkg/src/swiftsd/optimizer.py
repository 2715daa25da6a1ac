"""On-the-fly search for the skipped-sublayer set.

Each optimization step proposes one candidate mask (random search, with a
Bayesian suggestion every ``bayes_interval`` steps), scores it by how many of
the recent committed tokens the skipped model re-predicts (one parallel
forward), and keeps the best mask seen so far for drafting.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize

from .errors import InsufficientContext, RatioTooLarge
from .gp import GPSurrogate
from .model_io import ModelBundle
from .transformer import AttentionMaskSpec, KVCache, LayerMask, forward


class Phase(str, Enum):
    CONTEXT = "context_accumulation"
    OPTIMIZING = "optimizing"
    ACCELERATING = "accelerating"


def n_skipped(n_sublayers: int, skip_ratio: float) -> int:
    # round half up; the epsilon absorbs float noise such as 0.45 * 40
    return int(math.floor(skip_ratio * n_sublayers + 0.5 + 1e-9))


def _interior(n_sublayers: int) -> list[int]:
    return list(range(1, n_sublayers - 1))


def init_uniform_mask(n_sublayers: int, skip_ratio: float) -> LayerMask:
    """Evenly spaced skips over the interior sublayers, pattern centered."""
    if not 0.0 < skip_ratio < 1.0:
        raise RatioTooLarge(f"skip ratio {skip_ratio} outside (0, 1)")
    n = n_skipped(n_sublayers, skip_ratio)
    inner = n_sublayers - 2
    if n < 1 or n > inner:
        raise RatioTooLarge(f"cannot skip {n} of {n_sublayers} sublayers while keeping both ends")
    stride = inner / n
    idx = [1 + int(math.floor((k + 0.5) * stride)) for k in range(n)]
    return LayerMask.from_indices(n_sublayers, idx, skip_ratio)


def use_bayesian(step: int, bayes_interval: int) -> bool:
    return step % bayes_interval == 0


@dataclass
class ContextBuffer:
    """Committed history plus how many of its tokens this instance generated."""

    history: list[int]
    gamma: int = 32
    n_generated: int = 0

    @property
    def tokens(self) -> list[int]:
        return list(self.history[-self.gamma :])

    @property
    def ready(self) -> bool:
        return self.n_generated >= self.gamma and len(self.history) > self.gamma


@dataclass
class OptimizerState:
    n_sublayers: int
    skip_ratio: float = 0.45
    max_steps: int = 1000
    bayes_interval: int = 25
    patience: int = 300
    score_target: float = 0.95
    alpha_tolerance: float = 0.7
    phase: Phase = Phase.CONTEXT
    step: int = 0
    steps_since_improve: int = 0
    best_mask: LayerMask | None = None
    best_score: float = 0.0
    surrogate: GPSurrogate = field(default_factory=GPSurrogate)
    last_branch: str | None = None
    last_score: float | None = None
    last_mask: LayerMask | None = None
    termination_reason: str | None = None

    def __post_init__(self):
        if self.best_mask is None:
            self.best_mask = init_uniform_mask(self.n_sublayers, self.skip_ratio)

    @classmethod
    def from_config(cls, n_sublayers: int, config) -> OptimizerState:
        return cls(
            n_sublayers=n_sublayers,
            skip_ratio=config.skip_ratio,
            max_steps=config.max_opt_steps,
            bayes_interval=config.bayes_interval,
            patience=config.patience,
            score_target=config.score_target,
            alpha_tolerance=config.alpha_tolerance,
        )

    @property
    def n_skip(self) -> int:
        return n_skipped(self.n_sublayers, self.skip_ratio)

    def restart(self, skip_ratio: float) -> None:
        """Fresh search at a new ratio: uniform mask, empty surrogate."""
        self.best_mask = init_uniform_mask(self.n_sublayers, skip_ratio)
        self.skip_ratio = skip_ratio
        self.phase = Phase.OPTIMIZING
        self.step = 0
        self.steps_since_improve = 0
        self.best_score = 0.0
        self.surrogate = GPSurrogate(self.surrogate.length_scale, self.surrogate.xi)
        self.termination_reason = None


# ---- suggestion -----------------------------------------------------------


def _mask(state: OptimizerState, indices) -> LayerMask:
    return LayerMask.from_indices(state.n_sublayers, sorted(indices), state.skip_ratio)


def _excluded(state: OptimizerState) -> set[tuple[int, ...]]:
    seen = {bits for bits, _ in state.surrogate.observations}
    seen.add(state.best_mask.bits)
    return seen


def _random_mask(state: OptimizerState, rng: np.random.Generator, excluded) -> LayerMask:
    inner = _interior(state.n_sublayers)
    n = state.n_skip
    total = math.comb(len(inner), n)
    if len(excluded) >= total:
        # space exhausted: any valid mask
        return _mask(state, rng.choice(inner, n, replace=False))
    if total <= 50_000 and len(excluded) > total // 2:
        pool = [
            c
            for c in itertools.combinations(inner, n)
            if _mask(state, c).bits not in excluded
        ]
        return _mask(state, pool[int(rng.integers(len(pool)))])
    while True:
        m = _mask(state, rng.choice(inner, n, replace=False))
        if m.bits not in excluded:
            return m


def _project(state: OptimizerState, x: np.ndarray) -> LayerMask:
    inner = _interior(state.n_sublayers)
    order = sorted(inner, key=lambda i: (-x[i], i))
    return _mask(state, order[: state.n_skip])


def _bayesian_mask(state: OptimizerState, rng: np.random.Generator, excluded, n_random_starts: int = 5) -> LayerMask:
    gp = state.surrogate
    n_sub = state.n_sublayers
    bounds = [(0.0, 0.0)] + [(0.0, 1.0)] * (n_sub - 2) + [(0.0, 0.0)]

    obs = sorted(gp.observations, key=lambda o: -o[1])
    starts = [np.array(bits, dtype=np.float64) for bits, _ in obs[:3]]
    for _ in range(n_random_starts):
        x0 = rng.random(n_sub)
        x0[0] = x0[-1] = 0.0
        starts.append(x0)

    def neg_ei(x):
        ei, grad = gp.ei_and_grad(x)
        return -ei, -grad

    best_x, best_val = starts[0], -np.inf
    for x0 in starts:
        res = minimize(neg_ei, x0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": 50})
        if -res.fun > best_val:
            best_x, best_val = res.x, -res.fun

    cand = _project(state, best_x)
    if cand.bits not in excluded:
        return cand
    # projection landed on a known mask: best unseen single-swap neighbour
    on = set(cand.skipped)
    off = [i for i in _interior(n_sub) if i not in on]
    neighbours = []
    for a in sorted(on):
        for b in off:
            m = _mask(state, (on - {a}) | {b})
            if m.bits not in excluded:
                neighbours.append(m)
    if not neighbours:
        return _random_mask(state, rng, excluded)
    ei = gp.expected_improvement(np.array([m.bits for m in neighbours], dtype=np.float64))
    return neighbours[int(np.argmax(ei))]


def suggest(state: OptimizerState, rng: np.random.Generator) -> LayerMask:
    """Candidate for optimization step ``state.step + 1``."""
    o = state.step + 1
    excluded = _excluded(state)
    if use_bayesian(o, state.bayes_interval) and len(state.surrogate) > 0:
        state.last_branch = "bayesian"
        return _bayesian_mask(state, rng, excluded)
    state.last_branch = "random"
    return _random_mask(state, rng, excluded)


# ---- evaluation -----------------------------------------------------------


def evaluate_candidate(bundle: ModelBundle, cache: KVCache, mask: LayerMask, ctx: ContextBuffer) -> float:
    """Fraction of the last gamma committed tokens the masked model re-predicts.

    One forward over the gamma positions preceding each context token,
    conditioned on the earlier committed prefix (whose target K/V rows are
    reused). The cache is left unchanged.
    """
    g = ctx.gamma
    hist = ctx.history
    if len(hist) < g + 1 or ctx.n_generated < g:
        raise InsufficientContext(f"need {g} generated tokens, have {ctx.n_generated}")
    if cache.committed_len != len(hist) - 1 or cache.n_pending:
        raise InsufficientContext("cache is not committed through the history")
    p = len(hist)
    inputs = hist[p - g - 1 : p - 1]
    targets = np.asarray(hist[p - g :])
    mark = cache.checkpoint()
    try:
        logits = forward(bundle, cache, inputs, mask, AttentionMaskSpec.causal(), prefix_len=p - g - 1)
    finally:
        cache.rollback(mark)
    hits = int((np.argmax(logits, axis=1) == targets).sum())
    return hits / g


def _check_termination(state: OptimizerState) -> None:
    if state.best_score > state.score_target:
        reason = "score_target"
    elif state.steps_since_improve >= state.patience:
        reason = "patience"
    elif state.step >= state.max_steps:
        reason = "max_steps"
    else:
        return
    state.phase = Phase.ACCELERATING
    state.termination_reason = reason


def optimize_step(
    state: OptimizerState,
    bundle: ModelBundle,
    cache: KVCache,
    ctx: ContextBuffer,
    rng: np.random.Generator,
) -> OptimizerState:
    mask = suggest(state, rng)
    score = evaluate_candidate(bundle, cache, mask, ctx)
    state.surrogate.observe(mask.bits, score)
    state.last_mask, state.last_score = mask, score
    if score > state.best_score:
        state.best_mask, state.best_score = mask, score
        state.steps_since_improve = 0
    else:
        state.steps_since_improve += 1
    state.step += 1
    _check_termination(state)
    return state


def check_alpha_tolerance(state: OptimizerState, measured_alpha: float, floor: float = 0.1) -> OptimizerState:
    """Lower the skip ratio by 0.1 and re-optimize when acceptance is too low."""
    if state.phase != Phase.ACCELERATING or measured_alpha >= state.alpha_tolerance:
        return state
    new_ratio = max(floor, round(state.skip_ratio - 0.1, 10))
    try:
        state.restart(new_ratio)
    except RatioTooLarge:
        state.restart(state.skip_ratio)
    return state
