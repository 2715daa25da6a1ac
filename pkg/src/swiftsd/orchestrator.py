"""Per-stream decoding loop: optional optimization step, draft, verify, commit.

Cache convention: every emitted token except the most recent one is
committed; the most recent token is fed as the root of the next draft and
verification pass.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from .config import SwiftConfig
from .draft import draft
from .errors import BadRequest
from .model_io import ModelBundle
from .optimizer import ContextBuffer, OptimizerState, Phase, check_alpha_tolerance, optimize_step
from .sampling import session_rng
from .transformer import KVCache, LayerMask, forward
from .verify import VerifyOutcome, target_step, verify_greedy, verify_sampling

MAX_SIBLINGS = 10


@dataclass
class GenerationRequest:
    prompt: list[int]
    max_new_tokens: int = 64
    mode: str = "greedy"
    temperature: float = 1.0
    top_p: float = 1.0
    stop_tokens: frozenset[int] = frozenset()
    request_id: str | None = None

    @classmethod
    def from_config(cls, prompt, config: SwiftConfig, **kw) -> GenerationRequest:
        return cls(
            list(prompt),
            kw.pop("max_new_tokens", config.max_new_tokens),
            config.mode,
            config.temperature,
            config.top_p,
            **kw,
        )

    def validate(self, bundle: ModelBundle) -> None:
        cfg = bundle.config
        if self.max_new_tokens < 1:
            raise BadRequest("max_new_tokens must be >= 1")
        if not self.prompt:
            raise BadRequest("prompt must contain at least one token")
        if any(not 0 <= t < cfg.vocab_size for t in self.prompt):
            raise BadRequest("prompt token outside vocabulary")
        if len(self.prompt) + self.max_new_tokens > cfg.max_seq:
            raise BadRequest(f"prompt + max_new_tokens exceeds max_seq={cfg.max_seq}")
        if self.mode not in ("greedy", "sample"):
            raise BadRequest(f"unknown mode {self.mode!r}")
        if not self.temperature > 0 or not 0 < self.top_p <= 1:
            raise BadRequest("temperature must be > 0 and top_p in (0, 1]")

    @property
    def sample(self) -> bool:
        return self.mode == "sample"


@dataclass
class CallRecord:
    """One target forward pass (a verification call or a plain step)."""

    instance: int
    call: int
    phase: str
    mask: str
    spine_len: int
    tree_size: int
    accepted_draft: int
    emitted: int
    t_draft: float = 0.0
    t_verify: float = 0.0
    t_optimize: float = 0.0
    opt_step: int | None = None
    opt_branch: str | None = None
    opt_score: float | None = None


@dataclass
class PhaseEvent:
    instance: int
    call: int
    from_phase: str
    to_phase: str
    reason: str
    skip_ratio: float


@dataclass
class InstanceSummary:
    instance: int
    request_id: str | None
    n_prompt: int
    n_generated: int
    t_total: float
    stopped: bool
    accel_alpha: float | None = None


@dataclass
class SessionTrace:
    records: list[CallRecord] = field(default_factory=list)
    events: list[PhaseEvent] = field(default_factory=list)
    instances: list[InstanceSummary] = field(default_factory=list)

    @property
    def emitted(self) -> int:
        return sum(r.emitted for r in self.records)

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "events": [asdict(e) for e in self.events],
            "instances": [asdict(i) for i in self.instances],
        }


def _transition(state: OptimizerState, trace: SessionTrace, instance: int, new: Phase, reason: str, prev=None) -> None:
    old = state.phase if prev is None else prev
    state.phase = new
    if old != new:
        trace.events.append(PhaseEvent(instance, len(trace.records), old.value, new.value, reason, state.skip_ratio))


def _prefill(bundle: ModelBundle, prompt) -> KVCache:
    cache = KVCache.for_bundle(bundle)
    if len(prompt) > 1:
        forward(bundle, cache, prompt[:-1], commit=True)
    return cache


def _accepted_alpha(records) -> float | None:
    steps = sum(r.spine_len for r in records)
    return None if steps == 0 else sum(r.accepted_draft for r in records) / steps


def generate(
    bundle: ModelBundle,
    request: GenerationRequest,
    state: OptimizerState,
    rng,
    config: SwiftConfig | None = None,
    *,
    opt_rng=None,
    trace: SessionTrace | None = None,
    instance: int = 0,
):
    """Decode one instance; ``state`` carries over between instances of a stream.

    Returns ``(new_tokens, trace, state)``.
    """
    config = config or SwiftConfig()
    request.validate(bundle)
    trace = trace if trace is not None else SessionTrace()
    opt_rng = opt_rng if opt_rng is not None else rng
    t_start = time.perf_counter()
    n_sub = bundle.config.n_sublayers
    vocab = bundle.config.vocab_size
    zero = LayerMask.zeros(n_sub)
    sample = request.sample

    cache = _prefill(bundle, request.prompt)
    history = list(request.prompt)
    ctx = ContextBuffer(history, config.gamma, 0)
    first_record = len(trace.records)
    if state.phase == Phase.OPTIMIZING:
        _transition(state, trace, instance, Phase.CONTEXT, "instance_start")

    out: list[int] = []
    stopped = False
    while len(out) < request.max_new_tokens and not stopped:
        rec_opt: dict = {}
        t_opt = 0.0
        if state.phase == Phase.CONTEXT and ctx.ready:
            _transition(state, trace, instance, Phase.OPTIMIZING, "context_ready")
        if state.phase == Phase.OPTIMIZING:
            t0 = time.perf_counter()
            optimize_step(state, bundle, cache, ctx, opt_rng)
            t_opt = time.perf_counter() - t0
            rec_opt = dict(opt_step=state.step, opt_branch=state.last_branch, opt_score=state.last_score)
            if state.phase == Phase.ACCELERATING:
                trace.events.append(
                    PhaseEvent(
                        instance,
                        len(trace.records),
                        Phase.OPTIMIZING.value,
                        Phase.ACCELERATING.value,
                        state.termination_reason,
                        state.skip_ratio,
                    )
                )
        phase = state.phase
        mask = zero if config.zero_mask else state.best_mask

        remaining = request.max_new_tokens - len(out)
        k_max = 1 if sample else min(MAX_SIBLINGS, vocab)
        room = (cache.capacity - cache.length - 1) // k_max
        n_max = min(config.max_draft, remaining - 1, room)

        t0 = time.perf_counter()
        if n_max >= 1:
            tree = draft(
                bundle,
                cache,
                mask,
                history,
                config.epsilon,
                n_max,
                sample=sample,
                temperature=request.temperature,
                top_p=request.top_p,
                rng=rng,
            )
            t1 = time.perf_counter()
            if sample:
                outcome = verify_sampling(bundle, cache, tree, history, request.temperature, rng, request.top_p)
            else:
                outcome = verify_greedy(bundle, cache, tree, history)
        else:
            t1 = t0
            tok = target_step(
                bundle, cache, history, sample=sample, temperature=request.temperature, top_p=request.top_p, rng=rng
            )
            outcome = VerifyOutcome([tok], 0, 0, 0)
        t2 = time.perf_counter()

        new = outcome.accepted_tokens[:remaining]
        for i, tok in enumerate(new):
            if tok in request.stop_tokens:
                new = new[: i + 1]
                stopped = True
                break
        out.extend(new)
        history.extend(new)
        ctx.n_generated = len(out)
        trace.records.append(
            CallRecord(
                instance=instance,
                call=len(trace.records),
                phase=phase.value,
                mask=mask.key(),
                spine_len=outcome.draft_spine_len,
                tree_size=outcome.tree_size,
                accepted_draft=min(outcome.accepted_draft_count, len(new)),
                emitted=len(new),
                t_draft=t1 - t0,
                t_verify=t2 - t1,
                t_optimize=t_opt,
                **rec_opt,
            )
        )

    accel = [r for r in trace.records[first_record:] if r.phase == Phase.ACCELERATING.value]
    alpha = _accepted_alpha(accel)
    trace.instances.append(
        InstanceSummary(instance, request.request_id, len(request.prompt), len(out), time.perf_counter() - t_start, stopped, alpha)
    )
    if alpha is not None and state.phase == Phase.ACCELERATING and not config.zero_mask:
        prev = state.phase
        check_alpha_tolerance(state, alpha)
        if state.phase != prev:
            _transition(state, trace, instance, state.phase, "alpha_below_tolerance", prev=prev)
    return out, trace, state


def generate_vanilla(bundle: ModelBundle, request: GenerationRequest, rng=None) -> list[int]:
    """Plain token-by-token decoding with the full model."""
    request.validate(bundle)
    if request.sample and rng is None:
        raise BadRequest("sampling mode needs an rng")
    cache = _prefill(bundle, request.prompt)
    history = list(request.prompt)
    out: list[int] = []
    while len(out) < request.max_new_tokens:
        tok = target_step(
            bundle, cache, history, sample=request.sample, temperature=request.temperature, top_p=request.top_p, rng=rng
        )
        out.append(tok)
        history.append(tok)
        if tok in request.stop_tokens:
            break
    return out


class SwiftSession:
    """A stream of requests sharing one optimizer state."""

    def __init__(self, bundle: ModelBundle, config: SwiftConfig | None = None, state: OptimizerState | None = None):
        self.bundle = bundle
        self.config = config or SwiftConfig()
        self.state = state or OptimizerState.from_config(bundle.config.n_sublayers, self.config)
        if not self.config.optimize or self.config.zero_mask:
            self.state.phase = Phase.ACCELERATING
            self.state.termination_reason = "disabled"
        self.rng = session_rng(self.config.seed, "sample")
        self.opt_rng = session_rng(self.config.seed, "optimizer")
        self.trace = SessionTrace()
        self.n_instances = 0

    def run(self, request: GenerationRequest) -> list[int]:
        tokens, _, self.state = generate(
            self.bundle,
            request,
            self.state,
            self.rng,
            self.config,
            opt_rng=self.opt_rng,
            trace=self.trace,
            instance=self.n_instances,
        )
        self.n_instances += 1
        return tokens

    def export_trace(self) -> dict:
        return self.trace.to_dict()


def create_session(bundle: ModelBundle, config: SwiftConfig | None = None) -> SwiftSession:
    return SwiftSession(bundle, config)
