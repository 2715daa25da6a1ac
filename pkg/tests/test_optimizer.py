from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import greedy_history, prefilled, tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st

from swiftsd import optimizer as opt
from swiftsd.errors import InsufficientContext, RatioTooLarge
from swiftsd.gp import GPSurrogate
from swiftsd.optimizer import (
    ContextBuffer,
    OptimizerState,
    Phase,
    check_alpha_tolerance,
    evaluate_candidate,
    init_uniform_mask,
    optimize_step,
    suggest,
    use_bayesian,
)
from swiftsd.sampling import session_rng
from swiftsd.synthetic import make_synthetic_model
from swiftsd.transformer import LayerMask, forward


def test_schedule():
    assert [o for o in range(1, 101) if use_bayesian(o, 25)] == [25, 50, 75, 100]


def test_uniform_mask_examples():
    assert init_uniform_mask(4, 0.5).skipped == (1, 2)
    assert init_uniform_mask(40, 0.45).popcount == 18
    assert init_uniform_mask(12, 0.33).skipped == (2, 4, 7, 9)
    with pytest.raises(RatioTooLarge):
        init_uniform_mask(4, 0.1)
    with pytest.raises(RatioTooLarge):
        init_uniform_mask(4, 0.9)


@given(L=st.integers(3, 80), r=st.floats(0.01, 0.99))
def test_uniform_mask_properties(L, r):
    n = opt.n_skipped(L, r)
    if not 1 <= n <= L - 2:
        with pytest.raises(RatioTooLarge):
            init_uniform_mask(L, r)
        return
    m = init_uniform_mask(L, r)
    assert m.popcount == n
    assert m.bits[0] == 0 and m.bits[-1] == 0
    gaps = np.diff(m.skipped)
    assert gaps.size == 0 or gaps.max() - gaps.min() <= 1


def _state(L=6, r=0.5, **kw):
    return OptimizerState(L, skip_ratio=r, phase=Phase.OPTIMIZING, **kw)


def test_random_search_covers_space():
    state = _state(bayes_interval=10_000)
    rng = session_rng(0, "optimizer")
    seen = {state.best_mask.bits}
    for _ in range(math.comb(4, 3) - 1):
        m = suggest(state, rng)
        assert state.last_branch == "random"
        assert m.bits not in seen and m.bits[0] == m.bits[-1] == 0 and m.popcount == 3
        seen.add(m.bits)
        state.surrogate.observe(m.bits, 0.5)
        state.step += 1
    assert len(seen) == 4


def test_bayesian_branch_returns_unseen_mask():
    state = _state(L=12, r=0.33, bayes_interval=25)
    rng = session_rng(1, "optimizer")
    for _ in range(24):
        m = suggest(state, rng)
        state.surrogate.observe(m.bits, float(rng.random()))
        state.step += 1
    m = suggest(state, rng)
    assert state.last_branch == "bayesian"
    assert m.bits not in state.surrogate and m.bits != state.best_mask.bits
    assert m.popcount == 4 and m.bits[0] == m.bits[-1] == 0


@pytest.fixture(scope="module")
def greedy_ctx():
    cfg = tiny_config(n_blocks=3, vocab_size=64)
    m = make_synthetic_model(21, cfg, {2, 3})
    hist, cache = greedy_history(m, [int(x) for x in np.random.default_rng(2).integers(0, 60, 8)], 32)
    return m, cache, ContextBuffer(hist, 32, 32)


def test_evaluate_zero_and_planted_masks(greedy_ctx):
    m, cache, ctx = greedy_ctx
    before = prefilled(m, ctx.history)
    assert evaluate_candidate(m, cache, LayerMask.zeros(6), ctx) == 1.0
    assert evaluate_candidate(m, cache, LayerMask.from_indices(6, [2, 3]), ctx) == 1.0
    assert cache.same_state(before)


def test_evaluate_counts_matches():
    cfg = tiny_config(n_blocks=2, vocab_size=64)
    m = make_synthetic_model(5, cfg)
    hist = [1, 2, 3, 4]
    cache = prefilled(m, hist)
    wrong = set(range(8, 32, 3))
    for i in range(32):
        top = int(np.argmax(forward(m, cache, [hist[-1]], commit=True)[0]))
        hist.append((top + 1) % 60 if i in wrong else top)
    ctx = ContextBuffer(hist, 32, 32)
    assert evaluate_candidate(m, cache, LayerMask.zeros(4), ctx) == 0.75


def test_evaluate_needs_context(greedy_ctx):
    m, cache, ctx = greedy_ctx
    with pytest.raises(InsufficientContext):
        evaluate_candidate(m, cache, LayerMask.zeros(6), ContextBuffer(ctx.history, 32, 10))


def test_patience_termination(greedy_ctx, monkeypatch):
    m, cache, ctx = greedy_ctx
    state = _state(L=6, r=0.5, patience=300, max_steps=1000)
    state.best_score = 0.9
    monkeypatch.setattr(opt, "evaluate_candidate", lambda *a: 0.5)
    rng = session_rng(0, "optimizer")
    for i in range(300):
        assert state.phase == Phase.OPTIMIZING, i
        optimize_step(state, m, cache, ctx, rng)
    assert state.phase == Phase.ACCELERATING and state.termination_reason == "patience"


def test_score_termination_and_best_update(greedy_ctx, monkeypatch):
    m, cache, ctx = greedy_ctx
    state = _state(L=6, r=0.5)
    scores = iter([0.5, 0.4, 0.96])
    monkeypatch.setattr(opt, "evaluate_candidate", lambda *a: next(scores))
    rng = session_rng(0, "optimizer")
    optimize_step(state, m, cache, ctx, rng)
    assert state.best_score == 0.5 and state.best_mask == state.last_mask
    first = state.best_mask
    optimize_step(state, m, cache, ctx, rng)
    assert state.best_mask == first and state.steps_since_improve == 1
    optimize_step(state, m, cache, ctx, rng)
    assert state.phase == Phase.ACCELERATING and state.termination_reason == "score_target"
    assert state.step == 3 and len(state.surrogate) == 3


def test_max_steps_termination(greedy_ctx, monkeypatch):
    m, cache, ctx = greedy_ctx
    state = _state(L=6, r=0.5, max_steps=3)
    monkeypatch.setattr(opt, "evaluate_candidate", lambda *a: 0.1)
    rng = session_rng(0, "optimizer")
    for _ in range(3):
        optimize_step(state, m, cache, ctx, rng)
    assert state.termination_reason == "max_steps"


def test_alpha_tolerance():
    state = _state(L=40, r=0.5)
    state.phase = Phase.ACCELERATING
    check_alpha_tolerance(state, 0.9)
    assert state.skip_ratio == 0.5 and state.phase == Phase.ACCELERATING
    check_alpha_tolerance(state, 0.65)
    assert state.skip_ratio == pytest.approx(0.4) and state.phase == Phase.OPTIMIZING
    assert state.best_mask == init_uniform_mask(40, 0.4) and state.step == 0 and len(state.surrogate) == 0
    for _ in range(10):
        state.phase = Phase.ACCELERATING
        check_alpha_tolerance(state, 0.0)
    assert state.skip_ratio == pytest.approx(0.1)


def test_alpha_tolerance_ignored_outside_accelerating():
    state = _state(L=12, r=0.5)
    check_alpha_tolerance(state, 0.1)
    assert state.skip_ratio == 0.5


def test_gp_interpolates_and_ei_gradient():
    rng = np.random.default_rng(0)
    gp = GPSurrogate()
    xs = [tuple(int(b) for b in rng.integers(0, 2, 8)) for _ in range(12)]
    for x in xs:
        gp.observe(x, float(rng.random()))
    gp.observe(xs[0], 0.25)  # overwrite
    assert len(gp) == len(set(xs))
    x, yn, *_ = gp.fit()
    mu, sd = gp.predict(x)
    assert np.allclose(mu, yn, atol=1e-3) and (sd < 1e-2).all()
    assert (gp.expected_improvement(rng.random((20, 8))) >= 0).all()
    for _ in range(5):
        q = rng.random(8)
        val, grad = gp.ei_and_grad(q)
        assert val == pytest.approx(float(gp.expected_improvement(q[None])[0]), rel=1e-9, abs=1e-12)
        h = 1e-6
        fd = np.array([(gp.ei_and_grad(q + h * e)[0] - gp.ei_and_grad(q - h * e)[0]) / (2 * h) for e in np.eye(8)])
        assert np.allclose(grad, fd, rtol=1e-4, atol=1e-7)
