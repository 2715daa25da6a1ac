from __future__ import annotations

import numpy as np
import pytest

from swiftsd.model_io import ArchConfig
from swiftsd.synthetic import make_synthetic_model
from swiftsd.transformer import KVCache, forward


def tiny_config(n_blocks=2, d_model=32, n_heads=4, vocab_size=64, max_seq=256, d_ff=None) -> ArchConfig:
    return ArchConfig(
        n_blocks=n_blocks,
        d_model=d_model,
        n_heads=n_heads,
        d_ff=d_ff or 2 * d_model,
        vocab_size=vocab_size,
        max_seq=max_seq,
    )


def prefilled(bundle, history):
    """Cache holding every history token but the last."""
    cache = KVCache.for_bundle(bundle)
    if len(history) > 1:
        forward(bundle, cache, history[:-1], commit=True)
    return cache


def greedy_history(bundle, prompt, n_new):
    """Prompt followed by ``n_new`` greedy tokens, plus the matching cache."""
    from swiftsd.verify import target_step

    cache = prefilled(bundle, prompt)
    hist = list(prompt)
    for _ in range(n_new):
        hist.append(target_step(bundle, cache, hist))
    return hist, cache


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def model(cfg):
    return make_synthetic_model(3, cfg)


@pytest.fixture
def prompt(cfg):
    return [int(x) for x in np.random.default_rng(11).integers(0, cfg.vocab_size - 3, 8)]


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
