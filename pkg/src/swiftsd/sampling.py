"""Distribution helpers and seeded random streams."""

from __future__ import annotations

import zlib

import numpy as np

from .errors import InvalidDistribution


def session_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) stream identified by ``(seed, name)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(ss))


def check_distribution(p: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or not np.isfinite(p).all() or (p < 0).any() or abs(p.sum() - 1.0) > tol:
        raise InvalidDistribution("not a probability vector")
    return p


def filter_top_p(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the smallest high-probability set with mass >= top_p, renormalized."""
    if top_p >= 1.0:
        return probs
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    keep = int(np.searchsorted(csum, top_p)) + 1
    out = np.zeros_like(probs)
    sel = order[:keep]
    out[sel] = probs[sel]
    return out / out.sum()


def sample_index(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw with a supplied uniform ``u`` in [0, 1)."""
    csum = np.cumsum(probs)
    i = int(np.searchsorted(csum, u * csum[-1], side="right"))
    i = min(i, probs.size - 1)
    # never land on a zero-probability entry through rounding at the tail
    while probs[i] == 0 and i > 0:
        i -= 1
    return i
