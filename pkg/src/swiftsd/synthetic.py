"""Seeded synthetic models with planted structure, used as test fixtures."""

from __future__ import annotations

import numpy as np

from .errors import BadPlantIndex
from .model_io import ArchConfig, ModelBundle, Tokenizer, output_projection, tensor_shapes


def _check_plant(config: ArchConfig, planted) -> frozenset[int]:
    planted = frozenset(int(i) for i in planted)
    bad = [i for i in planted if not 0 <= i < config.n_sublayers]
    if bad:
        raise BadPlantIndex(f"planted indices {sorted(bad)} outside [0, {config.n_sublayers})")
    return planted


def make_synthetic_model(seed: int, config: ArchConfig, planted_noop_sublayers=()) -> ModelBundle:
    """Random model whose planted sublayers have a zero output projection.

    Skipping a planted sublayer is exactly lossless: its residual
    contribution is a zero matrix product.
    """
    planted = _check_plant(config, planted_noop_sublayers)
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.d_model)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    for i in planted:
        name = output_projection(i)
        tensors[name] = np.zeros_like(tensors[name])
    return ModelBundle(config, tensors, Tokenizer.for_vocab(config.vocab_size))


def make_two_domain_model(seed: int, config: ArchConfig, domain_b_sublayers) -> ModelBundle:
    """Model whose residual stream splits into two disjoint subspaces.

    The first half of the regular tokens (domain A) embeds into the first half
    of the model dimensions, the rest (domain B) into the second half. Sublayers
    listed in ``domain_b_sublayers`` only read and write the B subspace, all
    others only the A subspace. A context made of A tokens therefore never
    activates a B sublayer, so skipping B sublayers is lossless on A text and
    destructive on B text, and vice versa.
    """
    b_layers = _check_plant(config, domain_b_sublayers)
    if config.n_heads % 2:
        raise BadPlantIndex("two-domain model needs an even head count")
    d, v = config.d_model, config.vocab_size
    half = d // 2
    tok = Tokenizer.for_vocab(v)
    n_a = tok.n_regular // 2

    dim_a = np.zeros(d, dtype=bool)
    dim_a[:half] = True
    tok_a = np.zeros(v, dtype=bool)
    tok_a[:n_a] = True
    tok_b = np.zeros(v, dtype=bool)
    tok_b[n_a : tok.n_regular] = True

    base = make_synthetic_model(seed, config)
    t = {k: a.copy() for k, a in base.tensors.items()}

    t["embed"][np.ix_(tok_a, ~dim_a)] = 0.0
    t["embed"][np.ix_(tok_b, dim_a)] = 0.0
    t["embed"][~(tok_a | tok_b)] = 0.0
    t["lm_head"][np.ix_(dim_a, ~tok_a)] = 0.0
    t["lm_head"][np.ix_(~dim_a, ~tok_b)] = 0.0

    for i in range(config.n_sublayers):
        live = ~dim_a if i in b_layers else dim_a
        p = f"blocks.{i // 2}."
        if i % 2 == 0:
            for w in ("wq", "wk", "wv", "wo"):
                t[p + w][~live, :] = 0.0
                t[p + w][:, ~live] = 0.0
        else:
            t[p + "w_up"][~live, :] = 0.0
            t[p + "w_down"][:, ~live] = 0.0
    return ModelBundle(config, t, tok)


def domain_tokens(bundle: ModelBundle) -> tuple[list[int], list[int]]:
    """Regular token ids of domain A and domain B for a two-domain model."""
    n = bundle.tokenizer.n_regular
    return list(range(n // 2)), list(range(n // 2, n))
