from __future__ import annotations

import numpy as np
import pytest
from conftest import tiny_config

from swiftsd.errors import BadConfig, BadMagic, BadPlantIndex, IoError, MissingTensor, NonFiniteWeight, ShapeMismatch
from swiftsd.model_io import (
    MAGIC,
    ArchConfig,
    ModelBundle,
    Tokenizer,
    bundles_equal,
    describe,
    load_bundle,
    parse,
    save_bundle,
    serialize,
    tensor_shapes,
)
from swiftsd.synthetic import make_synthetic_model
from swiftsd.transformer import KVCache, LayerMask, forward


def test_minimal_bundle_has_four_sublayers(tmp_path):
    cfg = tiny_config(n_blocks=2)
    path = tmp_path / "m.swft"
    save_bundle(make_synthetic_model(0, cfg), path)
    loaded = load_bundle(path)
    assert loaded.n_sublayers == 4
    assert loaded.config == cfg


def test_round_trip_and_deterministic_bytes(tmp_path):
    b = make_synthetic_model(5, tiny_config(vocab_size=300))
    p1, p2 = tmp_path / "a.swft", tmp_path / "b.swft"
    save_bundle(b, p1)
    save_bundle(b, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert bundles_equal(load_bundle(p1), b)
    assert load_bundle(p1).tokenizer == b.tokenizer


def test_bad_magic():
    data = serialize(make_synthetic_model(0, tiny_config()))
    with pytest.raises(BadMagic):
        parse(b"XXXX1" + data[len(MAGIC) :])


def test_truncated_payload_is_shape_mismatch():
    data = serialize(make_synthetic_model(0, tiny_config()))
    with pytest.raises(ShapeMismatch):
        parse(data[:-16])


def test_missing_and_nonfinite_tensor():
    cfg = tiny_config()
    t = dict(make_synthetic_model(0, cfg).tensors)
    t.pop("lm_head")
    with pytest.raises(MissingTensor):
        ModelBundle(cfg, t, Tokenizer.for_vocab(cfg.vocab_size))
    t = {k: v.copy() for k, v in make_synthetic_model(0, cfg).tensors.items()}
    t["blocks.1.wq"][0, 0] = np.nan
    with pytest.raises(NonFiniteWeight):
        ModelBundle(cfg, t, Tokenizer.for_vocab(cfg.vocab_size))


def test_wrong_shape_rejected():
    cfg = tiny_config()
    t = dict(make_synthetic_model(0, cfg).tensors)
    t["embed"] = np.zeros((3, 3), np.float32)
    with pytest.raises(ShapeMismatch):
        ModelBundle(cfg, t, Tokenizer.for_vocab(cfg.vocab_size))


def test_unwritable_path(tmp_path):
    with pytest.raises(IoError):
        save_bundle(make_synthetic_model(0, tiny_config()), tmp_path / "no" / "such" / "dir" / "m.swft")


def test_arch_validation():
    with pytest.raises(BadConfig):
        ArchConfig(n_blocks=1, d_model=30, n_heads=4, d_ff=8, vocab_size=16, max_seq=8)
    with pytest.raises(BadConfig):
        ArchConfig(n_blocks=0, d_model=32, n_heads=4, d_ff=8, vocab_size=16, max_seq=8)


def test_synthetic_determinism_and_plant_errors():
    cfg = tiny_config()
    assert bundles_equal(make_synthetic_model(7, cfg), make_synthetic_model(7, cfg))
    assert not bundles_equal(make_synthetic_model(7, cfg), make_synthetic_model(8, cfg))
    with pytest.raises(BadPlantIndex):
        make_synthetic_model(7, cfg, {4})


def test_planted_sublayers_are_silent_in_describe():
    b = make_synthetic_model(1, tiny_config(n_blocks=3), {1, 4})
    assert describe(b)["zero_output_sublayers"] == [1, 4]
    assert set(tensor_shapes(b.config)) == set(b.tensors)


def test_planted_skip_changes_no_logits():
    cfg = tiny_config(n_blocks=3)
    b = make_synthetic_model(2, cfg, {1, 3})
    toks = [1, 5, 9, 2, 7]
    full = forward(b, KVCache.for_bundle(b), toks)
    skipped = forward(b, KVCache.for_bundle(b), toks, LayerMask.from_indices(6, [1, 3]))
    assert full.tobytes() == skipped.tobytes()


@pytest.mark.parametrize("vocab", [16, 64, 259, 300])
def test_tokenizer_round_trip(vocab):
    tok = Tokenizer.for_vocab(vocab)
    assert len({tok.bos_id, tok.eos_id, tok.pad_id}) == 3
    assert max(tok.bos_id, tok.eos_id, tok.pad_id) < vocab
    ids = tok.encode("abc")
    assert all(0 <= i < tok.n_regular for i in ids)
    if vocab > 70:
        assert tok.decode(ids) == "abc"
    assert Tokenizer.from_dict(tok.to_dict(), vocab) == tok
