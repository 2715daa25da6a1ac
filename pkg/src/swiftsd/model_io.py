"""Model bundles and the SWFT1 container format.

Layout on disk::

    b"SWFT1" | u64 little-endian header length | UTF-8 JSON header | f32 payload

The header carries the architecture config, the tokenizer table and a tensor
manifest (name, shape, byte offset into the payload).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadConfig,
    BadMagic,
    IoError,
    MissingTensor,
    ModelFormatError,
    NonFiniteWeight,
    ShapeMismatch,
)

MAGIC = b"SWFT1"
_LEN = struct.Struct("<Q")
_F32 = np.dtype("<f4")

N_BYTES = 256


@dataclass(frozen=True)
class ArchConfig:
    n_blocks: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq: int
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_blocks", "d_model", "n_heads", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise BadConfig(f"{name} must be >= 1")
        if self.max_seq < 2:
            raise BadConfig("max_seq must be >= 2")
        if self.d_model % self.n_heads:
            raise BadConfig("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise BadConfig("head_dim must be even for rotary embeddings")
        if not self.norm_eps > 0:
            raise BadConfig("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_sublayers(self) -> int:
        """L: attention and MLP sublayers counted separately."""
        return 2 * self.n_blocks

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        try:
            return cls(**d)
        except TypeError as exc:
            raise BadConfig(str(exc)) from None


def sublayer_kind(index: int) -> str:
    return "attn" if index % 2 == 0 else "mlp"


def tensor_shapes(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Manifest of every tensor the architecture requires, in storage order."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for b in range(config.n_blocks):
        p = f"blocks.{b}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_up"] = (d, f)
        shapes[p + "w_down"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, v)
    return shapes


def output_projection(index: int) -> str:
    """Name of the tensor whose zeroing silences sublayer ``index``."""
    b = index // 2
    return f"blocks.{b}.wo" if index % 2 == 0 else f"blocks.{b}.w_down"


@dataclass(frozen=True)
class Tokenizer:
    """Byte-level by default; ``pieces`` switches to an explicit string table.

    With a table, every piece must be a single character. Unknown characters
    fold onto the regular ids so arbitrary text always encodes.
    """

    vocab_size: int
    bos_id: int
    eos_id: int
    pad_id: int
    pieces: tuple[str, ...] | None = None

    @classmethod
    def byte_level(cls, vocab_size: int = N_BYTES + 3) -> Tokenizer:
        if vocab_size < N_BYTES + 3:
            raise BadConfig("byte-level tokenizer needs vocab_size >= 259")
        return cls(vocab_size, N_BYTES, N_BYTES + 1, N_BYTES + 2)

    @classmethod
    def char_table(cls, vocab_size: int) -> Tokenizer:
        if vocab_size < 4:
            raise BadConfig("vocab_size must be >= 4 for a char table")
        n = vocab_size - 3
        pieces = tuple(chr(0x21 + i) if i < 94 else chr(0x100 + i) for i in range(n))
        return cls(vocab_size, n, n + 1, n + 2, pieces)

    @classmethod
    def for_vocab(cls, vocab_size: int) -> Tokenizer:
        if vocab_size >= N_BYTES + 3:
            return cls.byte_level(vocab_size)
        return cls.char_table(vocab_size)

    @property
    def n_regular(self) -> int:
        return N_BYTES if self.pieces is None else len(self.pieces)

    def encode(self, text: str) -> list[int]:
        if self.pieces is None:
            return list(text.encode("utf-8"))
        index = {p: i for i, p in enumerate(self.pieces)}
        return [index.get(c, ord(c) % self.n_regular) for c in text]

    def decode(self, ids) -> str:
        specials = {self.bos_id, self.eos_id, self.pad_id}
        if self.pieces is None:
            return bytes(i for i in ids if i < N_BYTES).decode("utf-8", errors="replace")
        return "".join(self.pieces[i] for i in ids if i < len(self.pieces) and i not in specials)

    def to_dict(self) -> dict:
        d = {"bos": self.bos_id, "eos": self.eos_id, "pad": self.pad_id}
        if self.pieces is None:
            d["kind"] = "bytes"
        else:
            d["kind"] = "table"
            d["pieces"] = list(self.pieces)
        return d

    @classmethod
    def from_dict(cls, d: dict, vocab_size: int) -> Tokenizer:
        pieces = tuple(d["pieces"]) if d.get("kind") == "table" else None
        tok = cls(vocab_size, int(d["bos"]), int(d["eos"]), int(d["pad"]), pieces)
        for i in (tok.bos_id, tok.eos_id, tok.pad_id):
            if not 0 <= i < vocab_size:
                raise ModelFormatError(f"special token id {i} outside vocab")
        return tok


@dataclass(frozen=True, eq=False)
class ModelBundle:
    config: ArchConfig
    tensors: dict[str, np.ndarray] = field(repr=False)
    tokenizer: Tokenizer

    def __post_init__(self):
        validate(self.config, self.tensors)
        for arr in self.tensors.values():
            arr.setflags(write=False)

    @property
    def n_sublayers(self) -> int:
        return self.config.n_sublayers

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def validate(config: ArchConfig, tensors: dict[str, np.ndarray]) -> None:
    for name, shape in tensor_shapes(config).items():
        if name not in tensors:
            raise MissingTensor(name)
        arr = tensors[name]
        if arr.shape != shape:
            raise ShapeMismatch(name, shape, arr.shape)
        if arr.dtype != np.float32:
            raise ModelFormatError(f"tensor {name!r} must be float32, got {arr.dtype}")
        if not np.isfinite(arr).all():
            raise NonFiniteWeight(name)


def bundles_equal(a: ModelBundle, b: ModelBundle) -> bool:
    """Bitwise equality of config, tokenizer and every tensor."""
    if a.config != b.config or a.tokenizer != b.tokenizer:
        return False
    if a.tensors.keys() != b.tensors.keys():
        return False
    return all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)


def serialize(bundle: ModelBundle) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name in tensor_shapes(bundle.config):
        raw = np.ascontiguousarray(bundle.tensors[name], dtype=_F32).tobytes()
        manifest.append({"name": name, "shape": list(bundle.tensors[name].shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "SWFT1",
        "config": asdict(bundle.config),
        "tokenizer": bundle.tokenizer.to_dict(),
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + b"".join(chunks)


def save_bundle(bundle: ModelBundle, path) -> None:
    data = serialize(bundle)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def parse(data: bytes) -> ModelBundle:
    if not data.startswith(MAGIC):
        raise BadMagic("file does not start with b'SWFT1'")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise ModelFormatError("truncated header length")
    (hlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"bad header: {exc}") from None
    payload = memoryview(data)[pos + hlen :]

    config = ArchConfig.from_dict(header["config"])
    tokenizer = Tokenizer.from_dict(header["tokenizer"], config.vocab_size)
    expected = tensor_shapes(config)
    entries = {e["name"]: e for e in header.get("tensors", [])}

    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        if name not in entries:
            raise MissingTensor(name)
        entry = entries[name]
        if tuple(entry["shape"]) != shape:
            raise ShapeMismatch(name, shape, tuple(entry["shape"]))
        count = int(np.prod(shape))
        start = int(entry["offset"])
        chunk = payload[start : start + 4 * count]
        if len(chunk) != 4 * count:
            raise ShapeMismatch(name, shape, (len(chunk) // 4,))
        tensors[name] = np.frombuffer(chunk, dtype=_F32).astype(np.float32).reshape(shape)
    return ModelBundle(config, tensors, tokenizer)


def load_bundle(path) -> ModelBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return parse(data)


def describe(bundle: ModelBundle) -> dict:
    cfg = bundle.config
    n_params = sum(int(a.size) for a in bundle.tensors.values())
    silent = [
        i for i in range(cfg.n_sublayers) if not np.any(bundle.tensors[output_projection(i)])
    ]
    return {
        "config": asdict(cfg),
        "n_sublayers": cfg.n_sublayers,
        "n_params": n_params,
        "tokenizer": "bytes" if bundle.tokenizer.pieces is None else "table",
        "zero_output_sublayers": silent,
    }
