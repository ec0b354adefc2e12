"""Ternary weights, integer activations, trit packing and model configs."""
from __future__ import annotations

import configparser
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CorruptionError, ValidationError

TRIT_LEVELS = (-1, 0, 1)
ACT_BITS = (4, 8)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TernaryTensor:
    """Weight matrix of trits with one absmean scale.

    ``trits`` has shape (rows, cols): rows index input channels, cols index
    output channels.
    """

    trits: np.ndarray
    scale: float

    def __post_init__(self):
        t = np.asarray(self.trits)
        if t.ndim != 2:
            raise ValidationError(f"trits must be 2-D, got shape {t.shape}")
        if t.size and (t.min() < -1 or t.max() > 1):
            raise ValidationError("trit values must lie in {-1, 0, +1}")
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValidationError(f"scale must be finite and >= 0, got {self.scale}")
        if self.scale == 0 and np.any(t):
            raise ValidationError("scale may be 0 only for the all-zero tensor")
        object.__setattr__(self, "trits", _frozen(t, np.int8))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rows(self):
        return self.trits.shape[0]

    @property
    def cols(self):
        return self.trits.shape[1]

    @classmethod
    def from_trits(cls, trits, scale=1.0):
        t = np.asarray(trits)
        return cls(t, scale if np.any(t) else 0.0)


@dataclass(frozen=True)
class ActivationVector:
    values: np.ndarray
    bits: int
    scale: float = 1.0

    def __post_init__(self):
        if self.bits not in ACT_BITS:
            raise ValidationError(f"activation bits must be 4 or 8, got {self.bits}")
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise ValidationError("activation values must be a vector")
        lo, hi = signed_range(self.bits)
        if v.size and (v.min() < lo or v.max() > hi):
            raise ValidationError(f"activation values exceed the {self.bits}-bit signed range")
        if not self.scale > 0:
            raise ValidationError("activation scale must be positive")
        object.__setattr__(self, "values", _frozen(v, np.int64))

    def __len__(self):
        return self.values.size


def signed_range(bits):
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def quantize_weights_ternary(weights) -> TernaryTensor:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValidationError(f"weights must be a matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValidationError("weights contain non-finite entries")
    gamma = float(np.mean(np.abs(w))) if w.size else 0.0
    if gamma == 0.0:
        return TernaryTensor(np.zeros(w.shape, dtype=np.int8), 0.0)
    trits = np.clip(round_half_away(w / gamma), -1, 1)
    return TernaryTensor(trits.astype(np.int8), gamma)


def quantize_activations(x, bits) -> ActivationVector:
    """Symmetric per-vector absmax quantization to ``bits``-bit integers."""
    if bits not in ACT_BITS:
        raise ValidationError(f"activation bits must be 4 or 8, got {bits}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValidationError("activations contain non-finite entries")
    qmax = (1 << (bits - 1)) - 1
    absmax = float(np.max(np.abs(x))) if x.size else 0.0
    if absmax == 0.0:
        return ActivationVector(np.zeros(x.size, dtype=np.int64), bits, 1.0)
    q = np.clip(round_half_away(x * qmax / absmax), -qmax, qmax)
    return ActivationVector(q.astype(np.int64), bits, absmax / qmax)


def sparsity(t: TernaryTensor) -> float:
    n = t.trits.size
    if n == 0:
        return 0.0
    return float(np.count_nonzero(t.trits == 0)) / n


# --- packing ---------------------------------------------------------------

class Encoding(enum.IntEnum):
    TWO_BIT = 0
    BASE243 = 1


TRITS_PER_BYTE = {Encoding.TWO_BIT: 4, Encoding.BASE243: 5}


@dataclass(frozen=True)
class PackedTritBuffer:
    encoding: Encoding
    data: bytes
    trit_count: int

    def __post_init__(self):
        object.__setattr__(self, "encoding", Encoding(self.encoding))
        per = TRITS_PER_BYTE[self.encoding]
        if len(self.data) != -(-self.trit_count // per):
            raise ValidationError(
                f"{self.encoding.name} buffer of {self.trit_count} trits needs "
                f"{-(-self.trit_count // per)} bytes, got {len(self.data)}"
            )


def _check_trits(t):
    if t.size and (t.min() < -1 or t.max() > 1):
        raise ValidationError("trit values must lie in {-1, 0, +1}")


def pack_trits(trits, encoding=Encoding.TWO_BIT) -> PackedTritBuffer:
    t = np.asarray(trits, dtype=np.int64).reshape(-1)
    _check_trits(t)
    encoding = Encoding(encoding)
    if encoding is Encoding.TWO_BIT:
        data = kernels.pack_two_bit(t.astype(np.int8))
    else:
        data = kernels.pack_base243(t.astype(np.int8))
    return PackedTritBuffer(encoding, data.tobytes(), t.size)


def unpack_trits(buf: PackedTritBuffer) -> np.ndarray:
    raw = np.frombuffer(buf.data, dtype=np.uint8)
    if buf.encoding is Encoding.TWO_BIT:
        trits, bad = kernels.unpack_two_bit(raw, buf.trit_count)
        if bad >= 0:
            raise CorruptionError(f"invalid 2-bit code 11 at trit {bad}")
    else:
        trits, bad = kernels.unpack_base243(raw, buf.trit_count)
        if bad >= 0:
            raise CorruptionError(f"base-243 byte {raw[bad]} >= 243 at offset {bad}")
    return trits


# --- packed tensor file ----------------------------------------------------
# 16-byte header: magic, version u8, encoding u8, rows u32, cols u32, 2 reserved
# bytes; then the scale as float64; then packed trits in row-major order.

TRIT_MAGIC = b"TRIT"
TRIT_VERSION = 1
_HEADER = struct.Struct("<4sBBII2x")
_SCALE = struct.Struct("<d")


def dump_tensor(t: TernaryTensor, encoding=Encoding.TWO_BIT) -> bytes:
    buf = pack_trits(t.trits.reshape(-1), encoding)
    return _HEADER.pack(TRIT_MAGIC, TRIT_VERSION, buf.encoding, t.rows, t.cols) + _SCALE.pack(t.scale) + buf.data


def load_tensor_bytes(raw: bytes) -> TernaryTensor:
    if len(raw) < _HEADER.size + _SCALE.size:
        raise CorruptionError("truncated tensor file header")
    magic, version, enc, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != TRIT_MAGIC:
        raise CorruptionError(f"bad magic {magic!r}")
    if version != TRIT_VERSION:
        raise CorruptionError(f"unsupported tensor file version {version}")
    try:
        enc = Encoding(enc)
    except ValueError:
        raise CorruptionError(f"unknown encoding id {enc}") from None
    (scale,) = _SCALE.unpack_from(raw, _HEADER.size)
    payload = raw[_HEADER.size + _SCALE.size:]
    try:
        buf = PackedTritBuffer(enc, payload, rows * cols)
    except ValidationError as exc:
        raise CorruptionError(str(exc)) from None
    return TernaryTensor(unpack_trits(buf).reshape(rows, cols), scale)


def save_tensor(path, t: TernaryTensor, encoding=Encoding.TWO_BIT):
    Path(path).write_bytes(dump_tensor(t, encoding))


def load_tensor(path) -> TernaryTensor:
    return load_tensor_bytes(Path(path).read_bytes())


# --- model configuration ---------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    name: str
    layers: int
    hidden_dim: int
    ffn_dim: int
    heads: int
    kv_heads: int
    head_dim: int
    param_count: int = 0
    vocab_size: int = 0
    tied_embeddings: bool = False
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("layers", "hidden_dim", "ffn_dim", "heads", "kv_heads", "head_dim"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.head_dim * self.heads != self.hidden_dim:
            raise ValidationError(
                f"head_dim * heads = {self.head_dim * self.heads} != hidden_dim {self.hidden_dim}"
            )
        if self.kv_heads > self.heads:
            raise ValidationError("kv_heads must not exceed heads")
        if self.param_count < 0 or self.vocab_size < 0:
            raise ValidationError("param_count and vocab_size must be nonnegative")
        if self.param_count == 0:
            if self.vocab_size == 0:
                raise ValidationError("give param_count or vocab_size")
            object.__setattr__(self, "param_count", dense_param_count(self))

    @property
    def kv_dim(self):
        return self.kv_heads * self.head_dim

    def projection_dims(self):
        """(d_in, d_out) of every linear projection in one decoder layer."""
        h, kv, f = self.hidden_dim, self.kv_dim, self.ffn_dim
        return {
            "Query": (h, h),
            "Key": (h, kv),
            "Value": (h, kv),
            "Output": (h, h),
            "Gate": (h, f),
            "Up": (h, f),
            "Down": (f, h),
        }


def dense_param_count(m: ModelConfig) -> int:
    """Parameters of a Llama-style decoder: projections, two RMSNorms per layer,
    final norm, embedding and (untied) LM head."""
    per_layer = sum(i * o for i, o in m.projection_dims().values()) + 2 * m.hidden_dim
    embed = m.vocab_size * m.hidden_dim
    head = 0 if m.tied_embeddings else embed
    return m.layers * per_layer + m.hidden_dim + embed + head


def _falcon3(name, layers, hidden, ffn, heads):
    return ModelConfig(name, layers, hidden, ffn, heads, kv_heads=4, head_dim=256, vocab_size=131072)


# Published Falcon3 dimensions (the 1.58-bit releases share them).
FALCON3 = {
    "Falcon3-1B": _falcon3("Falcon3-1B", 18, 2048, 8192, 8),
    "Falcon3-3B": _falcon3("Falcon3-3B", 22, 3072, 9216, 12),
    "Falcon3-7B": _falcon3("Falcon3-7B", 28, 3072, 23040, 12),
    "Falcon3-10B": _falcon3("Falcon3-10B", 40, 3072, 23040, 12),
}


def parse_kv_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict of strings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ValidationError(f"unparseable config: {exc}") from None
    return dict(parser["config"])


def read_kv_text(path) -> dict:
    return parse_kv_text(Path(path).read_text())


_INT_FIELDS = ("layers", "hidden_dim", "ffn_dim", "heads", "kv_heads", "head_dim", "param_count", "vocab_size")


def model_config_from_dict(d: dict) -> ModelConfig:
    if "preset" in d:
        if d["preset"] not in FALCON3:
            raise ValidationError(f"unknown preset {d['preset']!r}")
        return FALCON3[d["preset"]]
    try:
        kw = {k: int(d[k]) for k in _INT_FIELDS if k in d}
        tied = d.get("tied_embeddings", "false").strip().lower() in ("1", "true", "yes")
        return ModelConfig(name=d.get("name", "custom"), tied_embeddings=tied, **kw)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad model config: {exc}") from None


def load_model_config(path) -> ModelConfig:
    return model_config_from_dict(read_kv_text(Path(path)))
