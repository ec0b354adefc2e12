"""Quantized LoRA adapters: inference arithmetic, overhead accounting, file format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, ValidationError
from .ternary import ActivationVector, ModelConfig, round_half_away

PROJECTIONS = ("Query", "Key", "Value", "Output", "Gate", "Up", "Down")
_SHORT = {p[0]: p for p in PROJECTIONS}
DEFAULT_RANK = 16
DEFAULT_BITS = 6
DEFAULT_PLACEMENT = frozenset({"Value", "Output", "Down"})


def normalize_placement(place) -> frozenset:
    out = set()
    for name in place:
        full = _SHORT.get(name, name)
        if full not in PROJECTIONS:
            raise ValidationError(f"unknown projection {name!r}; expected one of {', '.join(PROJECTIONS)}")
        out.add(full)
    return frozenset(out)


@dataclass(frozen=True)
class LoraAdapter:
    A: np.ndarray  # (d_in, rank) signed codes
    B: np.ndarray  # (rank, d_out) signed codes
    scale_a: float
    scale_b: float
    alpha: float
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.int64)
        B = np.asarray(self.B, dtype=np.int64)
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
            raise ValidationError(f"incompatible adapter shapes {A.shape} and {B.shape}")
        if A.shape[1] < 1:
            raise ValidationError("rank must be >= 1")
        qmax = (1 << (self.bits - 1)) - 1
        for m in (A, B):
            if m.size and np.abs(m).max() > qmax:
                raise ValidationError(f"adapter codes exceed the {self.bits}-bit symmetric range")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def rank(self):
        return self.A.shape[1]

    @property
    def d_in(self):
        return self.A.shape[0]

    @property
    def d_out(self):
        return self.B.shape[1]


def quantize_matrix(m, bits):
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValidationError("adapter matrix contains non-finite entries")
    qmax = (1 << (bits - 1)) - 1
    absmax = float(np.abs(m).max()) if m.size else 0.0
    if absmax == 0.0:
        return np.zeros(m.shape, dtype=np.int64), 1.0
    codes = np.clip(round_half_away(m * qmax / absmax), -qmax, qmax).astype(np.int64)
    return codes, absmax / qmax


def quantize_adapter(A, B, bits=DEFAULT_BITS, alpha=None) -> LoraAdapter:
    """Per-matrix symmetric absmax quantization; alpha defaults to the rank."""
    if bits < 2:
        raise ValidationError("adapter bits must be >= 2")
    qa, sa = quantize_matrix(A, bits)
    qb, sb = quantize_matrix(B, bits)
    rank = qa.shape[1] if qa.ndim == 2 else 0
    return LoraAdapter(qa, qb, sa, sb, float(rank if alpha is None else alpha), bits)


def dequantize_adapter(ad: LoraAdapter):
    return ad.A * ad.scale_a, ad.B * ad.scale_b


def apply_adapter(x: ActivationVector, ad: LoraAdapter, base_out) -> np.ndarray:
    """``base_out + alpha/r * deq(B) . (deq(A) . deq(x))`` with integer inner products."""
    base_out = np.asarray(base_out, dtype=np.float64)
    if len(x) != ad.d_in:
        raise ValidationError(f"adapter expects {ad.d_in} inputs, got {len(x)}")
    if base_out.shape != (ad.d_out,):
        raise ValidationError(f"base output must have length {ad.d_out}")
    if ad.alpha == 0:
        return base_out.copy()
    h = x.values @ ad.A
    y = h @ ad.B
    return base_out + (ad.alpha / ad.rank) * (ad.scale_a * ad.scale_b * x.scale) * y.astype(np.float64)


def adapter_params(place, r, m: ModelConfig) -> int:
    dims = m.projection_dims()
    return m.layers * sum(r * (dims[p][0] + dims[p][1]) for p in normalize_placement(place))


def param_fraction(place, r, m: ModelConfig) -> float:
    """Adapter parameters as a percentage of the base model's parameters."""
    if r < 0:
        raise ValidationError("rank must be nonnegative")
    return 100.0 * adapter_params(place, r, m) / m.param_count


def op_fraction(place, r, m: ModelConfig) -> dict:
    """Extra adapter MACs per projection, in percent of that projection's MACs.

    ``aggregate_weighted`` pools MACs over the placement; ``aggregate_mean`` is
    the plain mean of the per-projection figures.
    """
    dims = m.projection_dims()
    place = sorted(normalize_placement(place), key=PROJECTIONS.index)
    per = {p: 100.0 * r * (dims[p][0] + dims[p][1]) / (dims[p][0] * dims[p][1]) for p in place}
    extra = sum(r * (dims[p][0] + dims[p][1]) for p in place)
    base = sum(dims[p][0] * dims[p][1] for p in place)
    return {
        "per_projection": per,
        "aggregate_weighted": 100.0 * extra / base if base else 0.0,
        "aggregate_mean": sum(per.values()) / len(per) if per else 0.0,
    }


# --- adapter file ----------------------------------------------------------
# b"LORA", u32 header length, UTF-8 JSON header, then A's rows and B's rows.
# Each row is its codes as ``bits``-wide two's complement, LSB first, padded
# to a whole byte.

LORA_MAGIC = b"LORA"
_LEN = struct.Struct("<I")


def pack_signed_row(codes, bits) -> bytes:
    c = np.asarray(codes, dtype=np.int64) & ((1 << bits) - 1)
    bitmat = ((c[:, None] >> np.arange(bits)) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bitmat, bitorder="little").tobytes()


def unpack_signed_row(raw: bytes, count, bits) -> np.ndarray:
    bitv = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[: count * bits]
    u = (bitv.reshape(count, bits).astype(np.int64) << np.arange(bits)).sum(axis=1)
    return np.where(u >= 1 << (bits - 1), u - (1 << bits), u)


def row_bytes(count, bits):
    return (count * bits + 7) // 8


def dump_adapter(ad: LoraAdapter) -> bytes:
    header = json.dumps({
        "rank": ad.rank, "d_in": ad.d_in, "d_out": ad.d_out, "bits": ad.bits,
        "scale_a": ad.scale_a, "scale_b": ad.scale_b, "alpha": ad.alpha,
    }, sort_keys=True).encode()
    body = b"".join(pack_signed_row(row, ad.bits) for row in ad.A)
    body += b"".join(pack_signed_row(row, ad.bits) for row in ad.B)
    return LORA_MAGIC + _LEN.pack(len(header)) + header + body


def load_adapter_bytes(raw: bytes) -> LoraAdapter:
    if raw[:4] != LORA_MAGIC:
        raise CorruptionError("not an adapter file")
    (hlen,) = _LEN.unpack_from(raw, 4)
    try:
        h = json.loads(raw[8:8 + hlen])
        r, d_in, d_out, bits = int(h["rank"]), int(h["d_in"]), int(h["d_out"]), int(h["bits"])
    except (ValueError, KeyError) as exc:
        raise CorruptionError(f"bad adapter header: {exc}") from None
    pos = 8 + hlen
    ra, rb = row_bytes(r, bits), row_bytes(d_out, bits)
    if len(raw) != pos + d_in * ra + r * rb:
        raise CorruptionError("adapter payload size does not match its header")
    A = np.stack([unpack_signed_row(raw[pos + i * ra: pos + (i + 1) * ra], r, bits) for i in range(d_in)]) \
        if d_in else np.zeros((0, r), np.int64)
    pos += d_in * ra
    B = np.stack([unpack_signed_row(raw[pos + i * rb: pos + (i + 1) * rb], d_out, bits) for i in range(r)])
    return LoraAdapter(A, B, float(h["scale_a"]), float(h["scale_b"]), float(h["alpha"]), bits)


def save_adapter(path, ad: LoraAdapter):
    Path(path).write_bytes(dump_adapter(ad))


def load_adapter(path) -> LoraAdapter:
    return load_adapter_bytes(Path(path).read_bytes())
