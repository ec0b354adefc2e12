"""Tri-mode local accumulator (TriMLA) and the shared adder tree.

Each weight trit selects SKIP, ADD or SUB for one local accumulation step.
An output channel's input channels are split into groups of ``depth``; every
group is accumulated by one narrow local accumulator, and the group results
are summed once by the adder tree. 8-bit activations are fed as two 4-bit
nibbles (low unsigned, high signed) and recombined as ``16*high + low``.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .errors import InvariantError, ValidationError
from .ternary import signed_range

DEFAULT_WIDTH = 8
DEFAULT_DEPTH = 16  # 8 columns x 2 sides per wordline
DEFAULT_FAN_IN = 128  # 1024 columns / 8 columns per TriMLA
SURVEY_CHUNK = 2048


class TrimlaMode(enum.Enum):
    SKIP = "SKIP"
    ADD = "ADD"
    SUB = "SUB"


class OverflowPolicy(enum.Enum):
    SATURATE = "saturate"
    WRAP_AND_FLAG = "wrap"


_MODE_OF = {0: TrimlaMode.SKIP, 1: TrimlaMode.ADD, -1: TrimlaMode.SUB}

# Comparator outputs (MSB = weight is nonzero / enable, LSB = subtract) per trit.
TRUTH_TABLE = {0: (0, 0), 1: (1, 0), -1: (1, 1)}


def decode_mode(w) -> TrimlaMode:
    try:
        return _MODE_OF[int(w)]
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"not a trit: {w!r}") from None


@dataclass
class EventLedger:
    mac_steps: int = 0
    skips: int = 0
    adds: int = 0
    subs: int = 0
    adder_tree_passes: int = 0
    bitserial_cycles: int = 0
    overflow_events: int = 0

    def merge(self, other: "EventLedger") -> "EventLedger":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def __add__(self, other):
        return EventLedger(**asdict(self)).merge(other)

    def check(self):
        if self.skips + self.adds + self.subs != self.mac_steps:
            raise InvariantError(f"ledger does not conserve steps: {self}")
        return self

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: int(d.get(f.name, 0)) for f in fields(cls)})


def merge_ledgers(ledgers) -> EventLedger:
    total = EventLedger()
    for led in ledgers:
        total.merge(led)
    return total


@dataclass
class LocalAccumulator:
    width_bits: int = DEFAULT_WIDTH
    value: int = 0
    overflow_policy: OverflowPolicy = OverflowPolicy.SATURATE
    overflowed: bool = False

    @property
    def bounds(self):
        return signed_range(self.width_bits)


def accumulate_step(acc: LocalAccumulator, mode: TrimlaMode, a: int, ledger: EventLedger) -> LocalAccumulator:
    ledger.mac_steps += 1
    if mode is TrimlaMode.SKIP:
        ledger.skips += 1
        return acc
    if mode is TrimlaMode.ADD:
        ledger.adds += 1
        v = acc.value + int(a)
    else:
        ledger.subs += 1
        v = acc.value - int(a)
    lo, hi = acc.bounds
    if v < lo or v > hi:
        acc.overflowed = True
        ledger.overflow_events += 1
        if acc.overflow_policy is OverflowPolicy.SATURATE:
            v = min(max(v, lo), hi)
        else:
            v = (v - lo) % (1 << acc.width_bits) + lo
    acc.value = v
    return acc


@dataclass(frozen=True)
class AdderTreeConfig:
    fan_in: int = DEFAULT_FAN_IN

    def __post_init__(self):
        if self.fan_in < 1:
            raise ValidationError("adder tree fan_in must be >= 1")


def tree_passes(channel_len, depth, fan_in):
    """Adder-tree passes needed to finish one output channel."""
    groups = math.ceil(channel_len / depth)
    return max(1, math.ceil(groups / fan_in))


def global_accumulate(locals_, fan_in=DEFAULT_FAN_IN, ledger: EventLedger | None = None) -> int:
    vals = [int(v) for v in locals_]
    if len(vals) != fan_in:
        raise ValidationError(f"adder tree takes {fan_in} inputs, got {len(vals)}")
    if ledger is not None:
        ledger.adder_tree_passes += 1
    return sum(vals)


def _as_trits(w):
    w = np.asarray(w, dtype=np.int64).reshape(-1)
    if w.size and (w.min() < -1 or w.max() > 1):
        raise ValidationError("weights must be trits")
    return w.astype(np.int8)


def _as_acts(a, bits):
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    lo, hi = signed_range(bits)
    if a.size and (a.min() < lo or a.max() > hi):
        raise ValidationError(f"activations exceed the {bits}-bit signed range")
    return a


def _check_cfg(depth, width, fan_in):
    if depth < 1 or fan_in < 1:
        raise ValidationError("depth and fan_in must be >= 1")
    if not 2 <= width <= 62:
        raise ValidationError("accumulator width must be in 2..62")


def run_columns(w_out_major, a, bits=4, policy=OverflowPolicy.SATURATE, depth=DEFAULT_DEPTH,
                fan_in=DEFAULT_FAN_IN, width=DEFAULT_WIDTH):
    """Run every output channel of a (cols, rows) trit matrix through the datapath.

    Returns (outputs, ledger, overflow_events_per_channel). ``bits`` selects
    the direct 4-bit path or two-cycle bit-serial 8-bit processing.
    """
    _check_cfg(depth, width, fan_in)
    policy = OverflowPolicy(policy)
    wrap = policy is OverflowPolicy.WRAP_AND_FLAG
    w = np.ascontiguousarray(w_out_major, dtype=np.int8)
    cols, rows = w.shape
    a = np.asarray(a, dtype=np.int64)
    if a.size != rows:
        raise ValidationError(f"{a.size} activations for {rows} input channels")
    led = EventLedger()
    if bits == 4:
        cycles = [(a, 1)]
    elif bits == 8:
        cycles = [(a & 0xF, 1), (a >> 4, 16)]
    else:
        raise ValidationError(f"activation bits must be 4 or 8, got {bits}")
    outputs = np.zeros(cols, dtype=np.int64)
    overflow = np.zeros(cols, dtype=np.int64)
    for nibble, weight in cycles:
        out, ovf, adds, subs, skips = kernels.trimla_matvec(w, nibble, depth, width, wrap)
        outputs += weight * np.asarray(out, dtype=np.int64)
        overflow += ovf
        led.adds += int(adds)
        led.subs += int(subs)
        led.skips += int(skips)
        led.mac_steps += w.size
        led.bitserial_cycles += cols
    led.overflow_events = int(overflow.sum())
    led.adder_tree_passes = cols * tree_passes(rows, depth, fan_in)
    return outputs, led, overflow


def mac_channel(w, a, policy=OverflowPolicy.SATURATE, depth=DEFAULT_DEPTH, fan_in=DEFAULT_FAN_IN,
                width=DEFAULT_WIDTH):
    """One output channel with 4-bit activations: returns (sum, ledger)."""
    w = _as_trits(w)
    a = _as_acts(a, 4)
    if w.size != a.size:
        raise ValidationError(f"length mismatch: {w.size} weights, {a.size} activations")
    out, led, _ = run_columns(w.reshape(1, -1), a, 4, policy, depth, fan_in, width)
    return int(out[0]), led


def mac_bitserial_8b(w, a, policy=OverflowPolicy.SATURATE, depth=DEFAULT_DEPTH, fan_in=DEFAULT_FAN_IN,
                     width=DEFAULT_WIDTH):
    """One output channel with 8-bit activations in two nibble cycles."""
    w = _as_trits(w)
    a = _as_acts(a, 8)
    if w.size != a.size:
        raise ValidationError(f"length mismatch: {w.size} weights, {a.size} activations")
    out, led, _ = run_columns(w.reshape(1, -1), a, 8, policy, depth, fan_in, width)
    return int(out[0]), led


def mac_channel_stepwise(w, a, policy=OverflowPolicy.SATURATE, depth=DEFAULT_DEPTH, fan_in=DEFAULT_FAN_IN,
                         width=DEFAULT_WIDTH):
    """Scalar reference of :func:`mac_channel` built from accumulate_step/global_accumulate."""
    w = _as_trits(w)
    a = np.asarray(a, dtype=np.int64)
    led = EventLedger()
    policy = OverflowPolicy(policy)
    locals_ = []
    for g0 in range(0, w.size, depth):
        acc = LocalAccumulator(width, 0, policy)
        for wi, ai in zip(w[g0:g0 + depth], a[g0:g0 + depth]):
            accumulate_step(acc, decode_mode(wi), int(ai), led)
        locals_.append(acc.value)
    locals_ += [0] * (tree_passes(w.size, depth, fan_in) * fan_in - len(locals_))
    total = 0
    for t0 in range(0, len(locals_), fan_in):
        total += global_accumulate(locals_[t0:t0 + fan_in], fan_in, led)
    led.bitserial_cycles += 1
    return total, led


def overflow_survey(depth, act_bits=4, nonzero_prob=0.5, trials=100_000, seed=0, width=DEFAULT_WIDTH) -> float:
    """Fraction of single local-accumulator passes that overflow.

    Weights are i.i.d.: 0 with probability ``1 - nonzero_prob``, otherwise +1
    or -1 with equal odds. Activations are uniform over the symmetric range the
    activation quantizer emits. 8-bit activations run as two nibble cycles and
    a pass counts as overflowed if either cycle overflows. Draws come from
    numpy's PCG64 generator seeded with ``seed``, in fixed chunks.
    """
    if trials <= 0:
        raise ValidationError("trials must be positive")
    if depth < 1:
        raise ValidationError("depth must be >= 1")
    if not 0 <= nonzero_prob <= 1:
        raise ValidationError("nonzero_prob must lie in [0, 1]")
    if act_bits not in (4, 8):
        raise ValidationError("act_bits must be 4 or 8")
    rng = np.random.default_rng(seed)
    qmax = (1 << (act_bits - 1)) - 1
    lo, hi = signed_range(width)
    hits = 0
    done = 0
    while done < trials:
        n = min(SURVEY_CHUNK, trials - done)
        u = rng.random((n, depth))
        w = np.where(u < nonzero_prob / 2, -1, np.where(u < nonzero_prob, 1, 0)).astype(np.int8)
        a = rng.integers(-qmax, qmax + 1, size=(n, depth), dtype=np.int64)
        if act_bits == 4:
            flags = kernels.prefix_overflow(w, a, lo, hi)
        else:
            flags = kernels.prefix_overflow(w, a & 0xF, lo, hi) | kernels.prefix_overflow(w, a >> 4, lo, hi)
        hits += int(np.count_nonzero(flags))
        done += n
    return hits / trials
