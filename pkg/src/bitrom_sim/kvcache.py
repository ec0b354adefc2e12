"""Decode-refresh eDRAM model of the KV-cache.

Events are per token: the layer/head/element volume of a token's KV entry is
applied as a byte multiplier, never as extra events. The first ``k`` tokens
live on-die for the whole sequence; everything else goes to external DRAM.

Two read-counting conventions are supported:

``decode`` (default)
    The prompt is written at step 0 with no cache reads. Decode step
    ``t = 1..n-p`` writes one new token and reads every token written at an
    earlier step; the new token's own K/V is used straight from the
    projection. Token ``i`` is read ``n-p`` times if it is a prompt token and
    ``n-1-i`` times otherwise.
``inclusive``
    Every step, prefill included, also reads back the entries it just wrote.
    Token ``i`` is then read ``n-p+1`` (prompt) or ``n-i`` times.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

READ, WRITE = 0, 1
ONCHIP, EXTERNAL = 0, 1
TREF_MS = 64.0


class Convention(enum.Enum):
    DECODE = "decode"
    INCLUSIVE = "inclusive"


@dataclass(frozen=True)
class KvConfig:
    seq_len: int
    prompt_len: int = 1
    onchip_tokens: int = 0
    layers: int = 1
    kv_heads: int = 1
    head_dim: int = 1
    element_bits: int = 16
    batches: int = 1
    tbt_ms: float = 20.0
    tref_ms: float = TREF_MS

    def __post_init__(self):
        for name in ("seq_len", "prompt_len", "layers", "kv_heads", "head_dim", "element_bits", "batches"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.prompt_len > self.seq_len:
            raise ValidationError("prompt_len must not exceed seq_len")
        if not 0 <= self.onchip_tokens <= self.seq_len:
            raise ValidationError("onchip_tokens must lie in 0..seq_len")
        if not self.tbt_ms > 0 or not self.tref_ms > 0:
            raise ValidationError("tbt_ms and tref_ms must be positive")

    @property
    def decode_steps(self):
        return self.seq_len - self.prompt_len

    def token_bytes(self):
        """Bytes of K and V for one token across all layers, one batch."""
        return self.layers * 2 * self.kv_heads * self.head_dim * self.element_bits / 8


@dataclass
class AccessTrace:
    step: np.ndarray
    token: np.ndarray
    op: np.ndarray
    location: np.ndarray
    seq_len: int
    prompt_len: int
    convention: Convention = Convention.DECODE

    def __len__(self):
        return self.step.size

    def events(self):
        for s, t, o, loc in zip(self.step.tolist(), self.token.tolist(), self.op.tolist(), self.location.tolist()):
            yield s, t, ("READ", "WRITE")[o], ("ONCHIP", "EXTERNAL")[loc]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"step": s, "token": t, "op": o, "location": loc}, sort_keys=True)
                 for s, t, o, loc in self.events()]
        return "\n".join(lines) + ("\n" if lines else "")

    def reads_per_token(self):
        return np.bincount(self.token[self.op == READ], minlength=self.seq_len)

    def relabel(self, k):
        loc = np.where(self.token < k, ONCHIP, EXTERNAL).astype(np.int8)
        return AccessTrace(self.step, self.token, self.op, loc, self.seq_len, self.prompt_len, self.convention)


@dataclass(frozen=True)
class AccessStats:
    external_reads: int
    external_writes: int
    onchip_reads: int
    onchip_writes: int
    read_reduction: float

    @property
    def baseline_reads(self):
        return self.external_reads + self.onchip_reads

    def to_dict(self):
        return {
            "external_reads": self.external_reads,
            "external_writes": self.external_writes,
            "onchip_reads": self.onchip_reads,
            "onchip_writes": self.onchip_writes,
            "baseline_reads": self.baseline_reads,
            "read_reduction": self.read_reduction,
        }


@dataclass(frozen=True)
class RefreshReport:
    max_gap_ms: dict = field(default_factory=dict)
    violations: tuple = ()
    tbt_ms: float = 0.0
    tref_ms: float = TREF_MS

    @property
    def valid(self):
        return not self.violations


def generate_trace(c: KvConfig, convention=Convention.DECODE) -> AccessTrace:
    convention = Convention(convention)
    n, p = c.seq_len, c.prompt_len
    inclusive = convention is Convention.INCLUSIVE
    steps, tokens, ops = [], [], []

    def emit(step, toks, op):
        steps.append(np.full(toks.size, step, np.int64))
        tokens.append(toks)
        ops.append(np.full(toks.size, op, np.int8))

    prompt = np.arange(p, dtype=np.int64)
    emit(0, prompt, WRITE)
    if inclusive:
        emit(0, prompt, READ)
    for t in range(1, n - p + 1):
        new = p + t - 1
        emit(t, np.array([new], np.int64), WRITE)
        emit(t, np.arange(new + 1 if inclusive else new, dtype=np.int64), READ)
    tok = np.concatenate(tokens)
    loc = np.where(tok < c.onchip_tokens, ONCHIP, EXTERNAL).astype(np.int8)
    return AccessTrace(np.concatenate(steps), tok, np.concatenate(ops), loc, n, p, convention)


def apply_policy(trace: AccessTrace, k) -> AccessStats:
    if not 0 <= k <= trace.seq_len:
        raise ValidationError("k must lie in 0..seq_len")
    onchip = trace.token < k
    reads = trace.op == READ
    writes = ~reads
    ext_r = int(np.count_nonzero(reads & ~onchip))
    on_r = int(np.count_nonzero(reads & onchip))
    total = ext_r + on_r
    return AccessStats(
        external_reads=ext_r,
        external_writes=int(np.count_nonzero(writes & ~onchip)),
        onchip_reads=on_r,
        onchip_writes=int(np.count_nonzero(writes & onchip)),
        read_reduction=0.0 if total == 0 else on_r / total,
    )


def _sum_desc(c, a, b):
    """sum(c - i for i in range(a, b))"""
    m = max(0, b - a)
    return m * c - (m * (a + b - 1)) // 2


def closed_form_stats(n, k, p=1, convention=Convention.DECODE) -> AccessStats:
    """Access counts by arithmetic alone; must equal apply_policy(generate_trace(...))."""
    if not (1 <= p <= n and 0 <= k <= n):
        raise ValidationError("need 1 <= p <= n and 0 <= k <= n")
    inclusive = Convention(convention) is Convention.INCLUSIVE
    prompt_reads = n - p + (1 if inclusive else 0)
    last = n if inclusive else n - 1  # decode token i is read (last - i) times
    total = p * prompt_reads + _sum_desc(last, p, n)
    if k <= p:
        onchip = k * prompt_reads
    else:
        onchip = p * prompt_reads + _sum_desc(last, p, k)
    return AccessStats(
        external_reads=total - onchip,
        external_writes=n - k,
        onchip_reads=onchip,
        onchip_writes=k,
        read_reduction=0.0 if total == 0 else onchip / total,
    )


def quarter_rule_reduction(n, k):
    """Decode convention with a single prompt token: (kn - k(k+1)/2) / (n(n-1)/2)."""
    return (k * n - k * (k + 1) / 2) / (n * (n - 1) / 2)


def reduction_curve(n_values=range(32, 257, 32), k_values=(4, 8, 16, 32, 64), p=1,
                    convention=Convention.DECODE):
    """Rows of (n, k, external_reads, baseline_reads, reduction), sorted, k <= n only."""
    rows = []
    for n in sorted(set(n_values)):
        for k in sorted(set(k_values)):
            if k > n or p > n:
                continue
            s = closed_form_stats(n, k, p, convention)
            rows.append({"n": n, "k": k, "external_reads": s.external_reads,
                         "baseline_reads": s.baseline_reads, "reduction": s.read_reduction})
    return rows


def refresh_check(trace: AccessTrace, c: KvConfig) -> RefreshReport:
    """Longest interval between accesses of each on-chip token, in ms.

    A token that is never accessed again after its write needs no retention
    and reports a zero gap. A violation is any gap not strictly below tREF.
    """
    k = c.onchip_tokens
    sel = trace.token < k
    tok, step = trace.token[sel], trace.step[sel]
    order = np.lexsort((step, tok))
    tok, step = tok[order], step[order]
    gaps = {}
    for t in range(min(k, trace.seq_len)):
        s = step[tok == t]
        g = int(np.diff(s).max()) if s.size > 1 else 0
        gaps[t] = g * c.tbt_ms
    violations = tuple(t for t, g in gaps.items() if g > 0 and not g < c.tref_ms)
    return RefreshReport(gaps, violations, c.tbt_ms, c.tref_ms)


def edram_capacity(c: KvConfig) -> int:
    bits = c.onchip_tokens * c.layers * 2 * c.kv_heads * c.head_dim * c.element_bits * c.batches
    return math.ceil(bits / 8)
