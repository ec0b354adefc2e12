"""Partition/pipeline scheduling and a toy-scale functional decode loop.

Only the linear projections run on the ternary datapath. Norms, attention
and softmax run in float64, standing in for the auxiliary arithmetic unit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .biroma import ArrayGeometry, map_tensors, read_tensor
from .engine import project_readout
from .errors import InvariantError, ValidationError
from .kvcache import READ, WRITE, AccessStats, AccessTrace, Convention, KvConfig, apply_policy, generate_trace
from .lora import LoraAdapter, apply_adapter, quantize_adapter
from .ternary import TernaryTensor, quantize_activations, quantize_weights_ternary
from .trimla import DEFAULT_DEPTH, EventLedger, OverflowPolicy, merge_ledgers

LAYER_PROJECTIONS = ("Query", "Key", "Value", "Output", "Gate", "Up", "Down")


# --- partitions and pipeline ----------------------------------------------

@dataclass(frozen=True)
class PartitionPlan:
    partitions: int
    layers_per_partition: int
    assignment: tuple  # layer index -> partition index

    def layers_of(self, part):
        return [l for l, p in enumerate(self.assignment) if p == part]


def build_partition_plan(layers, partitions) -> PartitionPlan:
    if layers < 1 or partitions < 1:
        raise ValidationError("layers and partitions must be positive")
    if layers % partitions:
        raise ValidationError(f"{layers} layers do not divide into {partitions} partitions")
    per = layers // partitions
    return PartitionPlan(partitions, per, tuple(l // per for l in range(layers)))


@dataclass
class PipelineSchedule:
    grid: list  # grid[step][partition] -> batch id or None
    partitions: int
    batches: int
    fill_steps: int
    passes: list = field(default_factory=list)  # (batch, start_step) of every forward pass begun

    @property
    def steps(self):
        return len(self.grid)

    def _busy(self, rows):
        return sum(b is not None for row in rows for b in row)

    @property
    def utilization(self):
        if not self.grid:
            return 0.0
        return self._busy(self.grid) / (self.steps * self.partitions)

    @property
    def steady_state_utilization(self):
        window = self.grid[self.fill_steps:]
        if not window:
            return 0.0
        return self._busy(window) / (len(window) * self.partitions)


def simulate_pipeline(plan: PartitionPlan, batches, steps) -> PipelineSchedule:
    """Lockstep pipeline: each step every occupied partition hands its batch on.

    A batch leaving the last partition rejoins the queue for partition 0 (its
    next token depends on the token it just produced). Partition 0 admits the
    head of the queue each step.
    """
    if batches < 1:
        raise ValidationError("need at least one batch")
    if steps < 0:
        raise ValidationError("steps must be nonnegative")
    P = plan.partitions
    stage = [None] * P
    queue = list(range(batches))
    grid, passes = [], []
    for t in range(steps):
        nxt = [None] * P
        for p in range(P - 1, -1, -1):
            b = stage[p]
            if b is None:
                continue
            if p + 1 < P:
                nxt[p + 1] = b
            else:
                queue.append(b)
        if queue:
            nxt[0] = queue.pop(0)
            passes.append((nxt[0], t))
        stage = nxt
        grid.append(tuple(stage))
    return PipelineSchedule(grid, P, batches, min(batches, P) - 1, passes)


# --- toy model -------------------------------------------------------------

@dataclass(frozen=True)
class ToyConfig:
    layers: int = 2
    hidden: int = 16
    heads: int = 2
    kv_heads: int = 1
    ffn: int = 32
    vocab: int = 32
    act_bits: int = 8
    depth: int = DEFAULT_DEPTH
    policy: OverflowPolicy = OverflowPolicy.SATURATE
    geometry: ArrayGeometry = ArrayGeometry(rows=64, cols=64)

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "kv_heads", "ffn", "vocab"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.hidden % self.heads or self.heads % self.kv_heads:
            raise ValidationError("hidden must divide by heads and heads by kv_heads")

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @property
    def kv_dim(self):
        return self.kv_heads * self.head_dim

    def shapes(self):
        h, kv, f = self.hidden, self.kv_dim, self.ffn
        return {"Query": (h, h), "Key": (h, kv), "Value": (h, kv), "Output": (h, h),
                "Gate": (h, f), "Up": (h, f), "Down": (f, h)}


@dataclass
class ToyModel:
    config: ToyConfig
    embed: np.ndarray
    layers: list  # per layer: {projection: TernaryTensor}
    lm_head: TernaryTensor
    adapters: dict = field(default_factory=dict)  # (layer, projection) -> LoraAdapter
    _readout: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        named = [(f"L{i}.{p}", t) for i, layer in enumerate(self.layers) for p, t in layer.items()]
        named.append(("lm_head", self.lm_head))
        self.weight_map = map_tensors(named, self.config.geometry)
        # ROM readout is deterministic, so each tensor is read back once
        self._readout = {tid: read_tensor(self.weight_map, tid) for tid, _ in named}
        self._scale = {tid: t.scale for tid, t in named}


def make_toy_model(cfg: ToyConfig = ToyConfig(), seed=0, zero=False, adapter_rank=0,
                   adapter_place=("Value", "Output", "Down")) -> ToyModel:
    """Random ternary toy model from numpy PCG64 draws (or all zeros)."""
    rng = np.random.default_rng(seed)

    def tern(shape):
        if zero:
            return TernaryTensor(np.zeros(shape, np.int8), 0.0)
        return quantize_weights_ternary(rng.standard_normal(shape))

    embed = np.zeros((cfg.vocab, cfg.hidden)) if zero else rng.standard_normal((cfg.vocab, cfg.hidden))
    layers = [{p: tern(s) for p, s in cfg.shapes().items()} for _ in range(cfg.layers)]
    lm_head = tern((cfg.hidden, cfg.vocab))
    adapters = {}
    if adapter_rank:
        shapes = cfg.shapes()
        for i in range(cfg.layers):
            for p in adapter_place:
                d_in, d_out = shapes[p]
                A = rng.standard_normal((d_in, adapter_rank)) * 0.1
                B = rng.standard_normal((adapter_rank, d_out)) * 0.1
                adapters[(i, p)] = quantize_adapter(A, B)
    return ToyModel(cfg, embed, layers, lm_head, adapters)


class KvRecorder:
    """Per-layer KV-cache access log at token granularity."""

    def __init__(self, layers):
        self.events = [[] for _ in range(layers)]

    def write(self, layer, token, step):
        self.events[layer].append((step, token, WRITE))

    def read(self, layer, tokens, step):
        self.events[layer].extend((step, t, READ) for t in tokens)

    def trace(self, seq_len, prompt_len, k, convention) -> AccessTrace:
        first = self.events[0]
        for i, ev in enumerate(self.events[1:], 1):
            if ev != first:
                raise InvariantError(f"layer {i} KV accesses differ from layer 0")
        arr = np.array(first, dtype=np.int64).reshape(-1, 3)
        tok = arr[:, 1]
        return AccessTrace(arr[:, 0], tok, arr[:, 2].astype(np.int8),
                           np.where(tok < k, 0, 1).astype(np.int8), seq_len, prompt_len, Convention(convention))


@dataclass
class ToyModelState:
    tokens: list = field(default_factory=list)  # tokens whose K/V are cached, by position
    keys: list = field(default_factory=list)  # per layer: list of (kv_heads, head_dim)
    values: list = field(default_factory=list)
    step: int = 0
    ledgers: list = field(default_factory=list)

    @classmethod
    def empty(cls, layers):
        return cls([], [[] for _ in range(layers)], [[] for _ in range(layers)])

    def check(self):
        for layer_k, layer_v in zip(self.keys, self.values):
            if len(layer_k) != len(self.tokens) or len(layer_v) != len(self.tokens):
                raise InvariantError("KV length differs from cached position count")


def rmsnorm(x, eps=1e-6):
    return x / np.sqrt(np.mean(x * x) + eps)


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def silu(x):
    return x / (1.0 + np.exp(-x))


def _linear(model: ToyModel, tid, x, state: ToyModelState, adapter: LoraAdapter | None = None):
    cfg = model.config
    a = quantize_activations(x, cfg.act_bits)
    r = project_readout(a, model._readout[tid], model._scale[tid], cfg.depth, cfg.policy,
                        fan_in=cfg.geometry.trimlas)
    state.ledgers.append(r.ledger)
    out = r.dequantized
    if adapter is not None:
        out = apply_adapter(quantize_activations(x, 8), adapter, out)
    return out


def _forward(model: ToyModel, token, state: ToyModelState, recorder: KvRecorder, step, read_cache,
             read_self):
    """Run one position; cache its K/V and return logits.

    ``read_cache`` lists the cached positions fetched from the KV store;
    ``read_self`` additionally reads the just-written entry back from the store.
    """
    cfg = model.config
    hd, group = cfg.head_dim, cfg.heads // cfg.kv_heads
    pos = len(state.tokens)
    x = model.embed[token].astype(np.float64)
    for li, W in enumerate(model.layers):
        h = rmsnorm(x)
        q = _linear(model, f"L{li}.Query", h, state).reshape(cfg.heads, hd)
        k = _linear(model, f"L{li}.Key", h, state).reshape(cfg.kv_heads, hd)
        v = _linear(model, f"L{li}.Value", h, state, model.adapters.get((li, "Value"))).reshape(cfg.kv_heads, hd)
        state.keys[li].append(k)
        state.values[li].append(v)
        recorder.write(li, pos, step)
        ctx = list(read_cache) + [pos]
        recorder.read(li, list(read_cache) + ([pos] if read_self else []), step)
        K = np.stack([state.keys[li][j] for j in ctx])  # (ctx, kv_heads, hd)
        V = np.stack([state.values[li][j] for j in ctx])
        att = np.empty((cfg.heads, hd))
        for head in range(cfg.heads):
            kvh = head // group
            w = softmax(K[:, kvh, :] @ q[head] / math.sqrt(hd))
            att[head] = w @ V[:, kvh, :]
        x = x + _linear(model, f"L{li}.Output", att.reshape(-1), state, model.adapters.get((li, "Output")))
        h2 = rmsnorm(x)
        gate = _linear(model, f"L{li}.Gate", h2, state)
        up = _linear(model, f"L{li}.Up", h2, state)
        x = x + _linear(model, f"L{li}.Down", silu(gate) * up, state, model.adapters.get((li, "Down")))
    state.tokens.append(token)
    return _linear(model, "lm_head", rmsnorm(x), state)


def prefill(model: ToyModel, prompt, state: ToyModelState, recorder: KvRecorder,
            convention=Convention.DECODE) -> int:
    """Process the prompt at step 0 and return the first generated token."""
    inclusive = Convention(convention) is Convention.INCLUSIVE
    if not prompt:
        raise ValidationError("prompt must hold at least one token")
    logits = None
    for tok in prompt:
        # prompt positions attend to each other from freshly computed K/V;
        # under the inclusive convention each prompt entry is read back once
        mark = len(state.tokens)
        logits = _forward(model, tok, state, _Muted(recorder), 0,
                          read_cache=range(mark), read_self=False)
    if inclusive:
        for li in range(model.config.layers):
            recorder.read(li, range(len(prompt)), 0)
    state.step = 0
    return int(np.argmax(logits))


class _Muted:
    """Recorder proxy that keeps writes but drops intra-prompt reads."""

    def __init__(self, inner):
        self.inner = inner

    def write(self, layer, token, step):
        self.inner.write(layer, token, step)

    def read(self, layer, tokens, step):
        pass


def decode_step(model: ToyModel, token, state: ToyModelState, recorder: KvRecorder,
                convention=Convention.DECODE) -> int:
    """Feed one token, cache its K/V, return the argmax next token (ties -> lowest id)."""
    if not state.tokens:
        raise ValidationError("state is empty; run prefill first")
    if not 0 <= token < model.config.vocab:
        raise ValidationError(f"token {token} outside the vocabulary")
    inclusive = Convention(convention) is Convention.INCLUSIVE
    state.step += 1
    logits = _forward(model, token, state, recorder, state.step,
                      read_cache=range(len(state.tokens)), read_self=inclusive)
    state.check()
    return int(np.argmax(logits))


@dataclass(frozen=True)
class SequenceConfig:
    seq_len: int = 8
    prompt_len: int = 1
    onchip_tokens: int = 2
    seed: int = 0
    convention: Convention = Convention.DECODE
    prompt: tuple = ()

    def __post_init__(self):
        KvConfig(self.seq_len, self.prompt_len, self.onchip_tokens)
        if self.prompt and len(self.prompt) != self.prompt_len:
            raise ValidationError("explicit prompt length must equal prompt_len")


@dataclass
class SequenceResult:
    tokens: list
    stats: AccessStats
    ledger: EventLedger
    trace: AccessTrace
    state: ToyModelState = field(repr=False, default=None)


def run_sequence(model: ToyModel, sc: SequenceConfig) -> SequenceResult:
    """Prefill then decode until ``seq_len`` positions are cached."""
    cfg = model.config
    if sc.prompt:
        prompt = [int(t) for t in sc.prompt]
    else:
        prompt = [int(t) for t in np.random.default_rng(sc.seed).integers(0, cfg.vocab, sc.prompt_len)]
    state = ToyModelState.empty(cfg.layers)
    rec = KvRecorder(cfg.layers)
    tok = prefill(model, prompt, state, rec, sc.convention)
    emitted = [tok]
    for _ in range(sc.seq_len - sc.prompt_len):
        tok = decode_step(model, tok, state, rec, sc.convention)
        emitted.append(tok)
    state.check()
    trace = rec.trace(sc.seq_len, sc.prompt_len, sc.onchip_tokens, sc.convention)
    stats = apply_policy(trace, sc.onchip_tokens)
    return SequenceResult(emitted, stats, merge_ledgers(state.ledgers), trace, state)


def analytic_stats(sc: SequenceConfig) -> AccessStats:
    t = generate_trace(KvConfig(sc.seq_len, sc.prompt_len, sc.onchip_tokens), sc.convention)
    return apply_policy(t, sc.onchip_tokens)
