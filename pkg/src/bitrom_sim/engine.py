"""Ternary projection layers run through the mapped array and TriMLA datapath."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .biroma import ArrayGeometry, map_tensor, read_tensor
from .errors import ValidationError
from .ternary import ActivationVector, TernaryTensor
from .trimla import (
    DEFAULT_DEPTH,
    DEFAULT_FAN_IN,
    DEFAULT_WIDTH,
    EventLedger,
    OverflowPolicy,
    run_columns,
)


@dataclass
class ProjectionResult:
    outputs: np.ndarray
    ledger: EventLedger
    dequantized: np.ndarray
    overflow_per_channel: np.ndarray = field(repr=False, default=None)

    @property
    def overflowed(self):
        return self.ledger.overflow_events > 0

    def overflow_report(self, reference=None):
        """Which output channels overflowed and, given the oracle, which diverged."""
        flagged = np.flatnonzero(self.overflow_per_channel) if self.overflow_per_channel is not None else []
        report = {"overflow_events": self.ledger.overflow_events,
                  "flagged_channels": [int(c) for c in flagged]}
        if reference is not None:
            diverged = np.flatnonzero(np.asarray(reference) != self.outputs)
            report["diverged_channels"] = [int(c) for c in diverged]
            report["unflagged_divergence"] = sorted(set(report["diverged_channels"]) - set(report["flagged_channels"]))
        return report


def _check_dims(a: ActivationVector, t: TernaryTensor):
    if len(a) != t.rows:
        raise ValidationError(f"activation length {len(a)} != input channels {t.rows}")


def reference_gemm(a: ActivationVector, t: TernaryTensor) -> np.ndarray:
    """Plain integer matrix-vector product with no datapath modeling.

    int64 is exact while rows * max|a| stays below 2**62; beyond that the
    sum falls back to Python integers.
    """
    _check_dims(a, t)
    bound = t.rows * (int(np.abs(a.values).max()) if len(a) else 0)
    if bound < 2**62:
        return a.values.astype(np.int64) @ t.trits.astype(np.int64)
    acts = [int(v) for v in a.values]
    trits = t.trits.tolist()
    out = []
    for j in range(t.cols):
        s = 0
        for i in range(t.rows):
            s += trits[i][j] * acts[i]
        out.append(s)
    return np.array(out, dtype=object)


def dequantize(outputs, wscale, ascale) -> np.ndarray:
    """Integer outputs (or a ProjectionResult) times both scales."""
    if isinstance(outputs, ProjectionResult):
        outputs = outputs.outputs
    if wscale < 0 or ascale < 0:
        raise ValidationError("scales must be nonnegative")
    return np.asarray(outputs, dtype=np.float64) * wscale * ascale


def project(a: ActivationVector, t: TernaryTensor, g: ArrayGeometry = ArrayGeometry(), depth=DEFAULT_DEPTH,
            policy=OverflowPolicy.SATURATE, fan_in=DEFAULT_FAN_IN, width=DEFAULT_WIDTH) -> ProjectionResult:
    """Program ``t`` into ROM macros, read it back, and run every output channel."""
    _check_dims(a, t)
    wm = map_tensor(t, g)
    weights = read_tensor(wm)
    return project_readout(a, weights, t.scale, depth, policy, fan_in, width)


def project_readout(a: ActivationVector, weights, wscale, depth=DEFAULT_DEPTH, policy=OverflowPolicy.SATURATE,
                    fan_in=DEFAULT_FAN_IN, width=DEFAULT_WIDTH) -> ProjectionResult:
    """Datapath half of :func:`project` for weights already read from the array."""
    weights = np.asarray(weights)
    outputs, led, ovf = run_columns(weights.T, a.values, a.bits, policy, depth, fan_in, width)
    return ProjectionResult(outputs, led, dequantize(outputs, wscale, a.scale), ovf)


# --- golden layer fixtures -------------------------------------------------

def layer_fixture(a: ActivationVector, t: TernaryTensor, expected=None) -> dict:
    if expected is None:
        expected = reference_gemm(a, t)
    return {
        "rows": t.rows,
        "cols": t.cols,
        "weights": t.trits.tolist(),
        "weight_scale": t.scale,
        "activation_bits": a.bits,
        "activations": [int(v) for v in a.values],
        "activation_scale": a.scale,
        "expected": [int(v) for v in expected],
    }


def load_layer_fixture(d: dict):
    t = TernaryTensor(np.array(d["weights"], dtype=np.int8).reshape(d["rows"], d["cols"]), d["weight_scale"])
    a = ActivationVector(np.array(d["activations"], dtype=np.int64), d["activation_bits"], d["activation_scale"])
    return a, t, np.array(d["expected"], dtype=np.int64)


def save_layer_fixtures(path, fixtures):
    Path(path).write_text(json.dumps(fixtures, indent=1, sort_keys=True) + "\n")


def load_layer_fixtures(path):
    return [load_layer_fixture(d) for d in json.loads(Path(path).read_text())]
