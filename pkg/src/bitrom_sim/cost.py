"""Relative event-energy accounting (arbitrary units)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields

from .errors import ValidationError
from .kvcache import AccessStats
from .ternary import parse_kv_text
from .trimla import DEFAULT_FAN_IN, EventLedger


@dataclass(frozen=True)
class CostParams:
    """Per-event energies. Defaults are a relative profile, not silicon data:
    a skipped step costs a tenth of an add, a DRAM access fifty eDRAM accesses."""

    add: float = 1.0
    sub: float = 1.0
    skip: float = 0.1
    adder_tree_pass_per_fanin: float = 0.5
    edram_read: float = 2.0
    edram_write: float = 2.0
    dram_read: float = 100.0
    dram_write: float = 100.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValidationError(f"{f.name} energy must be nonnegative")
        if self.skip > self.add:
            raise ValidationError("skip energy must not exceed add energy")

    def scaled(self, factor):
        return CostParams(**{k: v * factor for k, v in asdict(self).items()})

    @classmethod
    def from_text(cls, text):
        d = parse_kv_text(text)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown cost keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**{k: float(v) for k, v in d.items()})
        except ValueError as exc:
            raise ValidationError(f"bad cost value: {exc}") from None


def energy_report(ledger: EventLedger, stats: AccessStats | None = None, p: CostParams = CostParams(),
                  fan_in=DEFAULT_FAN_IN, bytes_per_event=1.0) -> dict:
    e = {
        "add": ledger.adds * p.add,
        "sub": ledger.subs * p.sub,
        "skip": ledger.skips * p.skip,
        "adder_tree": ledger.adder_tree_passes * p.adder_tree_pass_per_fanin * fan_in,
    }
    e["datapath"] = e["add"] + e["sub"] + e["skip"]
    e["compute"] = e["datapath"] + e["adder_tree"]
    if stats is not None:
        mem = dram_energy(stats, bytes_per_event, p)
        e.update({k: mem[k] for k in ("edram_read", "edram_write", "dram_read", "dram_write")})
        e["memory"] = mem["total"]
    else:
        e["memory"] = 0.0
    e["total"] = e["compute"] + e["memory"]
    e["sparsity_savings"] = (p.add - p.skip) * ledger.skips
    return e


def dram_energy(stats: AccessStats, bytes_per_event=1.0, p: CostParams = CostParams()) -> dict:
    if bytes_per_event < 0:
        raise ValidationError("bytes_per_event must be nonnegative")
    b = bytes_per_event
    out = {
        "edram_read": stats.onchip_reads * b * p.edram_read,
        "edram_write": stats.onchip_writes * b * p.edram_write,
        "dram_read": stats.external_reads * b * p.dram_read,
        "dram_write": stats.external_writes * b * p.dram_write,
    }
    out["onchip"] = out["edram_read"] + out["edram_write"]
    out["external"] = out["dram_read"] + out["dram_write"]
    out["total"] = out["onchip"] + out["external"]
    base_read = stats.baseline_reads * b * p.dram_read
    out["external_read_saving"] = 0.0 if base_read == 0 else 1.0 - out["dram_read"] / base_read
    return out


def compare_accumulation_schemes(ledger: EventLedger, channel_len, fan_in=DEFAULT_FAN_IN,
                                 p: CostParams = CostParams()) -> dict:
    """Adder-tree energy of local-then-global accumulation vs a tree pass per MAC step.

    The baseline sums through the tree on every one of the ``channel_len``
    steps of an output channel; the proposed flow runs the tree once.
    """
    if channel_len < 1:
        raise ValidationError("channel_len must be >= 1")
    per_pass = p.adder_tree_pass_per_fanin * fan_in
    proposed = ledger.adder_tree_passes
    baseline = proposed * channel_len
    e = energy_report(ledger, None, p, fan_in)
    return {
        "proposed_tree_passes": proposed,
        "baseline_tree_passes": baseline,
        "proposed_tree_energy": proposed * per_pass,
        "baseline_tree_energy": baseline * per_pass,
        "tree_energy_ratio": 1.0 / channel_len,
        "sparsity_savings": e["sparsity_savings"],
        "datapath_energy": e["datapath"],
    }


def breakdown_csv(breakdown: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "energy"])
    for k in sorted(breakdown):
        w.writerow([k, repr(float(breakdown[k]))])
    return buf.getvalue()


def breakdown_json(breakdown: dict) -> str:
    return json.dumps(breakdown, sort_keys=True, indent=2)
