"""Bidirectional ROM array: geometry, weight placement, readout, density and area.

Placement policy. A tensor is flattened output-major (all input channels of
output 0, then output 1, ...). Position ``p`` inside a macro maps to
column ``p // (2*rows)``, row ``(p % (2*rows)) // 2`` and side EVEN/ODD by
parity, so input channels walk down the rows of a column, each row filling
its EVEN side before its ODD side, and consecutive output channels fill
consecutive columns (eight to a TriMLA group). A tensor that does not fit
spills into the following macro.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .ternary import TernaryTensor

BITS_PER_TRIT = 1.58  # nominal information content quoted for ternary weights
REF_NODE_NM = 65.0
REF_BIT_DENSITY = 4967e3  # bits/mm^2 of the 65 nm macro, periphery included
PERIPHERY_FRACTION = 0.048

# Symbolic signal-line levels of the three trit values; not simulated electrically.
SIGNAL_LEVEL = {0: "1/2 VDD", 1: "1/4 VDD", -1: "VSS"}


class Side(enum.IntEnum):
    EVEN = 0
    ODD = 1


@dataclass(frozen=True)
class ArrayGeometry:
    rows: int = 2048
    cols: int = 1024
    trits_per_cell: int = 2
    cols_per_trimla: int = 8

    def __post_init__(self):
        for name in ("rows", "cols", "trits_per_cell", "cols_per_trimla"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.cols % self.cols_per_trimla:
            raise ValidationError("cols must be divisible by cols_per_trimla")
        if self.trits_per_cell > 2:
            raise ValidationError("a cell has at most two sides")

    @property
    def trimlas(self):
        return self.cols // self.cols_per_trimla


@dataclass(frozen=True)
class CellAddress:
    macro: int
    row: int
    col: int
    side: Side


def capacity_trits(g: ArrayGeometry) -> int:
    return g.rows * g.cols * g.trits_per_cell


def _linear_key(g, macro, row, col, side):
    return ((np.asarray(macro, np.int64) * g.rows + row) * g.cols + col) * 2 + side


@dataclass
class Placement:
    tensor_id: str
    shape: tuple
    start_macro: int
    macro: np.ndarray
    row: np.ndarray
    col: np.ndarray
    side: np.ndarray

    def __len__(self):
        return self.macro.size

    def address(self, i) -> CellAddress:
        return CellAddress(int(self.macro[i]), int(self.row[i]), int(self.col[i]), Side(int(self.side[i])))

    def addresses(self):
        for i in range(len(self)):
            yield self.address(i)

    @property
    def macros_used(self):
        return 0 if len(self) == 0 else int(self.macro[-1]) - self.start_macro + 1


@dataclass
class WeightMap:
    """Tensor placements plus the ROM contents they program."""

    geometry: ArrayGeometry
    placements: dict = field(default_factory=dict)
    _keys: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64), repr=False)
    _vals: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8), repr=False)

    def add(self, placement: Placement, trits_in_map_order=None):
        if placement.tensor_id in self.placements:
            raise ValidationError(f"tensor {placement.tensor_id!r} already mapped")
        g = self.geometry
        keys = _linear_key(g, placement.macro, placement.row, placement.col, placement.side)
        vals = np.zeros(keys.size, np.int8) if trits_in_map_order is None else np.asarray(trits_in_map_order, np.int8)
        all_keys = np.concatenate([self._keys, keys])
        order = np.argsort(all_keys, kind="stable")
        all_keys = all_keys[order]
        if all_keys.size > 1 and np.any(all_keys[1:] == all_keys[:-1]):
            raise ValidationError(f"placement of {placement.tensor_id!r} overlaps mapped cells")
        self._keys = all_keys
        self._vals = np.concatenate([self._vals, vals])[order]
        self.placements[placement.tensor_id] = placement

    def next_free_macro(self):
        if not self.placements:
            return 0
        used = [int(p.macro[-1]) for p in self.placements.values() if len(p)]
        return max(used) + 1 if used else 0

    def read_cells(self, keys):
        """Stored trits at the given linear cell keys; unprogrammed cells read 0."""
        keys = np.asarray(keys, np.int64)
        out = np.zeros(keys.shape, np.int8)
        if self._keys.size:
            idx = np.searchsorted(self._keys, keys)
            idx_c = np.minimum(idx, self._keys.size - 1)
            hit = self._keys[idx_c] == keys
            out[hit] = self._vals[idx_c[hit]]
        return out

    def __getitem__(self, tensor_id):
        return self.placements[tensor_id]


def place(shape, g: ArrayGeometry, start_macro=0, tensor_id="w") -> Placement:
    rows, cols = shape
    n = rows * cols
    cap = capacity_trits(g)
    lin = np.arange(n, dtype=np.int64)
    macro = start_macro + lin // cap
    p = lin % cap
    per_col = g.rows * g.trits_per_cell
    col = p // per_col
    q = p % per_col
    if g.trits_per_cell == 2:
        row, side = q // 2, q % 2
    else:
        row, side = q, np.zeros_like(q)
    return Placement(tensor_id, (rows, cols), start_macro, macro, row, col, side)


def map_tensor(t: TernaryTensor, g: ArrayGeometry = ArrayGeometry(), start_macro=0, tensor_id="w") -> WeightMap:
    if start_macro < 0:
        raise ValidationError("start_macro must be nonnegative")
    wm = WeightMap(g)
    wm.add(place((t.rows, t.cols), g, start_macro, tensor_id), t.trits.T.reshape(-1))
    return wm


def map_tensors(named, g: ArrayGeometry = ArrayGeometry(), wm: WeightMap | None = None) -> WeightMap:
    """Place several tensors, each starting on a fresh macro."""
    wm = wm if wm is not None else WeightMap(g)
    for tensor_id, t in named:
        wm.add(place((t.rows, t.cols), g, wm.next_free_macro(), tensor_id), t.trits.T.reshape(-1))
    return wm


def _check_row(g, macro, row):
    if macro < 0:
        raise ValidationError(f"macro index {macro} is negative")
    if not 0 <= row < g.rows:
        raise ValidationError(f"row {row} outside 0..{g.rows - 1}")


def read_row(wm: WeightMap, macro, row, side) -> np.ndarray:
    """Trits of one wordline on one side, in column order."""
    g = wm.geometry
    _check_row(g, macro, row)
    side = Side(side)
    if side is Side.ODD and g.trits_per_cell < 2:
        raise ValidationError("geometry has no ODD side")
    cols = np.arange(g.cols, dtype=np.int64)
    return wm.read_cells(_linear_key(g, macro, row, cols, side))


def read_cell(wm: WeightMap, addr: CellAddress) -> int:
    g = wm.geometry
    _check_row(g, addr.macro, addr.row)
    if not 0 <= addr.col < g.cols:
        raise ValidationError(f"col {addr.col} outside 0..{g.cols - 1}")
    return int(wm.read_cells([_linear_key(g, addr.macro, addr.row, addr.col, int(addr.side))])[0])


def read_tensor(wm: WeightMap, tensor_id="w") -> np.ndarray:
    """Read a mapped tensor back out of the array, as (rows, cols) trits."""
    p = wm[tensor_id]
    flat = wm.read_cells(_linear_key(wm.geometry, p.macro, p.row, p.col, p.side))
    rows, cols = p.shape
    return flat.reshape(cols, rows).T


# --- serialization ---------------------------------------------------------

def weight_map_to_json(wm: WeightMap) -> str:
    g = wm.geometry
    cap = capacity_trits(g)
    tensors = []
    for tid, p in wm.placements.items():
        runs = []
        # placements are dense in fill order, so one run per macro touched
        lin = np.arange(len(p), dtype=np.int64)
        for m in np.unique(p.macro):
            idx = lin[p.macro == m]
            a = p.address(int(idx[0]))
            runs.append({"macro": a.macro, "row": a.row, "col": a.col, "side": a.side.name, "length": int(idx.size)})
        tensors.append({"id": tid, "rows": p.shape[0], "cols": p.shape[1], "start_macro": p.start_macro, "runs": runs})
    doc = {
        "geometry": {"rows": g.rows, "cols": g.cols, "trits_per_cell": g.trits_per_cell,
                     "cols_per_trimla": g.cols_per_trimla, "capacity_trits": cap},
        "tensors": tensors,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def placements_from_json(text: str):
    """Rebuild (geometry, [Placement]) from :func:`weight_map_to_json` output."""
    doc = json.loads(text)
    gd = doc["geometry"]
    g = ArrayGeometry(gd["rows"], gd["cols"], gd["trits_per_cell"], gd["cols_per_trimla"])
    out = []
    for t in doc["tensors"]:
        p = place((t["rows"], t["cols"]), g, t["start_macro"], t["id"])
        if sum(r["length"] for r in t["runs"]) != len(p):
            raise ValidationError(f"runs of {t['id']!r} do not cover its {len(p)} trits")
        out.append(p)
    return g, out


# --- density and area ------------------------------------------------------

def bit_density(g: ArrayGeometry, cell_area_um2, periphery_fraction=PERIPHERY_FRACTION) -> float:
    """Array bit density in bits/mm^2, periphery overhead included."""
    if cell_area_um2 <= 0:
        raise ValidationError("cell area must be positive")
    if not 0 <= periphery_fraction < 1:
        raise ValidationError("periphery fraction must lie in [0, 1)")
    return g.trits_per_cell * BITS_PER_TRIT / cell_area_um2 * (1 - periphery_fraction) * 1e6


def cell_area_for_density(g: ArrayGeometry, density_bits_mm2, periphery_fraction=PERIPHERY_FRACTION) -> float:
    """Inverse of :func:`bit_density`: cell area (um^2) giving the target density."""
    if density_bits_mm2 <= 0:
        raise ValidationError("density must be positive")
    return g.trits_per_cell * BITS_PER_TRIT * (1 - periphery_fraction) * 1e6 / density_bits_mm2


@dataclass(frozen=True)
class AreaModel:
    """Quadratic feature-size scaling from a reference-node bit density.

    ``ref_bit_density`` is a whole-macro figure (periphery already folded
    in); ``periphery_fraction`` is kept for reporting the array/periphery split.
    """

    node_nm: float
    ref_node_nm: float = REF_NODE_NM
    ref_bit_density: float = REF_BIT_DENSITY
    periphery_fraction: float = PERIPHERY_FRACTION

    def __post_init__(self):
        if self.node_nm <= 0 or self.ref_node_nm <= 0:
            raise ValidationError("node sizes must be positive")
        if self.ref_bit_density <= 0:
            raise ValidationError("reference bit density must be positive")
        if not 0 <= self.periphery_fraction < 1:
            raise ValidationError("periphery fraction must lie in [0, 1)")

    def at_node(self, node_nm):
        return AreaModel(node_nm, self.ref_node_nm, self.ref_bit_density, self.periphery_fraction)


def estimate_area(params, bits_per_param, m: AreaModel) -> float:
    """Silicon area in mm^2 for ``params`` weights at ``bits_per_param``."""
    if params <= 0 or bits_per_param <= 0:
        raise ValidationError("params and bits_per_param must be positive")
    return params * bits_per_param / m.ref_bit_density * (m.node_nm / m.ref_node_nm) ** 2


def calibrate_area_model(params, bits_per_param, node_nm, target_mm2, ref_node_nm=REF_NODE_NM) -> AreaModel:
    """Area model whose reference density reproduces ``target_mm2`` for this workload."""
    if target_mm2 <= 0:
        raise ValidationError("target area must be positive")
    density = params * bits_per_param * (node_nm / ref_node_nm) ** 2 / target_mm2
    return AreaModel(node_nm, ref_node_nm, density)


def macros_needed(trits, g: ArrayGeometry = ArrayGeometry()) -> int:
    return math.ceil(trits / capacity_trits(g))
