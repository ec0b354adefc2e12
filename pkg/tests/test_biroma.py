import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bitrom_sim.biroma import (
    REF_BIT_DENSITY,
    ArrayGeometry,
    AreaModel,
    CellAddress,
    Side,
    WeightMap,
    bit_density,
    calibrate_area_model,
    capacity_trits,
    cell_area_for_density,
    estimate_area,
    macros_needed,
    map_tensor,
    map_tensors,
    place,
    placements_from_json,
    read_cell,
    read_row,
    read_tensor,
    weight_map_to_json,
)
from bitrom_sim.errors import ValidationError
from bitrom_sim.ternary import FALCON3, TernaryTensor

SMALL = ArrayGeometry(rows=4, cols=8)

tensors = hnp.arrays(np.int8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(-1, 1))


def test_capacity():
    assert capacity_trits(ArrayGeometry()) == 4_194_304
    assert capacity_trits(ArrayGeometry(1, 8, 2, 8)) == 16
    assert capacity_trits(ArrayGeometry(rows=1, cols=1, cols_per_trimla=1)) == 2
    assert capacity_trits(ArrayGeometry(trits_per_cell=1)) == 2_097_152
    assert ArrayGeometry().trimlas == 128


def test_single_trit_address():
    wm = map_tensor(TernaryTensor.from_trits([[1]]))
    assert wm["w"].address(0) == CellAddress(0, 0, 0, Side.EVEN)


def test_two_rows_share_a_cell():
    p = list(map_tensor(TernaryTensor.from_trits([[1], [-1]]))["w"].addresses())
    assert p == [CellAddress(0, 0, 0, Side.EVEN), CellAddress(0, 0, 0, Side.ODD)]


def test_spill_to_next_macro():
    cap = capacity_trits(SMALL)
    t = TernaryTensor.from_trits(np.ones((cap + 1, 1), np.int8))
    p = map_tensor(t, SMALL, start_macro=3)["w"]
    assert p.address(len(p) - 1).macro == 4
    assert p.address(len(p) - 2).macro == 3
    assert p.macros_used == 2


def test_layout_by_hand():
    # 8 input channels x 2 outputs in a 4-row array: output 0 fills column 0
    t = TernaryTensor.from_trits(np.arange(16).reshape(8, 2) % 3 - 1)
    p = map_tensor(t, SMALL)["w"]
    got = [(a.row, a.col, int(a.side)) for a in p.addresses()]
    want = [(r, c, s) for c in range(2) for r in range(4) for s in range(2)]
    assert got == want


def test_read_row_and_unmapped(rng):
    trits = rng.integers(-1, 2, (8, 3)).astype(np.int8)
    wm = map_tensor(TernaryTensor.from_trits(trits), SMALL)
    for r in range(SMALL.rows):
        even = read_row(wm, 0, r, Side.EVEN)
        odd = read_row(wm, 0, r, Side.ODD)
        np.testing.assert_array_equal(even[:3], trits[2 * r, :])
        np.testing.assert_array_equal(odd[:3], trits[2 * r + 1, :])
        assert not even[3:].any() and not odd[3:].any()
    assert not read_row(wm, 5, 0, Side.EVEN).any()
    with pytest.raises(ValidationError):
        read_row(wm, 0, SMALL.rows, Side.EVEN)
    with pytest.raises(ValidationError):
        read_cell(wm, CellAddress(0, 0, SMALL.cols, Side.EVEN))


@given(tensors, st.integers(0, 3))
def test_map_read_roundtrip(trits, start):
    t = TernaryTensor.from_trits(trits)
    wm = map_tensor(t, SMALL, start)
    np.testing.assert_array_equal(read_tensor(wm), trits)
    p = wm["w"]
    # reading every address in map order gives the output-major flattening
    cells = [read_cell(wm, a) for a in p.addresses()]
    assert cells == trits.T.reshape(-1).tolist()
    keys = {(a.macro, a.row, a.col, a.side) for a in p.addresses()}
    assert len(keys) == trits.size
    assert p.macros_used == math.ceil(trits.size / capacity_trits(SMALL))


def test_multi_tensor_map(rng):
    named = [(f"t{i}", TernaryTensor.from_trits(rng.integers(-1, 2, (9, 5)))) for i in range(3)]
    wm = map_tensors(named, SMALL)
    for tid, t in named:
        np.testing.assert_array_equal(read_tensor(wm, tid), t.trits)
    starts = [wm[tid].start_macro for tid, _ in named]
    assert starts == [0, 1, 2]  # 45 trits fit one 64-trit macro


def test_overlap_rejected():
    wm = WeightMap(SMALL)
    wm.add(place((2, 2), SMALL, 0, "a"))
    with pytest.raises(ValidationError):
        wm.add(place((2, 2), SMALL, 0, "b"))
    with pytest.raises(ValidationError):
        wm.add(place((1, 1), SMALL, 5, "a"))


def test_json_roundtrip(rng):
    named = [("a", TernaryTensor.from_trits(rng.integers(-1, 2, (40, 3)))),
             ("b", TernaryTensor.from_trits(rng.integers(-1, 2, (5, 5))))]
    wm = map_tensors(named, SMALL)
    g, places = placements_from_json(weight_map_to_json(wm))
    assert g == SMALL
    for p in places:
        q = wm[p.tensor_id]
        for f in ("macro", "row", "col", "side"):
            np.testing.assert_array_equal(getattr(p, f), getattr(q, f))


def test_density_calibration():
    g = ArrayGeometry()
    area = cell_area_for_density(g, REF_BIT_DENSITY)
    assert area == pytest.approx(0.6057, abs=5e-4)
    assert bit_density(g, area) == pytest.approx(REF_BIT_DENSITY)
    assert bit_density(g, area, 0.0) == pytest.approx(REF_BIT_DENSITY / (1 - 0.048))
    with pytest.raises(ValidationError):
        bit_density(g, area, 1.0)


def test_area_scaling():
    m = AreaModel(65.0)
    assert estimate_area(1e6, 1.58, m) == pytest.approx(1.58e6 / REF_BIT_DENSITY)
    assert estimate_area(1e6, 1.58, m.at_node(32.5)) == pytest.approx(estimate_area(1e6, 1.58, m) / 4)


@given(st.floats(1e3, 1e12), st.floats(1e3, 1e12), st.floats(3, 200), st.floats(3, 200))
def test_area_monotone(p1, p2, n1, n2):
    m = AreaModel(65.0)
    if p1 < p2:
        assert estimate_area(p1, 1.58, m.at_node(n1)) < estimate_area(p2, 1.58, m.at_node(n1))
    if n1 < n2:
        assert estimate_area(p1, 1.58, m.at_node(n1)) < estimate_area(p1, 1.58, m.at_node(n2))


def test_calibrated_falcon_area():
    f1 = FALCON3["Falcon3-1B"]
    m = calibrate_area_model(f1.param_count, 1.58, 14, 1671.0)
    assert estimate_area(f1.param_count, 1.58, m) == pytest.approx(1671.0)
    # the uncalibrated reference density gives a far smaller die
    assert estimate_area(f1.param_count, 1.58, AreaModel(14)) < 100


def test_macros_needed():
    assert macros_needed(capacity_trits(ArrayGeometry())) == 1
    assert macros_needed(capacity_trits(ArrayGeometry()) + 1) == 2
