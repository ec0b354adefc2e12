import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bitrom_sim.errors import InvariantError, ValidationError
from bitrom_sim.trimla import (
    TRUTH_TABLE,
    EventLedger,
    LocalAccumulator,
    OverflowPolicy,
    TrimlaMode,
    accumulate_step,
    decode_mode,
    global_accumulate,
    mac_bitserial_8b,
    mac_channel,
    mac_channel_stepwise,
    overflow_survey,
    run_columns,
    tree_passes,
)

trits = st.integers(-1, 1)


def test_decode_mode():
    assert decode_mode(0) is TrimlaMode.SKIP
    assert decode_mode(1) is TrimlaMode.ADD
    assert decode_mode(-1) is TrimlaMode.SUB
    assert TRUTH_TABLE == {0: (0, 0), 1: (1, 0), -1: (1, 1)}
    with pytest.raises(ValidationError):
        decode_mode(2)


def test_accumulate_examples():
    led = EventLedger()
    acc = accumulate_step(LocalAccumulator(), TrimlaMode.ADD, 5, led)
    assert acc.value == 5 and led.adds == 1
    acc = accumulate_step(acc, TrimlaMode.SKIP, 7, led)
    assert acc.value == 5 and led.skips == 1
    acc = accumulate_step(LocalAccumulator(value=-126), TrimlaMode.SUB, 7, led)
    assert acc.value == -128 and acc.overflowed
    wrap = LocalAccumulator(value=-126, overflow_policy=OverflowPolicy.WRAP_AND_FLAG)
    acc = accumulate_step(wrap, TrimlaMode.SUB, 7, led)
    assert acc.value == 123 and acc.overflowed
    assert led.overflow_events == 2
    led.check()


def test_ledger_check_and_merge():
    a = EventLedger(mac_steps=3, skips=1, adds=1, subs=1, adder_tree_passes=1)
    b = a + a
    assert b.mac_steps == 6 and a.mac_steps == 3
    assert EventLedger.from_dict(b.to_dict()) == b
    with pytest.raises(InvariantError):
        EventLedger(mac_steps=1).check()


def test_mac_channel_examples():
    s, led = mac_channel([1, -1, 0], [3, 5, 7])
    assert s == -2 and led.skips == 1 and led.adder_tree_passes == 1
    s, led = mac_channel([0] * 20, list(range(-8, 8)) + [0] * 4)
    assert s == 0 and led.skips == 20
    with pytest.raises(ValidationError):
        mac_channel([1, 1], [1])
    with pytest.raises(ValidationError):
        mac_channel([1], [8])


def test_mac_channel_random_short(rng):
    # 10,000 channels of length <= 16: no overflow is possible at 4 bits
    for _ in range(10_000):
        n = int(rng.integers(1, 17))
        w = rng.integers(-1, 2, n)
        a = rng.integers(-8, 8, n)
        s, led = mac_channel(w, a)
        assert s == int(np.dot(w, a))
        assert led.overflow_events == 0
        assert led.skips == int(np.count_nonzero(w == 0))


@given(st.lists(st.tuples(trits, st.integers(-8, 7)), min_size=1, max_size=300),
       st.sampled_from(list(OverflowPolicy)), st.integers(1, 40))
def test_vector_matches_stepwise(pairs, policy, depth):
    w = [p[0] for p in pairs]
    a = [p[1] for p in pairs]
    fast = mac_channel(w, a, policy, depth, fan_in=4)
    slow = mac_channel_stepwise(w, a, policy, depth, fan_in=4)
    assert fast == slow


@given(st.lists(st.tuples(trits, st.integers(-8, 7)), min_size=1, max_size=200))
def test_exact_without_overflow(pairs):
    w = [p[0] for p in pairs]
    a = [p[1] for p in pairs]
    s, led = mac_channel(w, a)
    led.check()
    assert led.skips == w.count(0)
    if led.overflow_events == 0:
        assert s == sum(x * y for x, y in pairs)


def test_global_accumulate():
    assert global_accumulate([1] * 128) == 128
    assert global_accumulate([0] * 128) == 0
    v = [2**40, -3, 2**61, -(2**61)]
    assert global_accumulate(v, fan_in=4) == sum(v)
    led = EventLedger()
    global_accumulate([1] * 128, ledger=led)
    assert led.adder_tree_passes == 1
    with pytest.raises(ValidationError):
        global_accumulate([1, 2, 3])


def test_bitserial_examples():
    assert mac_bitserial_8b([1], [-1])[0] == -1
    assert mac_bitserial_8b([-1], [16])[0] == -16
    _, led = mac_bitserial_8b([1, 0], [5, 6])
    assert led.mac_steps == 4 and led.skips == 2 and led.bitserial_cycles == 2
    assert led.adder_tree_passes == 1


def test_bitserial_exhaustive_single():
    for w in (-1, 0, 1):
        for a in range(-128, 128):
            s, led = mac_bitserial_8b([w], [a])
            assert s == w * a
            assert led.overflow_events == 0


def test_bitserial_random_long(rng):
    for _ in range(10_000):
        n = int(rng.integers(2, 65))
        w = rng.integers(-1, 2, n)
        a = rng.integers(-128, 128, n)
        s, led = mac_bitserial_8b(w, a, depth=1)
        assert s == int(np.dot(w, a))
        assert led.skips == 2 * int(np.count_nonzero(w == 0))


@given(st.lists(st.tuples(trits, st.integers(-128, 127)), min_size=1, max_size=100))
def test_bitserial_property(pairs):
    w = [p[0] for p in pairs]
    a = [p[1] for p in pairs]
    s, led = mac_bitserial_8b(w, a)
    led.check()
    if led.overflow_events == 0:
        assert s == sum(x * y for x, y in pairs)


def test_tree_passes():
    assert tree_passes(1, 16, 128) == 1
    assert tree_passes(2048, 16, 128) == 1
    assert tree_passes(2049, 16, 128) == 2


@given(st.integers(1, 6), st.integers(1, 200), st.sampled_from([4, 8]))
def test_run_columns_accounting(cols, rows, bits):
    r = np.random.default_rng(cols * 1000 + rows)
    w = r.integers(-1, 2, (cols, rows)).astype(np.int8)
    lo = -(1 << (bits - 1))
    a = r.integers(lo, -lo, rows)
    out, led, ovf = run_columns(w, a, bits)
    led.check()
    cycles = 1 if bits == 4 else 2
    assert led.skips == cycles * int(np.count_nonzero(w == 0))
    assert led.adder_tree_passes == cols  # one summation per channel at rows <= 2048
    assert led.overflow_events == int(ovf.sum())
    clean = ovf == 0
    np.testing.assert_array_equal(out[clean], (w.astype(np.int64) @ a)[clean])


def test_wrap_overflow_flagged():
    # 32 x 7 = 224 wraps once through the 8-bit range
    s, led = mac_channel([1] * 32, [7] * 32, OverflowPolicy.WRAP_AND_FLAG, depth=32)
    assert s == 224 - 256 and led.overflow_events == 1
    s2, led2 = mac_channel([1] * 32, [7] * 32, depth=16)
    assert led2.overflow_events == 0 and s2 == 224


def test_saturate_flags_and_clamps():
    s, led = mac_channel([1] * 32, [7] * 32, depth=32)
    assert s == 127 and led.overflow_events > 0


def test_survey_fixed_by_seed():
    assert overflow_survey(1, trials=5000) == 0.0
    assert overflow_survey(16, trials=20_000) == 0.0
    a = overflow_survey(256, trials=4000, seed=3)
    assert a == overflow_survey(256, trials=4000, seed=3)
    assert 0 < a < 1
    assert overflow_survey(64, act_bits=8, trials=4000) > 0
    with pytest.raises(ValidationError):
        overflow_survey(16, trials=0)
