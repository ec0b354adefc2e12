import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bitrom_sim.errors import ValidationError
from bitrom_sim.kvcache import (
    READ,
    WRITE,
    Convention,
    KvConfig,
    apply_policy,
    closed_form_stats,
    edram_capacity,
    generate_trace,
    quarter_rule_reduction,
    reduction_curve,
    refresh_check,
)

CONVENTIONS = list(Convention)


def brute_force(n, k, p, convention):
    """Per-step reference written as plain loops over the decode schedule."""
    inclusive = convention is Convention.INCLUSIVE
    reads = [0] * n
    if inclusive:
        for i in range(p):
            reads[i] += 1
    for t in range(1, n - p + 1):
        new = p + t - 1
        for i in range(new + 1 if inclusive else new):
            reads[i] += 1
    on = sum(reads[:k])
    return sum(reads) - on, on


def test_smallest_trace():
    tr = generate_trace(KvConfig(2, 1, 0))
    assert list(tr.events()) == [(0, 0, "WRITE", "EXTERNAL"), (1, 1, "WRITE", "EXTERNAL"),
                                 (1, 0, "READ", "EXTERNAL")]


def test_read_totals():
    tr = generate_trace(KvConfig(4, 1, 0))
    assert int(np.count_nonzero(tr.op == READ)) == 6
    for p in (1, 5, 20):
        tr = generate_trace(KvConfig(128, p, 0))
        assert tr.reads_per_token()[0] == 128 - p


@pytest.mark.parametrize("convention", CONVENTIONS)
@given(n=st.integers(1, 60), data=st.data())
def test_trace_properties(convention, n, data):
    p = data.draw(st.integers(1, n))
    k = data.draw(st.integers(0, n))
    tr = generate_trace(KvConfig(n, p, k), convention)
    writes = np.bincount(tr.token[tr.op == WRITE], minlength=n)
    assert (writes == 1).all()
    reads = tr.reads_per_token()
    assert (np.diff(reads) <= 0).all()
    s = apply_policy(tr, k)
    assert s == closed_form_stats(n, k, p, convention)
    assert (s.external_reads, s.onchip_reads) == brute_force(n, k, p, convention)


def test_closed_form_equals_enumeration_to_512():
    for convention in CONVENTIONS:
        for n in range(1, 513):
            tr = generate_trace(KvConfig(n, 1, 0), convention)
            reads = tr.reads_per_token()
            total = int(reads.sum())
            onchip = np.concatenate([[0], np.cumsum(reads)])
            for k in range(n + 1):
                s = closed_form_stats(n, k, 1, convention)
                assert s.onchip_reads == onchip[k]
                assert s.external_reads == total - onchip[k]


def test_policy_extremes():
    tr = generate_trace(KvConfig(20, 1, 0))
    assert apply_policy(tr, 0).read_reduction == 0
    s = apply_policy(tr, 20)
    assert s.external_reads == 0 and s.read_reduction == 1
    with pytest.raises(ValidationError):
        apply_policy(tr, 21)


def test_headline_reduction():
    decode = closed_form_stats(128, 32).read_reduction
    inclusive = closed_form_stats(128, 32, convention=Convention.INCLUSIVE).read_reduction
    assert decode == pytest.approx(quarter_rule_reduction(128, 32))
    assert abs(decode - 0.436) <= 0.015
    assert abs(inclusive - 0.436) <= 0.015


def test_reduction_curve():
    rows = reduction_curve([32, 64], [0, 4, 8, 16, 64])
    assert all(r["k"] <= r["n"] for r in rows)
    assert [r["reduction"] for r in rows if r["k"] == 0] == [0.0, 0.0]
    for n in (32, 64):
        red = [r["reduction"] for r in rows if r["n"] == n]
        assert red == sorted(red)
    for n in (32, 64, 128, 256):
        r = reduction_curve([n], [n // 4])[0]["reduction"]
        assert 0.40 <= r <= 0.47


def test_refresh():
    tr = generate_trace(KvConfig(16, 1, 4))
    ok = refresh_check(tr, KvConfig(16, 1, 4, tbt_ms=10))
    assert ok.valid and max(ok.max_gap_ms.values()) == 10
    bad = refresh_check(tr, KvConfig(16, 1, 4, tbt_ms=100))
    assert bad.violations == (0, 1, 2, 3)
    assert not refresh_check(tr, KvConfig(16, 1, 4, tbt_ms=64)).valid
    assert refresh_check(tr, KvConfig(16, 1, 4, tbt_ms=63.999)).valid


@pytest.mark.parametrize("convention", CONVENTIONS)
@given(n=st.integers(2, 40), data=st.data())
def test_gap_at_most_one_step(convention, n, data):
    p = data.draw(st.integers(1, n))
    tr = generate_trace(KvConfig(n, p, n), convention)
    rep = refresh_check(tr, KvConfig(n, p, n, tbt_ms=1.0))
    assert max(rep.max_gap_ms.values()) <= 1.0


def test_edram_capacity():
    c = KvConfig(128, 1, 32, layers=18, kv_heads=4, head_dim=256, element_bits=16, batches=6)
    assert edram_capacity(c) == 14_155_776 == int(13.5 * 2**20)
    assert edram_capacity(KvConfig(128, 1, 0, layers=18)) == 0


def test_jsonl(tmp_path):
    tr = generate_trace(KvConfig(3, 1, 1))
    lines = [json.loads(x) for x in tr.to_jsonl().splitlines()]
    assert lines[0] == {"step": 0, "token": 0, "op": "WRITE", "location": "ONCHIP"}
    assert len(lines) == len(tr)


def test_config_validation():
    with pytest.raises(ValidationError):
        KvConfig(4, 5)
    with pytest.raises(ValidationError):
        KvConfig(4, 1, 5)
    with pytest.raises(ValidationError):
        closed_form_stats(4, 1, 0)
