"""Numpy implementations of the hot kernels.

Used when the compiled extension is missing or BITROM_SIM_PURE=1 is set.
Every function here must agree bit-for-bit with ``_ckernels.pyx``.
"""
import numpy as np

BACKEND = "python"

# trit -> 2-bit code: 0 -> 00, +1 -> 01, -1 -> 10
_CODE_OF = np.array([0, 1, 2], dtype=np.uint8)  # indexed by trit % 3
_TRIT_OF = np.array([0, 1, -1, 0], dtype=np.int8)
_POW3 = np.array([1, 3, 9, 27, 81], dtype=np.uint16)


def pack_two_bit(trits):
    t = np.asarray(trits, dtype=np.int8)
    n = t.size
    codes = np.zeros(((n + 3) // 4) * 4, dtype=np.uint8)
    codes[:n] = _CODE_OF[np.mod(t, 3)]
    codes = codes.reshape(-1, 4)
    return (codes[:, 0] | (codes[:, 1] << 2) | (codes[:, 2] << 4) | (codes[:, 3] << 6)).astype(np.uint8)


def unpack_two_bit(buf, n):
    """Return (trits, bad_index); bad_index is -1 when no code 11 was found."""
    b = np.asarray(buf, dtype=np.uint8)
    codes = np.stack([(b >> s) & 0b11 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:n]
    bad = np.flatnonzero(codes == 3)
    if bad.size:
        return None, int(bad[0])
    return _TRIT_OF[codes], -1


def pack_base243(trits):
    t = np.asarray(trits, dtype=np.int8)
    n = t.size
    digits = np.zeros(((n + 4) // 5) * 5, dtype=np.uint16)
    digits[:n] = np.mod(t, 3)
    return (digits.reshape(-1, 5) @ _POW3).astype(np.uint8)


def unpack_base243(buf, n):
    b = np.asarray(buf, dtype=np.uint8)
    bad = np.flatnonzero(b >= 243)
    if bad.size:
        return None, int(bad[0])
    v = b.astype(np.int16)
    digits = np.empty((b.size, 5), dtype=np.int8)
    for i in range(5):
        digits[:, i] = v % 3
        v //= 3
    return _TRIT_OF[digits.reshape(-1)[:n]], -1


def trimla_matvec(w, a, depth, width, wrap):
    """Local-then-global accumulation of every output channel.

    ``w`` is (cols, rows) int8, output-major; ``a`` is (rows,) integer.
    Input channels are split into groups of ``depth``; each group runs through
    one ``width``-bit local accumulator, then the group results are summed
    exactly. Returns (outputs, overflow_events_per_col, adds, subs, skips).
    """
    w = np.asarray(w, dtype=np.int8)
    a = np.asarray(a, dtype=np.int64)
    cols, rows = w.shape
    groups = -(-rows // depth) if rows else 0
    pad = groups * depth - rows
    lo = -(1 << (width - 1))
    hi = (1 << (width - 1)) - 1
    span = 1 << width

    wp = np.pad(w, ((0, 0), (0, pad))).reshape(cols, groups, depth)
    ap = np.pad(a, (0, pad)).reshape(groups, depth)
    acc = np.zeros((cols, groups), dtype=np.int64)
    overflow = np.zeros(cols, dtype=np.int64)
    for step in range(depth):
        acc += wp[:, :, step].astype(np.int64) * ap[:, step]
        out = (acc < lo) | (acc > hi)
        if out.any():
            overflow += out.sum(axis=1)
            if wrap:
                acc = np.where(out, ((acc - lo) % span) + lo, acc)
            else:
                np.clip(acc, lo, hi, out=acc)
    # padded positions hold zero weights but are not real visits
    nz = np.count_nonzero(w)
    adds = int(np.count_nonzero(w == 1))
    return acc.sum(axis=1), overflow, adds, nz - adds, w.size - nz


def prefix_overflow(w, a, lo, hi):
    """Per trial: 1 if a sequential accumulation of w*a leaves [lo, hi].

    Before the first excursion a saturating accumulator tracks the exact
    prefix sum, so the sticky flag is set iff some exact prefix is out of range.
    """
    s = np.cumsum(np.asarray(w, dtype=np.int64) * np.asarray(a, dtype=np.int64), axis=1)
    return ((s < lo) | (s > hi)).any(axis=1).astype(np.uint8)
