# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int8_t, uint8_t, int64_t

cnp.import_array()

BACKEND = "cython"

cdef int8_t TRIT_OF[4]
TRIT_OF[:] = [0, 1, -1, 0]


cdef inline uint8_t code_of(int8_t t) nogil:
    if t == 1:
        return 1
    if t == -1:
        return 2
    return 0


def pack_two_bit(trits):
    cdef const int8_t[::1] t = np.ascontiguousarray(trits, dtype=np.int8)
    cdef Py_ssize_t n = t.shape[0], i
    out = np.zeros((n + 3) // 4, dtype=np.uint8)
    cdef uint8_t[::1] o = out
    with nogil:
        for i in range(n):
            o[i >> 2] |= code_of(t[i]) << ((i & 3) * 2)
    return out


def unpack_two_bit(buf, Py_ssize_t n):
    cdef const uint8_t[::1] b = np.ascontiguousarray(buf, dtype=np.uint8)
    out = np.empty(n, dtype=np.int8)
    cdef int8_t[::1] o = out
    cdef Py_ssize_t i, bad = -1
    cdef uint8_t code
    with nogil:
        for i in range(n):
            code = (b[i >> 2] >> ((i & 3) * 2)) & 3
            if code == 3:
                bad = i
                break
            o[i] = TRIT_OF[code]
    if bad >= 0:
        return None, bad
    return out, -1


def pack_base243(trits):
    cdef const int8_t[::1] t = np.ascontiguousarray(trits, dtype=np.int8)
    cdef Py_ssize_t n = t.shape[0], i, j, nbytes = (n + 4) // 5
    out = np.zeros(nbytes, dtype=np.uint8)
    cdef uint8_t[::1] o = out
    cdef int v, p
    with nogil:
        for i in range(nbytes):
            v = 0
            p = 1
            for j in range(5):
                if i * 5 + j < n:
                    v += code_of(t[i * 5 + j]) * p
                p *= 3
            o[i] = <uint8_t>v
    return out


def unpack_base243(buf, Py_ssize_t n):
    cdef const uint8_t[::1] b = np.ascontiguousarray(buf, dtype=np.uint8)
    cdef Py_ssize_t nbytes = b.shape[0], i, k = 0, bad = -1
    cdef int v, j
    out = np.empty(n, dtype=np.int8)
    cdef int8_t[::1] o = out
    with nogil:
        for i in range(nbytes):
            v = b[i]
            if v >= 243:
                bad = i
                break
            for j in range(5):
                if k < n:
                    o[k] = TRIT_OF[v % 3]
                    k += 1
                v = v // 3
    if bad >= 0:
        return None, bad
    return out, -1


def trimla_matvec(w, a, int depth, int width, bint wrap):
    cdef const int8_t[:, ::1] W = np.ascontiguousarray(w, dtype=np.int8)
    cdef const int64_t[::1] A = np.ascontiguousarray(a, dtype=np.int64)
    cdef Py_ssize_t cols = W.shape[0], rows = W.shape[1], j, i, g0
    cdef int64_t lo = -(1 << (width - 1)), hi = (1 << (width - 1)) - 1
    cdef int64_t span = 1 << width
    cdef int64_t acc, total, adds = 0, subs = 0, skips = 0
    cdef int8_t wt
    outputs = np.zeros(cols, dtype=np.int64)
    overflow = np.zeros(cols, dtype=np.int64)
    cdef int64_t[::1] O = outputs
    cdef int64_t[::1] F = overflow
    with nogil:
        for j in range(cols):
            total = 0
            g0 = 0
            while g0 < rows:
                acc = 0
                for i in range(g0, min(g0 + depth, rows)):
                    wt = W[j, i]
                    # branch-free mode decode; overflow is the rare path
                    adds += wt > 0
                    subs += wt < 0
                    acc += wt * A[i]
                    if acc < lo or acc > hi:
                        F[j] += 1
                        if wrap:
                            acc = ((acc - lo) % span + span) % span + lo
                        elif acc < lo:
                            acc = lo
                        else:
                            acc = hi
                total += acc
                g0 += depth
            O[j] = total
    skips = cols * rows - adds - subs
    return outputs, overflow, adds, subs, skips


def prefix_overflow(w, a, long lo, long hi):
    cdef const int8_t[:, ::1] W = np.ascontiguousarray(w, dtype=np.int8)
    cdef const int64_t[:, ::1] A = np.ascontiguousarray(a, dtype=np.int64)
    cdef Py_ssize_t trials = W.shape[0], depth = W.shape[1], t, i
    cdef int64_t acc
    out = np.zeros(trials, dtype=np.uint8)
    cdef uint8_t[::1] o = out
    with nogil:
        for t in range(trials):
            acc = 0
            for i in range(depth):
                acc += W[t, i] * A[t, i]
                if acc < lo or acc > hi:
                    o[t] = 1
                    break
    return out
