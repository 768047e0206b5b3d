# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels.

Must stay bit-identical to ``_fallback.py``; the test suite compares both
backends element-for-element.
"""
import numpy as np

from libc.stdint cimport uint64_t

cdef uint64_t _MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t _MIX2 = 0x94D049BB133111EBULL


cdef inline uint64_t _finalize(uint64_t z) nogil:
    z ^= z >> 30
    z *= _MIX1
    z ^= z >> 27
    z *= _MIX2
    z ^= z >> 31
    return z


def minhash_mix(hashes, keys):
    """Column minima of finalize(hashes[i] ^ keys[j]). See _fallback."""
    h_arr = np.ascontiguousarray(hashes, dtype=np.uint64)
    k_arr = np.ascontiguousarray(keys, dtype=np.uint64)
    # const views accept the read-only cached key arrays callers hold.
    cdef const uint64_t[::1] hv = h_arr
    cdef const uint64_t[::1] kv = k_arr
    cdef Py_ssize_t n = hv.shape[0]
    cdef Py_ssize_t m = kv.shape[0]
    out = np.full(m, np.iinfo(np.uint64).max, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    cdef Py_ssize_t i, j
    cdef uint64_t base, mixed
    with nogil:
        for i in range(n):
            base = hv[i]
            for j in range(m):
                mixed = _finalize(base ^ kv[j])
                if mixed < ov[j]:
                    ov[j] = mixed
    return out


def signed_counts(hashes, dims):
    """Signed bucket accumulation for feature hashing. See _fallback."""
    h_arr = np.ascontiguousarray(hashes, dtype=np.uint64)
    cdef const uint64_t[::1] hv = h_arr
    cdef Py_ssize_t n = hv.shape[0]
    cdef uint64_t d = <uint64_t> dims
    out = np.zeros(dims, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef uint64_t val
    with nogil:
        for i in range(n):
            val = hv[i]
            if val >> 63:
                ov[<Py_ssize_t> (val % d)] -= 1.0
            else:
                ov[<Py_ssize_t> (val % d)] += 1.0
    return out
