# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: Philox4x32-10 counter hashing and batched Dykstra projection."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint32_t, uint64_t
from libc.math cimport sqrt

cnp.import_array()

cdef uint32_t PHILOX_M0 = 0xD2511F53u
cdef uint32_t PHILOX_M1 = 0xCD9E8D57u
cdef uint32_t PHILOX_W0 = 0x9E3779B9u
cdef uint32_t PHILOX_W1 = 0xBB67AE85u
cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline void _philox10(uint32_t* c, uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t hi0, lo0, hi1, lo1
    cdef int r
    for r in range(10):
        p0 = <uint64_t>PHILOX_M0 * <uint64_t>c[0]
        p1 = <uint64_t>PHILOX_M1 * <uint64_t>c[2]
        hi0 = <uint32_t>(p0 >> 32)
        lo0 = <uint32_t>p0
        hi1 = <uint32_t>(p1 >> 32)
        lo1 = <uint32_t>p1
        c[0] = hi1 ^ c[1] ^ k0
        c[1] = lo1
        c[2] = hi0 ^ c[3] ^ k1
        c[3] = lo0
        k0 = k0 + PHILOX_W0
        k1 = k1 + PHILOX_W1


def philox_raw(uint32_t k0, uint32_t k1,
               const uint32_t[::1] c0, const uint32_t[::1] c1,
               const uint32_t[::1] c2, const uint32_t[::1] c3):
    """Raw Philox4x32-10 output words, shape (n, 4)."""
    cdef Py_ssize_t n = c0.shape[0], i
    out = np.empty((n, 4), dtype=np.uint32)
    cdef uint32_t[:, ::1] o = out
    cdef uint32_t c[4]
    with nogil:
        for i in range(n):
            c[0] = c0[i]; c[1] = c1[i]; c[2] = c2[i]; c[3] = c3[i]
            _philox10(c, k0, k1)
            o[i, 0] = c[0]; o[i, 1] = c[1]; o[i, 2] = c[2]; o[i, 3] = c[3]
    return out


def philox_uniforms(uint32_t k0, uint32_t k1,
                    const uint32_t[::1] c0, const uint32_t[::1] c1,
                    const uint32_t[::1] c2, const uint32_t[::1] c3):
    """Two 53-bit uniforms in (0, 1) per counter, shape (n, 2)."""
    cdef Py_ssize_t n = c0.shape[0], i
    out = np.empty((n, 2), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef uint32_t c[4]
    with nogil:
        for i in range(n):
            c[0] = c0[i]; c[1] = c1[i]; c[2] = c2[i]; c[3] = c3[i]
            _philox10(c, k0, k1)
            o[i, 0] = ((c[0] >> 5) * 67108864.0 + (c[1] >> 6) + 0.5) * TWO_M53
            o[i, 1] = ((c[2] >> 5) * 67108864.0 + (c[3] >> 6) + 0.5) * TWO_M53
    return out


def dykstra_project(const double[:, ::1] points, const double[:, ::1] normals,
                    const double[::1] offsets, double tol, int max_iter):
    """Project each row of ``points`` onto {x : normals @ x <= offsets}.

    The rows of ``normals`` must have unit length.

    Returns (projected, iterations, converged). Every point runs its own
    iteration to its own stopping time, so batching never changes a result.
    """
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], m = normals.shape[0]
    cdef Py_ssize_t i, j, k
    cdef int it
    cdef double viol, ch, tol2 = tol * tol, v, de
    out = np.empty((n, d), dtype=np.float64)
    iters = np.zeros(n, dtype=np.int64)
    conv = np.ones(n, dtype=np.bool_)
    cdef double[:, ::1] x = out
    cdef long long[::1] itv = iters
    cdef cnp.npy_bool[::1] cv = conv
    cdef double[:, ::1] e = np.zeros((m, d), dtype=np.float64)
    cdef double[::1] y = np.zeros(d, dtype=np.float64)
    cdef bint feasible
    with nogil:
        for i in range(n):
            for k in range(d):
                x[i, k] = points[i, k]
            feasible = True
            for j in range(m):
                v = 0.0
                for k in range(d):
                    v = v + normals[j, k] * x[i, k]
                if v > offsets[j]:
                    feasible = False
                    break
            if feasible:
                continue
            for j in range(m):
                for k in range(d):
                    e[j, k] = 0.0
            cv[i] = False
            for it in range(1, max_iter + 1):
                ch = 0.0
                for j in range(m):
                    v = 0.0
                    for k in range(d):
                        y[k] = x[i, k] + e[j, k]
                        v = v + normals[j, k] * y[k]
                    viol = v - offsets[j]
                    if viol < 0.0:
                        viol = 0.0
                    for k in range(d):
                        x[i, k] = y[k] - viol * normals[j, k]
                        de = (y[k] - x[i, k]) - e[j, k]
                        ch = ch + de * de
                        e[j, k] = y[k] - x[i, k]
                itv[i] = it
                if ch <= tol2:
                    cv[i] = True
                    break
    return out, iters, conv
