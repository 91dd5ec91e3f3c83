# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Must stay numerically interchangeable with _fallback.py."""
import numpy as np

from libc.math cimport sqrt
from libc.stdint cimport uint64_t

cdef uint64_t FNV_OFFSET = 0xcbf29ce484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001b3ULL


def topology_gap(const double[:, ::1] pts1, const double[:, ::1] ref1,
                 const double[:, ::1] pts2, const double[:, ::1] ref2):
    cdef Py_ssize_t n = pts1.shape[0]
    cdef Py_ssize_t m = ref1.shape[0]
    cdef Py_ssize_t c1 = pts1.shape[1]
    cdef Py_ssize_t c2 = pts2.shape[1]
    cdef Py_ssize_t i, j, a
    cdef double s1, s2, diff, acc, t
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] gap = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(m):
                s1 = 0.0
                for a in range(c1):
                    t = pts1[i, a] - ref1[j, a]
                    s1 = s1 + t * t
                s2 = 0.0
                for a in range(c2):
                    t = pts2[i, a] - ref2[j, a]
                    s2 = s2 + t * t
                diff = sqrt(s1) - sqrt(s2)
                acc = acc + diff * diff
            gap[i] = sqrt(acc)
    return out


def nearest_higher(const double[:, ::1] dist, const double[::1] r, double init):
    cdef Py_ssize_t n = dist.shape[0]
    cdef Py_ssize_t i, j
    cdef double best, ri
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] e = out
    with nogil:
        for i in range(n):
            best = init
            ri = r[i]
            found = False
            for j in range(n):
                if r[j] > ri:
                    if not found or dist[i, j] < best:
                        best = dist[i, j]
                        found = True
            e[i] = best
    return out


def fnv1a64(const unsigned char[::1] data, uint64_t state=FNV_OFFSET):
    cdef Py_ssize_t i
    cdef uint64_t h = state
    with nogil:
        for i in range(data.shape[0]):
            h = h ^ data[i]
            h = h * FNV_PRIME
    return h
