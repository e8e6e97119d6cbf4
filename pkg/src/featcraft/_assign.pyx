# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled shortest-augmenting-path solver for square assignment problems."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def solve(double[:, ::1] cost):
    """Return ``col`` with ``col[i]`` the column assigned to row ``i`` (minimum total cost)."""
    cdef Py_ssize_t n = cost.shape[0]
    if cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(n + 1)
    cdef double[::1] minv = np.empty(n + 1)
    cdef Py_ssize_t[::1] p = np.zeros(n + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(n + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(n + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    col = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] colv = col
    for j in range(1, n + 1):
        colv[p[j] - 1] = j - 1
    return col


def pairwise_euclidean(double[:, ::1] a, double[:, ::1] b):
    """Euclidean distance matrix between the rows of ``a`` and ``b``."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    if b.shape[1] != d:
        raise ValueError("point dimensions differ")
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, k
    cdef double s, t
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                s += t * t
            o[i, j] = s ** 0.5
    return out
