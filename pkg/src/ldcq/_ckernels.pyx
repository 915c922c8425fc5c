# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the loops in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def sumtree_update(double[::1] tree, leaves, values):
    cdef long[::1] lv = np.ascontiguousarray(leaves, dtype=np.int64)
    cdef double[::1] vv = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t cap = tree.shape[0] // 2
    cdef Py_ssize_t i, node
    for i in range(lv.shape[0]):
        node = lv[i] + cap
        tree[node] = vv[i]
        node >>= 1
        while node >= 1:
            tree[node] = tree[2 * node] + tree[2 * node + 1]
            node >>= 1


def sumtree_find(double[::1] tree, prefixes, Py_ssize_t size):
    cdef double[::1] pv = np.ascontiguousarray(prefixes, dtype=np.float64)
    cdef Py_ssize_t n = pv.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdef long[::1] ov = out
    cdef Py_ssize_t cap = tree.shape[0] // 2
    cdef Py_ssize_t i, node
    cdef double v, lval
    for i in range(n):
        v = pv[i]
        node = 1
        while node < cap:
            lval = tree[2 * node]
            if v > lval:
                v -= lval
                node = 2 * node + 1
            else:
                node = 2 * node
        node -= cap
        ov[i] = node if node < size else size - 1
    return out


def discounted_returns(rewards, steps_valid, double gamma):
    cdef double[:, ::1] r = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef long[::1] sv = np.ascontiguousarray(steps_valid, dtype=np.int64)
    cdef Py_ssize_t n = r.shape[0]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, k
    cdef double acc, disc
    for i in range(n):
        acc = 0.0
        disc = 1.0
        for k in range(sv[i]):
            acc += disc * r[i, k]
            disc *= gamma
        ov[i] = acc
    return out


cdef inline bint _free(unsigned char[:, ::1] free, long r, long c):
    if r < 0 or c < 0 or r >= free.shape[0] or c >= free.shape[1]:
        return False
    return free[r, c]


def maze_move(free, pos, delta):
    cdef unsigned char[:, ::1] fv = np.ascontiguousarray(free, dtype=np.bool_).view(np.uint8)
    cdef double[:, ::1] p = np.ascontiguousarray(pos, dtype=np.float64)
    cdef double[:, ::1] d = np.ascontiguousarray(delta, dtype=np.float64)
    out = np.array(p, dtype=np.float64, copy=True)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i
    cdef double nr, nc
    cdef long r0, c0, r1, c1
    cdef bint ok
    for i in range(p.shape[0]):
        nr = p[i, 0] + d[i, 0]
        nc = p[i, 1] + d[i, 1]
        r0 = <long>floor(p[i, 0])
        c0 = <long>floor(p[i, 1])
        r1 = <long>floor(nr)
        c1 = <long>floor(nc)
        ok = _free(fv, r1, c1)
        if ok and r1 != r0 and c1 != c0:
            ok = _free(fv, r0, c1) and _free(fv, r1, c0)
        if ok:
            ov[i, 0] = nr
            ov[i, 1] = nc
    return out
