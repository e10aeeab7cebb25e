# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: row gather/scatter and row softmax / cross-entropy."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def gather_rows(const double[:, ::1] table, const cnp.int64_t[::1] ids):
    cdef Py_ssize_t n = ids.shape[0], d = table.shape[1], i, j, r
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        r = ids[i]
        for j in range(d):
            o[i, j] = table[r, j]
    return out


def scatter_add_rows(const cnp.int64_t[::1] ids, const double[:, ::1] grad, Py_ssize_t n_rows):
    cdef Py_ssize_t n = ids.shape[0], d = grad.shape[1], i, j, r
    out = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        r = ids[i]
        for j in range(d):
            o[r, j] += grad[i, j]
    return out


def softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    cdef double m, z
    out = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        z = 0.0
        for j in range(c):
            o[i, j] = exp(x[i, j] - m)
            z += o[i, j]
        for j in range(c):
            o[i, j] /= z
    return out


def softmax_xent(const double[:, ::1] logits, const cnp.int64_t[::1] labels):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1], i, j
    cdef double m, z, total = 0.0
    probs = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] p = probs
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(c):
            p[i, j] = exp(logits[i, j] - m)
            z += p[i, j]
        for j in range(c):
            p[i, j] /= z
        total += log(z) - (logits[i, labels[i]] - m)
    return total / n, probs
