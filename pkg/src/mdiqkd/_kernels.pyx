# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled detector-dynamics kernel; same contract as ``_kernels_py``."""
import numpy as np
from libc.math cimport INFINITY


def apply_detector_dynamics(const unsigned char[::1] raw, const unsigned char[::1] ap_raw,
                            double period, double sep, recovery, span):
    cdef Py_ssize_t n = raw.shape[0]
    cdef Py_ssize_t i
    cdef int bin_, k, bit, click, r, a, o
    cdef double t0, tau
    cdef double rec[2]
    cdef double sp[2]
    cdef double dead_until[2]
    cdef int clicked[2]
    cdef long long counts[2]
    for k in range(2):
        rec[k] = recovery[k]
        sp[k] = span[k]
        dead_until[k] = -INFINITY
        clicked[k] = 0
        counts[k] = 0
    cdef bint use_ap = ap_raw.shape[0] > 0
    if use_ap and ap_raw.shape[0] != n:
        raise ValueError("ap_raw must be empty or match raw in length")
    out_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] out = out_arr
    with nogil:
        for i in range(n):
            r = raw[i]
            a = ap_raw[i] if use_ap else 0
            if r == 0 and a == 0:
                continue
            t0 = i * period
            o = 0
            for bin_ in range(2):
                tau = t0 + bin_ * sep
                for k in range(2):
                    bit = 2 * k + bin_
                    if tau < dead_until[k]:
                        continue
                    click = (r >> bit) & 1
                    if not click and clicked[k] and (a >> bit) & 1:
                        click = tau < dead_until[k] + sp[k]
                    if click:
                        o |= 1 << bit
                        dead_until[k] = tau + rec[k]
                        clicked[k] = 1
                        counts[k] += 1
            out[i] = o
    return out_arr, np.array([counts[0], counts[1]], dtype=np.int64)
