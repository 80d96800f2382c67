# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; semantics match ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, fabs, INFINITY

cnp.import_array()


def visibility_mask(disparity):
    cdef double[:, ::1] d = np.ascontiguousarray(disparity, dtype=np.float64)
    cdef Py_ssize_t h = d.shape[0], w = d.shape[1], i, j, k, lo, nb
    out = np.ones((h, w), dtype=np.uint8)
    if h == 0 or w == 0:
        return out
    cdef unsigned char[:, ::1] vis = out
    cols_a = np.floor(np.arange(w, dtype=np.float64)[None, :] - np.asarray(d) + 0.5).astype(np.int64)
    cdef long long[:, ::1] cols = cols_a
    lo = cols_a.min()
    nb = cols_a.max() - lo + 1
    best_a = np.empty(nb, dtype=np.float64)
    cdef double[::1] best = best_a
    with nogil:
        for i in range(h):
            for k in range(nb):
                best[k] = -INFINITY
            for j in range(w):
                k = cols[i, j] - lo
                if d[i, j] > best[k]:
                    best[k] = d[i, j]
            for j in range(w):
                if d[i, j] < best[cols[i, j] - lo]:
                    vis[i, j] = 0
    return out


def bilateral_correction(image, rows, cols, residuals, double sigma_d, double sigma_c):
    cdef double[:, :, ::1] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef long long[::1] qr = np.ascontiguousarray(rows, dtype=np.int64)
    cdef long long[::1] qc = np.ascontiguousarray(cols, dtype=np.int64)
    cdef double[::1] res = np.ascontiguousarray(residuals, dtype=np.float64)
    cdef Py_ssize_t nc = img.shape[0], h = img.shape[1], w = img.shape[2]
    num_a = np.zeros((h, w))
    den_a = np.zeros((h, w))
    cdef double[:, ::1] num = num_a
    cdef double[:, ::1] den = den_a
    cdef double radius = 3.0 * sigma_d
    cdef long long r_int = <long long>floor(radius)
    cdef double inv_d = 1.0 / (2.0 * sigma_d * sigma_d)
    cdef double inv_c = 1.0 / (2.0 * sigma_c * sigma_c)
    cdef Py_ssize_t a, n = qr.shape[0], c
    cdef long long qi, qj, i, j, i0, i1, j0, j1
    cdef double dist2, col2, diff, wgt
    # spatial weights depend only on the integer squared offset
    table_a = np.exp(-np.arange(2 * r_int * r_int + 1, dtype=np.float64) * inv_d)
    cdef double[::1] spatial = table_a
    cdef long long di
    with nogil:
        for a in range(n):
            qi = qr[a]
            qj = qc[a]
            i0 = qi - r_int if qi - r_int > 0 else 0
            i1 = qi + r_int if qi + r_int < h - 1 else h - 1
            j0 = qj - r_int if qj - r_int > 0 else 0
            j1 = qj + r_int if qj + r_int < w - 1 else w - 1
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    di = (i - qi) * (i - qi) + (j - qj) * (j - qj)
                    dist2 = <double>di
                    if dist2 > radius * radius:
                        continue
                    col2 = 0.0
                    for c in range(nc):
                        diff = img[c, i, j] - img[c, qi, qj]
                        col2 = col2 + diff * diff
                    wgt = spatial[di] * exp(-col2 * inv_c)
                    num[i, j] += wgt * res[a]
                    den[i, j] += wgt
        for i in range(h):
            for j in range(w):
                num[i, j] = num[i, j] / (den[i, j] if den[i, j] > 1.0 else 1.0)
    return num_a


def left_right_check(best_lr, best_rl, double tol):
    cdef long long[:, ::1] lr = np.ascontiguousarray(best_lr, dtype=np.int64)
    cdef long long[:, ::1] rl = np.ascontiguousarray(best_rl, dtype=np.int64)
    cdef Py_ssize_t h = lr.shape[0], w = lr.shape[1], i, j
    cdef long long jr
    out = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] ok = out
    with nogil:
        for i in range(h):
            for j in range(w):
                jr = j - lr[i, j]
                if jr < 0:
                    continue
                if jr > w - 1:
                    jr = w - 1
                ok[i, j] = 1 if fabs(<double>(jr + rl[i, jr] - j)) <= tol else 0
    return out
