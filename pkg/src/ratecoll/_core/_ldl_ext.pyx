# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sparse LDL^T kernels.  Same contract as ``_ldl_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t idx_t


def etree(Py_ssize_t n, const idx_t[::1] Ap, const idx_t[::1] Ai):
    cdef cnp.ndarray[idx_t, ndim=1] parent_a = np.full(n, -1, dtype=np.int64)
    cdef cnp.ndarray[idx_t, ndim=1] lnz_a = np.zeros(n, dtype=np.int64)
    cdef cnp.ndarray[idx_t, ndim=1] work_a = np.zeros(n, dtype=np.int64)
    cdef idx_t[::1] parent = parent_a
    cdef idx_t[::1] lnz = lnz_a
    cdef idx_t[::1] work = work_a
    cdef Py_ssize_t j, p
    cdef idx_t i
    for j in range(n):
        work[j] = j
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            if i > j:
                raise ValueError("matrix is not upper triangular")
            while work[i] != j:
                if parent[i] == -1:
                    parent[i] = j
                lnz[i] += 1
                work[i] = j
                i = parent[i]
    return parent_a, lnz_a


def factor(Py_ssize_t n, const idx_t[::1] Ap, const idx_t[::1] Ai, const double[::1] Ax,
           const idx_t[::1] parent, const idx_t[::1] lnz, const double[::1] signs,
           double pivot_tol, double dyn_reg):
    cdef cnp.ndarray[idx_t, ndim=1] Lp_a = np.zeros(n + 1, dtype=np.int64)
    cdef idx_t[::1] Lp = Lp_a
    cdef Py_ssize_t i, k, p, q
    for i in range(n):
        Lp[i + 1] = Lp[i] + lnz[i]
    cdef idx_t nnz = Lp[n]
    cdef cnp.ndarray[idx_t, ndim=1] Li_a = np.zeros(nnz, dtype=np.int64)
    cdef cnp.ndarray[double, ndim=1] Lx_a = np.zeros(nnz, dtype=float)
    cdef cnp.ndarray[double, ndim=1] D_a = np.zeros(n, dtype=float)
    cdef cnp.ndarray[double, ndim=1] Dinv_a = np.zeros(n, dtype=float)
    cdef idx_t[::1] Li = Li_a
    cdef double[::1] Lx = Lx_a
    cdef double[::1] D = D_a
    cdef double[::1] Dinv = Dinv_a
    cdef cnp.ndarray[idx_t, ndim=1] nxt_a = Lp_a[:n].copy()
    cdef idx_t[::1] nxt = nxt_a
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] marked_a = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] marked = marked_a
    cdef cnp.ndarray[double, ndim=1] yvals_a = np.zeros(n, dtype=float)
    cdef double[::1] yvals = yvals_a
    cdef cnp.ndarray[idx_t, ndim=1] yidx_a = np.zeros(n, dtype=np.int64)
    cdef idx_t[::1] yidx = yidx_a
    cdef cnp.ndarray[idx_t, ndim=1] buf_a = np.zeros(n, dtype=np.int64)
    cdef idx_t[::1] buf = buf_a
    cdef Py_ssize_t n_pos = 0, n_dyn = 0, ny, ne
    cdef idx_t b, j, c, pos
    cdef double dk, yc, lv
    for k in range(n):
        ny = 0
        dk = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            b = Ai[p]
            if b == k:
                dk = Ax[p]
                continue
            yvals[b] = Ax[p]
            if not marked[b]:
                marked[b] = 1
                buf[0] = b
                ne = 1
                j = parent[b]
                while j != -1 and j < k and not marked[j]:
                    marked[j] = 1
                    buf[ne] = j
                    ne += 1
                    j = parent[j]
                while ne > 0:
                    ne -= 1
                    yidx[ny] = buf[ne]
                    ny += 1
        for i in range(ny - 1, -1, -1):
            c = yidx[i]
            pos = nxt[c]
            yc = yvals[c]
            for q in range(Lp[c], pos):
                yvals[Li[q]] -= Lx[q] * yc
            Li[pos] = k
            lv = yc * Dinv[c]
            Lx[pos] = lv
            dk -= yc * lv
            nxt[c] = pos + 1
            yvals[c] = 0.0
            marked[c] = 0
        if -pivot_tol < dk < pivot_tol:
            dk = signs[k] * dyn_reg
            n_dyn += 1
        if dk > 0:
            n_pos += 1
        D[k] = dk
        Dinv[k] = 1.0 / dk
    return Lp_a, Li_a, Lx_a, D_a, Dinv_a, n_pos, n_dyn


def solve(const idx_t[::1] Lp, const idx_t[::1] Li, const double[::1] Lx,
          const double[::1] Dinv, b):
    cdef Py_ssize_t n = Dinv.shape[0]
    cdef cnp.ndarray[double, ndim=1] x_a = np.array(b, dtype=float, copy=True)
    cdef double[::1] x = x_a
    cdef Py_ssize_t i, j
    cdef double s, xi
    for i in range(n):
        xi = x[i]
        if xi != 0.0:
            for j in range(Lp[i], Lp[i + 1]):
                x[Li[j]] -= Lx[j] * xi
    for i in range(n):
        x[i] *= Dinv[i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for j in range(Lp[i], Lp[i + 1]):
            s -= Lx[j] * x[Li[j]]
        x[i] = s
    return x_a
