"""Pure-Python sparse LDL^T kernels (fallback for the compiled extension).

The matrix is passed as the upper triangle in compressed-column form with
sorted row indices.  No pivoting is done: the caller chooses the elimination
order.  Pivots smaller than ``pivot_tol`` in magnitude are replaced by
``signs[k] * dyn_reg``, which keeps quasi-definite KKT systems factorisable.
"""
import numpy as np


def etree(n, Ap, Ai):
    Ap = Ap.tolist()
    Ai = Ai.tolist()
    parent = [-1] * n
    lnz = [0] * n
    work = [0] * n
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
    return np.asarray(parent, dtype=np.int64), np.asarray(lnz, dtype=np.int64)


def factor(n, Ap, Ai, Ax, parent, lnz, signs, pivot_tol, dyn_reg):
    Ap = Ap.tolist()
    Ai = Ai.tolist()
    Ax = Ax.tolist()
    parent = parent.tolist()
    signs = signs.tolist()
    Lp = [0] * (n + 1)
    for i in range(n):
        Lp[i + 1] = Lp[i] + int(lnz[i])
    nnz = Lp[n]
    Li = [0] * nnz
    Lx = [0.0] * nnz
    D = [0.0] * n
    Dinv = [0.0] * n
    nxt = Lp[:n]
    marked = [False] * n
    yvals = [0.0] * n
    n_pos = 0
    n_dyn = 0
    for k in range(n):
        yidx = []
        dk = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            b = Ai[p]
            if b == k:
                dk = Ax[p]
                continue
            yvals[b] = Ax[p]
            if not marked[b]:
                marked[b] = True
                stack = [b]
                j = parent[b]
                while j != -1 and j < k and not marked[j]:
                    marked[j] = True
                    stack.append(j)
                    j = parent[j]
                stack.reverse()
                yidx.extend(stack)
        # reach was collected in topological blocks; process in reverse order
        for c in reversed(yidx):
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
            marked[c] = False
        if abs(dk) < pivot_tol:
            dk = signs[k] * dyn_reg
            n_dyn += 1
        if dk > 0:
            n_pos += 1
        D[k] = dk
        Dinv[k] = 1.0 / dk
    return (
        np.asarray(Lp, dtype=np.int64),
        np.asarray(Li, dtype=np.int64),
        np.asarray(Lx, dtype=float),
        np.asarray(D, dtype=float),
        np.asarray(Dinv, dtype=float),
        n_pos,
        n_dyn,
    )


def solve(Lp, Li, Lx, Dinv, b):
    n = len(Dinv)
    Lp = Lp.tolist()
    Li = Li.tolist()
    Lx = Lx.tolist()
    x = np.array(b, dtype=float).tolist()
    for i in range(n):
        xi = x[i]
        if xi != 0.0:
            for j in range(Lp[i], Lp[i + 1]):
                x[Li[j]] -= Lx[j] * xi
    dinv = Dinv.tolist()
    for i in range(n):
        x[i] *= dinv[i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for j in range(Lp[i], Lp[i + 1]):
            s -= Lx[j] * x[Li[j]]
        x[i] = s
    return np.asarray(x, dtype=float)
