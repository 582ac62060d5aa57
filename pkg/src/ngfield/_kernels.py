"""Compiled kernels for the simplicial sparse Cholesky factorization.

All factors are stored column-compressed with the diagonal entry first in
each column, followed by strictly increasing row indices.  The input matrix
``C`` is the upper triangle (including the diagonal) of the permuted matrix,
also column-compressed.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def etree(n, Cp, Ci):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(k, Cp, Ci, parent, mark, stack, path):
    # Nonzero pattern of row k of L, in topological order, written to
    # stack[top:]; returns top.
    n = parent.shape[0]
    top = n
    mark[k] = k
    for p in range(Cp[k], Cp[k + 1]):
        i = Ci[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            path[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            stack[top] = path[length]
    return top


@njit(cache=True)
def symbolic(n, Cp, Ci, parent):
    """Row patterns (``Rp``, ``Ri``) and column structure (``Lp``, ``Li``) of L."""
    mark = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    path = np.empty(n, dtype=np.int64)
    counts = np.ones(n, dtype=np.int64)
    Rp = np.zeros(n + 1, dtype=np.int64)
    total = 0
    for k in range(n):
        top = _ereach(k, Cp, Ci, parent, mark, stack, path)
        total += n - top
        for t in range(top, n):
            counts[stack[t]] += 1
        Rp[k + 1] = total
    Ri = np.empty(total, dtype=np.int64)
    mark[:] = -1
    for k in range(n):
        top = _ereach(k, Cp, Ci, parent, mark, stack, path)
        Ri[Rp[k]:Rp[k + 1]] = stack[top:n]
    Lp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        Lp[j + 1] = Lp[j] + counts[j]
    Li = np.empty(Lp[n], dtype=np.int64)
    c = Lp[:n].copy()
    for k in range(n):
        for t in range(Rp[k], Rp[k + 1]):
            i = Ri[t]
            Li[c[i]] = k
            c[i] += 1
        Li[c[k]] = k
        c[k] += 1
    return Rp, Ri, Lp, Li


@njit(cache=True)
def numeric(n, Cp, Ci, Cx, Lp, Li, Rp, Ri, Lx, pivot_tol):
    """Up-looking numeric factorization into ``Lx``.

    Returns -1 on success, otherwise the index of the failing pivot.
    """
    x = np.zeros(n)
    c = Lp[:n].copy()
    for k in range(n):
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            if i <= k:
                x[i] = Cx[p]
        d = x[k]
        x[k] = 0.0
        for t in range(Rp[k], Rp[k + 1]):
            i = Ri[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            Lx[c[i]] = lki
            c[i] += 1
        if not d > pivot_tol:
            return k
        Lx[c[k]] = np.sqrt(d)
        c[k] += 1
    return -1


@njit(cache=True)
def lsolve(n, Lp, Li, Lx, x):
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        xj = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            x[Li[p]] -= Lx[p] * xj


@njit(cache=True)
def ltsolve(n, Lp, Li, Lx, x):
    for j in range(n - 1, -1, -1):
        s = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            s -= Lx[p] * x[Li[p]]
        x[j] = s / Lx[Lp[j]]


@njit(cache=True)
def takahashi(n, Lp, Li, Lx):
    """Entries of (L L^T)^{-1} on the pattern of L, same layout as ``Lx``."""
    Zx = np.zeros(Lx.shape[0])
    maxlen = 0
    for j in range(n):
        if Lp[j + 1] - Lp[j] > maxlen:
            maxlen = Lp[j + 1] - Lp[j]
    acc = np.zeros(maxlen)
    for j in range(n - 1, -1, -1):
        p0 = Lp[j]
        m = Lp[j + 1] - p0 - 1
        d = Lx[p0]
        for t in range(m):
            acc[t] = 0.0
        for t in range(m):
            rt = Li[p0 + 1 + t]
            lt = Lx[p0 + 1 + t]
            acc[t] += lt * Zx[Lp[rt]]
            q = Lp[rt] + 1
            for s in range(t + 1, m):
                rs = Li[p0 + 1 + s]
                while Li[q] < rs:
                    q += 1
                z = Zx[q]
                acc[t] += Lx[p0 + 1 + s] * z
                acc[s] += lt * z
        dsum = 0.0
        for t in range(m):
            zt = -acc[t] / d
            Zx[p0 + 1 + t] = zt
            dsum += Lx[p0 + 1 + t] * zt
        Zx[p0] = 1.0 / (d * d) - dsum / d
    return Zx


@njit(cache=True)
def locate(Lp, Li, rows, cols):
    """Positions in the factor storage of lower entries (rows >= cols); -1 if absent."""
    out = np.full(rows.shape[0], -1, dtype=np.int64)
    for t in range(rows.shape[0]):
        r = rows[t]
        c = cols[t]
        lo = Lp[c]
        hi = Lp[c + 1]
        while lo < hi:
            mid = (lo + hi) // 2
            if Li[mid] < r:
                lo = mid + 1
            else:
                hi = mid
        if lo < Lp[c + 1] and Li[lo] == r:
            out[t] = lo
    return out
