"""Numba hot loops shared by the renewal, polymer and chaos modules."""
from __future__ import annotations

import numpy as np
from numba import njit

# Convolution DP on the lattice.  K depends only on |i - j|_1, so for each
# column i2 we keep T[i2, e] = sum of Z(j) over j1 < i1, j2 < i2, |j| = e.
# Every term is non-negative and only points in the backward cone of i are
# touched, which makes larger boxes reproduce smaller ones bit for bit.


@njit(cache=True, nogil=True)
def cone_dp(kvec, w, n1, n2):
    z = np.zeros((n1 + 1, n2 + 1))
    z[0, 0] = 1.0
    t = np.zeros((n2 + 1, n1 + n2 + 1))
    for i1 in range(1, n1 + 1):
        r = i1 - 1
        for c in range(n2 + 1):
            val = z[r, c]
            if val != 0.0:
                e = r + c
                for i2 in range(c + 1, n2 + 1):
                    t[i2, e] += val
        for i2 in range(1, n2 + 1):
            d = i1 + i2
            acc = 0.0
            trow = t[i2]
            for e in range(d - 1):
                acc += kvec[d - e] * trow[e]
            z[i1, i2] = w[i1, i2] * acc
    return z


@njit(cache=True, nogil=True)
def cone_dp_log(logk, logw, n1, n2):
    """Same recursion carried in log space (streaming log-sum-exp)."""
    ninf = -np.inf
    z = np.full((n1 + 1, n2 + 1), ninf)
    z[0, 0] = 0.0
    t = np.full((n2 + 1, n1 + n2 + 1), ninf)
    for i1 in range(1, n1 + 1):
        r = i1 - 1
        for c in range(n2 + 1):
            val = z[r, c]
            if val != ninf:
                e = r + c
                for i2 in range(c + 1, n2 + 1):
                    cur = t[i2, e]
                    if cur == ninf:
                        t[i2, e] = val
                    elif cur > val:
                        t[i2, e] = cur + np.log1p(np.exp(val - cur))
                    else:
                        t[i2, e] = val + np.log1p(np.exp(cur - val))
        for i2 in range(1, n2 + 1):
            d = i1 + i2
            trow = t[i2]
            m = ninf
            for e in range(d - 1):
                x = logk[d - e] + trow[e]
                if x > m:
                    m = x
            if m == ninf:
                continue
            acc = 0.0
            for e in range(d - 1):
                x = logk[d - e] + trow[e]
                if x != ninf:
                    acc += np.exp(x - m)
            z[i1, i2] = logw[i1, i2] + m + np.log(acc)
    return z


@njit(cache=True, nogil=True)
def triangle_mass(kvec, d):
    """Renewal mass on the triangle |i|_1 <= d (unit weights)."""
    z = np.zeros((d + 1, d + 1))
    z[0, 0] = 1.0
    t = np.zeros((d + 1, d + 1))
    for i1 in range(1, d):
        r = i1 - 1
        for c in range(d - r + 1):
            val = z[r, c]
            if val != 0.0:
                e = r + c
                for i2 in range(c + 1, d - i1 + 1):
                    t[i2, e] += val
        for i2 in range(1, d - i1 + 1):
            s = i1 + i2
            acc = 0.0
            trow = t[i2]
            for e in range(s - 1):
                acc += kvec[s - e] * trow[e]
            z[i1, i2] = acc
    return z


@njit(cache=True, nogil=True)
def cone_dp_batch(kvec, w, n1, n2):
    """cone_dp for a stack of weight arrays w[r, :, :]; returns z[r, :, :]."""
    reps = w.shape[0]
    out = np.empty((reps, n1 + 1, n2 + 1))
    for r in range(reps):
        out[r] = cone_dp(kvec, w[r], n1, n2)
    return out


@njit(cache=True, nogil=True)
def diagonal_free(z, tail, nmax):
    """F[n] = sum_{j <= (n, n)} z[j] tail[n - j] for n = 0..nmax, with j = 0 or j >= (1, 1)."""
    out = np.zeros(nmax + 1)
    for n in range(nmax + 1):
        acc = z[0, 0] * tail[n, n]
        for j1 in range(1, n + 1):
            for j2 in range(1, n + 1):
                acc += z[j1, j2] * tail[n - j1, n - j2]
        out[n] = acc
    return out


@njit(cache=True, nogil=True)
def chain_integral(phi, inc, k):
    """sum over 0 < j_1 < ... < j_k < J of prod phi(gaps) * prod inc(j_l).

    ``phi`` and ``inc`` are indexed by lattice offsets/nodes 0..J, the order is
    strict in both coordinates, and the last gap runs to J.
    """
    j1, j2 = phi.shape[0] - 1, phi.shape[1] - 1
    a = np.zeros((j1 + 1, j2 + 1))
    for x in range(1, j1):
        for y in range(1, j2):
            a[x, y] = phi[x, y] * inc[x, y]
    for _ in range(k - 1):
        b = np.zeros((j1 + 1, j2 + 1))
        for x in range(2, j1):
            for y in range(2, j2):
                acc = 0.0
                for p in range(1, x):
                    for q in range(1, y):
                        acc += a[p, q] * phi[x - p, y - q]
                b[x, y] = acc * inc[x, y]
        a = b
    out = 0.0
    for x in range(1, j1):
        for y in range(1, j2):
            out += a[x, y] * phi[j1 - x, j2 - y]
    return out
