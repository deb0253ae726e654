"""Compiled inner loop of :func:`rsgame.matrix_game.solve_matrix_games`.

Same search as the numpy path (pure saddle, hinted support, square supports
by increasing size) but one game at a time inside a single compiled loop,
which removes the per-call array overhead that dominates for the handful
of small games an HJI sweep produces.
"""

from __future__ import annotations

import numpy as np
from numba import njit

PIVOT_TOL = 1e-12


@njit(cache=True)
def _solve_bordered(S, transpose, k, out, scale):
    """Solve the (k+1) bordered equalizer system of the k x k block ``S``.

    Unknowns are the k weights and the value; rows are the k equalities and
    the normalization.  Gaussian elimination with partial pivoting; returns
    False when a pivot falls below the tolerance.
    """
    n = k + 1
    M = np.zeros((n, n + 1))
    for r in range(k):
        for c in range(k):
            M[r, c] = S[c, r] if transpose else S[r, c]
        M[r, k] = -1.0
    for c in range(k):
        M[k, c] = 1.0
    M[k, n] = 1.0
    for col in range(n):
        piv = col
        best = abs(M[col, col])
        for r in range(col + 1, n):
            if abs(M[r, col]) > best:
                best = abs(M[r, col])
                piv = r
        if best <= PIVOT_TOL * scale:
            return False
        if piv != col:
            for c in range(n + 1):
                tmp = M[col, c]
                M[col, c] = M[piv, c]
                M[piv, c] = tmp
        for r in range(col + 1, n):
            f = M[r, col] / M[col, col]
            if f != 0.0:
                for c in range(col, n + 1):
                    M[r, c] -= f * M[col, c]
    for r in range(n - 1, -1, -1):
        s = M[r, n]
        for c in range(r + 1, n):
            s -= M[r, c] * out[c]
        out[r] = s / M[r, r]
    return True


@njit(cache=True)
def _try(A, I, J, k, tol, scale, p, q):
    """Equalizer solution on rows ``I[:k]`` and columns ``J[:k]``; True if it is a saddle."""
    m1, m2 = A.shape
    S = np.empty((k, k))
    for a in range(k):
        for c in range(k):
            S[a, c] = A[I[a], J[c]]
    wp = np.zeros(k + 1)
    wq = np.zeros(k + 1)
    # p solves sum_a p_a S[a, c] = v for every c: the transposed system
    if not _solve_bordered(S, True, k, wp, scale):
        return False
    if not _solve_bordered(S, False, k, wq, scale):
        return False
    sp = 0.0
    sq = 0.0
    for a in range(k):
        if wp[a] < -tol or wq[a] < -tol:
            return False
        sp += max(wp[a], 0.0)
        sq += max(wq[a], 0.0)
    p[:] = 0.0
    q[:] = 0.0
    for a in range(k):
        p[I[a]] = max(wp[a], 0.0) / sp
        q[J[a]] = max(wq[a], 0.0) / sq
    upper = -np.inf
    for c in range(m2):
        s = 0.0
        for a in range(m1):
            s += p[a] * A[a, c]
        upper = max(upper, s)
    lower = np.inf
    for a in range(m1):
        s = 0.0
        for c in range(m2):
            s += A[a, c] * q[c]
        lower = min(lower, s)
    return upper - lower <= 2.0 * tol


@njit(cache=True)
def _next_subset(idx, k, m):
    """Advance ``idx[:k]`` to the next k-subset of range(m) in lexicographic order."""
    i = k - 1
    while i >= 0 and idx[i] == m - k + i:
        i -= 1
    if i < 0:
        return False
    idx[i] += 1
    for j in range(i + 1, k):
        idx[j] = idx[j - 1] + 1
    return True


@njit(cache=True)
def solve_stack(A, hp, hq, use_hint, rtol):
    """Solve games ``A`` (b, m1, m2); returns ``(p, q, done)``."""
    b, m1, m2 = A.shape
    P = np.zeros((b, m1))
    Q = np.zeros((b, m2))
    done = np.zeros(b, dtype=np.bool_)
    I = np.zeros(max(m1, m2), dtype=np.int64)
    J = np.zeros(max(m1, m2), dtype=np.int64)
    for g in range(b):
        G = A[g]
        scale = 1.0
        for a in range(m1):
            for c in range(m2):
                scale = max(scale, abs(G[a, c]))
        tol = rtol * scale
        p = P[g]
        q = Q[g]
        # pure saddle
        best_row, upper = 0, np.inf
        for a in range(m1):
            rm = -np.inf
            for c in range(m2):
                rm = max(rm, G[a, c])
            if rm < upper:
                upper, best_row = rm, a
        best_col, lower = 0, -np.inf
        for c in range(m2):
            cm = np.inf
            for a in range(m1):
                cm = min(cm, G[a, c])
            if cm > lower:
                lower, best_col = cm, c
        if upper - lower <= tol:
            p[best_row] = 1.0
            q[best_col] = 1.0
            done[g] = True
            continue
        if m1 == 1 or m2 == 1:
            continue
        if use_hint:
            ki = 0
            kj = 0
            for a in range(m1):
                if hp[g, a]:
                    I[ki] = a
                    ki += 1
            for c in range(m2):
                if hq[g, c]:
                    J[kj] = c
                    kj += 1
            if ki == kj and ki >= 2 and _try(G, I, J, ki, tol, scale, p, q):
                done[g] = True
                continue
        for k in range(2, min(m1, m2) + 1):
            for a in range(k):
                I[a] = a
            found = False
            while True:
                for c in range(k):
                    J[c] = c
                while True:
                    if _try(G, I, J, k, tol, scale, p, q):
                        found = True
                        break
                    if not _next_subset(J, k, m2):
                        break
                if found or not _next_subset(I, k, m1):
                    break
            if found:
                done[g] = True
                break
        if not done[g]:
            p[:] = 0.0
            q[:] = 0.0
    return P, Q, done
