"""Two-person zero-sum matrix games.

Convention: the row player picks ``p`` and minimizes ``p @ A @ q``; the
column player picks ``q`` and maximizes it.

:func:`solve_matrix_game` is the reference solver (two independent linear
programs, one per player).  :func:`solve_matrix_games` solves a whole stack
of small games at once by checking square supports with the equalizer
equations, which is what the ODE solvers call thousands of times per sweep;
anything it cannot certify is handed to the LP.  :func:`support_enumeration`
and :func:`brute_force_value` are test oracles.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .errors import MatrixGameFailure, NonFiniteEntry

try:
    from . import _stack_kernel
except ImportError:  # numba missing: the numpy search does the same job, slower
    _stack_kernel = None

DEFAULT_BACKEND = "numpy" if _stack_kernel is None or os.environ.get("RSGAME_NO_JIT") else "compiled"

_LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


@dataclass(frozen=True)
class GameSolution:
    """Value and optimal mixed strategies of one matrix game.

    ``upper`` is what the row strategy guarantees (its worst column payoff),
    ``lower`` what the column strategy guarantees; both equal the value for
    an exact saddle point.
    """

    value: float
    p: np.ndarray
    q: np.ndarray
    upper: float
    lower: float

    @property
    def gap(self) -> float:
        return self.upper - self.lower


def _as_matrix(A) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or 0 in A.shape:
        raise ValueError(f"payoff must be a nonempty matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteEntry("payoff matrix has non-finite entries")
    return A


def _clean(w: np.ndarray) -> np.ndarray:
    w = np.clip(w, 0.0, None)
    return w / w.sum(axis=-1, keepdims=True)


def _finish(A, p, q) -> GameSolution:
    p, q = _clean(p), _clean(q)
    upper = float((p @ A).max())
    lower = float((A @ q).min())
    return GameSolution(0.5 * (upper + lower), p, q, upper, lower)


def saddle_residuals(A, p, q, value) -> tuple[float, float]:
    """How far ``(p, q, value)`` is from a saddle point (both <= 0 when exact)."""
    A = np.asarray(A, dtype=float)
    return float((p @ A).max() - value), float(value - (A @ q).min())


def solve_matrix_game(A) -> GameSolution:
    """Solve a zero-sum game by linear programming.

    The payoff is shifted so every entry is at least one, which makes the
    value positive and lets each player's problem be written in the usual
    normalized form.  Each side is its own LP, so the duality gap of the
    result is a real check rather than an identity.
    """
    A = _as_matrix(A)
    m1, m2 = A.shape
    if m1 == 1:
        return _finish(A, np.ones(1), np.eye(m2)[A[0].argmax()])
    if m2 == 1:
        return _finish(A, np.eye(m1)[A[:, 0].argmin()], np.ones(1))
    B = A - A.min() + 1.0

    # row player: max 1'x  s.t.  B'x <= 1, x >= 0   (p = x / 1'x)
    row = linprog(-np.ones(m1), A_ub=B.T, b_ub=np.ones(m2), bounds=(0, None),
                  method="highs", options=_LP_OPTIONS)
    # column player: min 1'y  s.t.  By >= 1, y >= 0  (q = y / 1'y)
    col = linprog(np.ones(m2), A_ub=-B, b_ub=-np.ones(m1), bounds=(0, None),
                  method="highs", options=_LP_OPTIONS)
    if row.status != 0 or col.status != 0:
        raise MatrixGameFailure(f"LP failed: {row.message} / {col.message}")
    return _finish(A, row.x, col.x)


def _square_support_solutions(S: np.ndarray):
    """Equalizer solutions on square sub-games ``S`` of shape (b, k, k).

    Returns ``(p, q, ok)``: weights on the support and a mask of sub-games
    whose two bordered systems are nonsingular.
    """
    b, k, _ = S.shape
    ones = np.ones((b, 1, k))
    neg = -np.ones((b, k, 1))
    corner = np.zeros((b, 1, 1))
    Mp = np.concatenate([np.concatenate([np.swapaxes(S, 1, 2), neg], 2),
                         np.concatenate([ones, corner], 2)], 1)
    Mq = np.concatenate([np.concatenate([S, neg], 2), np.concatenate([ones, corner], 2)], 1)
    scale = np.maximum(1.0, np.abs(S).max(axis=(1, 2)))
    return _bordered_solve(Mp, Mq, scale, k)


def _bordered_solve(Mp, Mq, scale, k):
    b = Mp.shape[0]
    ok = (np.abs(np.linalg.det(Mp)) > 1e-12 * scale**k) & (np.abs(np.linalg.det(Mq)) > 1e-12 * scale**k)
    out = []
    for M in (Mp, Mq):
        n = M.shape[1]
        rhs = np.zeros((b, n, 1))
        rhs[:, -1] = 1.0
        if ok.all():
            x = np.linalg.solve(M, rhs)[:, :-1, 0]
        else:
            x = np.full((b, n - 1), np.nan)
            if ok.any():
                x[ok] = np.linalg.solve(M[ok], rhs[ok])[:, :-1, 0]
        out.append(x)
    return out[0], out[1], ok


def _support_systems(A: np.ndarray, hp: np.ndarray, hq: np.ndarray):
    """Bordered equalizer systems for supports given as masks.

    For the row strategy the unknowns are ``(p, v)``: one equation
    ``p @ A[:, j] = v`` per support column, ``p_i = 0`` off the row support
    and ``sum p = 1``.  Same for columns.  Masks must have equal counts.
    """
    b, m1, m2 = A.shape
    rows = np.arange(b)[:, None]
    Rp = np.concatenate([
        np.concatenate([np.swapaxes(A, 1, 2), -np.ones((b, m2, 1))], 2),
        np.concatenate([np.broadcast_to(np.eye(m1), (b, m1, m1)), np.zeros((b, m1, 1))], 2),
    ], 1)
    Rq = np.concatenate([
        np.concatenate([A, -np.ones((b, m1, 1))], 2),
        np.concatenate([np.broadcast_to(np.eye(m2), (b, m2, m2)), np.zeros((b, m2, 1))], 2),
    ], 1)
    sel_p = np.nonzero(np.concatenate([hq, ~hp], 1))[1].reshape(b, m1)
    sel_q = np.nonzero(np.concatenate([hp, ~hq], 1))[1].reshape(b, m2)
    last_p = np.concatenate([np.ones((b, 1, m1)), np.zeros((b, 1, 1))], 2)
    last_q = np.concatenate([np.ones((b, 1, m2)), np.zeros((b, 1, 1))], 2)
    Mp = np.concatenate([Rp[rows, sel_p], last_p], 1)
    Mq = np.concatenate([Rq[rows, sel_q], last_q], 1)
    return Mp, Mq


@dataclass(frozen=True)
class BatchSolution:
    """Solutions of a stack of games; arrays carry the stack's leading shape."""

    values: np.ndarray
    p: np.ndarray
    q: np.ndarray
    lp_fallbacks: int = 0

    def supports(self) -> tuple[np.ndarray, np.ndarray]:
        return self.p > 0, self.q > 0


class _Batch:
    def __init__(self, A, tol):
        self.A = A
        b, m1, m2 = A.shape
        self.p = np.zeros((b, m1))
        self.q = np.zeros((b, m2))
        self.done = np.zeros(b, dtype=bool)
        self.tol = tol * np.maximum(1.0, np.abs(A).max(axis=(1, 2)))

    def try_masks(self, idx, hp, hq):
        """Accept the supports ``hp``, ``hq`` (boolean, one row per game in ``idx``)
        wherever the equalizer solution is a saddle point."""
        if not len(idx):
            return
        A = self.A[idx]
        Mp, Mq = _support_systems(A, hp, hq)
        k = hp.sum(1).max()
        scale = np.maximum(1.0, np.abs(A).max(axis=(1, 2)))
        p, q, ok = _bordered_solve(Mp, Mq, scale, k)
        tol = self.tol[idx]
        with np.errstate(invalid="ignore"):
            feasible = ok & np.all(p >= -tol[:, None], 1) & np.all(q >= -tol[:, None], 1)
            p_c, q_c = _clean(np.where(feasible[:, None], p, 1.0)), _clean(np.where(feasible[:, None], q, 1.0))
            upper = np.einsum("ba,bac->bc", p_c, A).max(1)
            lower = np.einsum("bac,bc->ba", A, q_c).min(1)
        good = feasible & (upper - lower <= 2 * tol)
        hit = idx[good]
        self.p[hit] = p_c[good]
        self.q[hit] = q_c[good]
        self.done[hit] = True

    def try_support(self, idx, I, J):
        """Try the same supports ``I``, ``J`` (index lists) on every game in ``idx``."""
        hp = np.zeros((len(idx), self.A.shape[1]), dtype=bool)
        hq = np.zeros((len(idx), self.A.shape[2]), dtype=bool)
        hp[:, list(I)] = True
        hq[:, list(J)] = True
        self.try_masks(idx, hp, hq)

    def open(self, among=None):
        mask = ~self.done if among is None else (~self.done & among)
        return np.flatnonzero(mask)


def _search_numpy(A, hint, tol):
    batch = _Batch(A, tol)
    b, m1, m2 = A.shape
    rowmax = A.max(2)
    i_star = rowmax.argmin(1)
    colmin = A.min(1)
    j_star = colmin.argmax(1)
    hit = np.flatnonzero(rowmax.min(1) - colmin.max(1) <= batch.tol)
    batch.p[hit, i_star[hit]] = 1.0
    batch.q[hit, j_star[hit]] = 1.0
    batch.done[hit] = True

    if hint is not None and not batch.done.all():
        hp, hq = hint
        usable = ~batch.done & (hp.sum(1) == hq.sum(1)) & (hp.sum(1) >= 2)
        idx = np.flatnonzero(usable)
        batch.try_masks(idx, hp[idx], hq[idx])

    for k in range(2, min(m1, m2) + 1):
        for I in itertools.combinations(range(m1), k):
            for J in itertools.combinations(range(m2), k):
                idx = batch.open()
                if not len(idx):
                    break
                batch.try_support(idx, list(I), list(J))
    return batch.p, batch.q, batch.done


def _search_compiled(A, hint, tol):
    b, m1, m2 = A.shape
    if hint is None:
        hp = np.zeros((b, m1), dtype=bool)
        hq = np.zeros((b, m2), dtype=bool)
    else:
        hp, hq = (np.ascontiguousarray(h) for h in hint)
    return _stack_kernel.solve_stack(np.ascontiguousarray(A), hp, hq, hint is not None, tol)


def solve_matrix_games(A, hint: Optional[tuple] = None, tol: float = 1e-11,
                       backend: Optional[str] = None) -> BatchSolution:
    """Solve every game in a stack ``A`` of shape ``(..., m1, m2)``.

    Each game is settled by the first of: a pure saddle point, the square
    support pattern suggested by ``hint`` (supports from a previous,
    nearby solve), any square support pattern in order of size, and
    finally the LP.  A candidate support is accepted only if the resulting
    strategies close the duality gap to within ``tol`` (relative to the
    payoff scale), so the hint changes the search order, never the answer.

    ``backend`` is ``"compiled"`` (numba, the default when available) or
    ``"numpy"``; both run the same search.
    """
    A = np.asarray(A, dtype=float)
    lead = A.shape[:-2]
    m1, m2 = A.shape[-2:]
    A = A.reshape(-1, m1, m2)
    if not np.all(np.isfinite(A)):
        raise NonFiniteEntry("payoff stack has non-finite entries")
    b = len(A)
    if hint is not None:
        hint = tuple(np.asarray(h, dtype=bool).reshape(b, -1) for h in hint)
    backend = backend or DEFAULT_BACKEND
    if backend == "compiled":
        p, q, done = _search_compiled(A, hint, tol)
    elif backend == "numpy":
        p, q, done = _search_numpy(A, hint, tol)
    else:
        raise ValueError(f"unknown backend {backend!r}")

    leftovers = np.flatnonzero(~done)
    for n in leftovers:
        sol = solve_matrix_game(A[n])
        p[n], q[n] = sol.p, sol.q

    upper = np.einsum("ba,bac->bc", p, A).max(1)
    lower = np.einsum("bac,bc->ba", A, q).min(1)
    values = 0.5 * (upper + lower)
    return BatchSolution(
        values.reshape(lead),
        p.reshape(lead + (m1,)),
        q.reshape(lead + (m2,)),
        lp_fallbacks=len(leftovers),
    )


# -- oracles ------------------------------------------------------------------


def support_enumeration(A, tol: float = 1e-9) -> GameSolution:
    """Brute-force oracle: try every square support pair, keep the first saddle.

    Meant for small games (up to about 4x4); independent of the LP code path.
    """
    A = _as_matrix(A)
    m1, m2 = A.shape
    scale = max(1.0, float(np.abs(A).max()))
    for k in range(1, min(m1, m2) + 1):
        for I in itertools.combinations(range(m1), k):
            for J in itertools.combinations(range(m2), k):
                S = A[np.ix_(I, J)]
                pI, qJ, ok = _square_support_solutions(S[None])
                if not ok[0] or pI.min() < -tol or qJ.min() < -tol:
                    continue
                p = np.zeros(m1)
                q = np.zeros(m2)
                p[list(I)] = pI[0]
                q[list(J)] = qJ[0]
                sol = _finish(A, p, q)
                if sol.gap <= tol * scale:
                    return sol
    raise MatrixGameFailure("no nonsingular square support found")


def _simplex_grid(m: int, k: int) -> np.ndarray:
    """All points of the simplex in R^m with coordinates in {0, 1/k, ..., 1}."""
    if m == 1:
        return np.ones((1, 1))
    pts = [c for c in itertools.product(range(k + 1), repeat=m - 1) if sum(c) <= k]
    pts = np.array(pts, dtype=float).reshape(-1, m - 1)
    return np.column_stack([pts, k - pts.sum(1)]) / k


def brute_force_value(A, grid_k: int) -> float:
    """Upper value ``min_p max_q`` with ``p`` restricted to a simplex grid.

    The inner maximum is exact (a linear function peaks at a vertex), so the
    result overestimates the value by at most the grid resolution times the
    payoff range.
    """
    A = _as_matrix(A)
    grid = _simplex_grid(A.shape[0], grid_k)
    return float((grid @ A).max(axis=1).min())
