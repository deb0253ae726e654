"""Game data: controlled generator, running cost, mixed actions and certificates.

States and actions are indexed from 0.  A model holds the pure-action tensors

    rate[i, j, u1, u2]   transition rate from i to j under actions (u1, u2)
    cost[i, u1, u2]      running cost in state i (nonnegative)

and every quantity under mixed actions is the bilinear extension of these.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadTruncationLevel,
    CertificateViolated,
    InvalidMixedAction,
    ModelError,
    NegativeCost,
    NegativeOffDiagonal,
    NonConservativeRow,
    ShapeMismatch,
)

ROW_REPAIR_TOL = 1e-9
MIXED_SUM_TOL = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GameModel:
    """Finite zero-sum game on a controlled continuous-time Markov chain.

    Player 1 (rows, ``u1``) minimizes, player 2 (columns, ``u2``) maximizes.
    ``alpha`` is the discount rate, ``theta_cap`` the upper end of the
    risk-parameter range and ``ref_state`` the state at which ergodic
    eigenfunctions are normalized.
    """

    rate: np.ndarray
    cost: np.ndarray
    alpha: float = 1.0
    theta_cap: float = 1.0
    ref_state: int = 0

    def __post_init__(self):
        rate = _frozen(self.rate)
        cost = _frozen(self.cost)
        if rate.ndim != 4 or rate.shape[0] != rate.shape[1]:
            raise ShapeMismatch(f"rate must have shape (N, N, m1, m2), got {rate.shape}")
        n, _, m1, m2 = rate.shape
        if n < 1 or m1 < 1 or m2 < 1:
            raise ShapeMismatch("empty state or action set")
        if cost.shape != (n, m1, m2):
            raise ShapeMismatch(f"cost must have shape {(n, m1, m2)}, got {cost.shape}")
        if not (np.all(np.isfinite(rate)) and np.all(np.isfinite(cost))):
            raise ModelError("rate and cost tensors must be finite")
        if not self.alpha > 0:
            raise ModelError(f"alpha must be positive, got {self.alpha}")
        if not self.theta_cap > 0:
            raise ModelError(f"theta_cap must be positive, got {self.theta_cap}")
        if not 0 <= int(self.ref_state) < n:
            raise ModelError(f"ref_state {self.ref_state} outside 0..{n - 1}")
        object.__setattr__(self, "rate", rate)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "theta_cap", float(self.theta_cap))
        object.__setattr__(self, "ref_state", int(self.ref_state))

    @property
    def n_states(self) -> int:
        return self.rate.shape[0]

    @property
    def n_actions(self) -> tuple[int, int]:
        return self.rate.shape[2], self.rate.shape[3]

    @property
    def max_exit_rate(self) -> float:
        """M = max over states and pure actions of -rate[i, i]."""
        diag = np.einsum("iiab->iab", self.rate)
        return float(max(0.0, -diag.min()))

    @property
    def cost_sup(self) -> float:
        return float(self.cost.max())

    def replace(self, **changes) -> "GameModel":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ValidationReport:
    model: GameModel
    max_exit_rate: float
    cost_sup: float
    checks: dict
    failures: list = field(default_factory=list)
    repaired_rows: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures


def validate(model: GameModel, raise_on_error: bool = True) -> ValidationReport:
    """Check the generator and cost invariants, repairing tiny row-sum defects.

    Rows whose sum is within ``1e-9`` of zero get their diagonal entry reset
    to minus the off-diagonal mass, so the returned model is conservative to
    rounding.  Larger defects are reported as :class:`NonConservativeRow`.
    """
    rate = np.array(model.rate)
    cost = model.cost
    n = model.n_states
    failures = []

    off = ~np.eye(n, dtype=bool)
    neg = np.argwhere((rate < 0) & off[:, :, None, None])
    failures += [NegativeOffDiagonal(i, j, (a, b), rate[i, j, a, b]) for i, j, a, b in neg]

    row_sum = rate.sum(axis=1)
    bad_rows = np.argwhere(np.abs(row_sum) > ROW_REPAIR_TOL)
    failures += [NonConservativeRow(i, (a, b), row_sum[i, a, b]) for i, a, b in bad_rows]
    repaired = 0
    if not len(bad_rows):
        off_mass = np.where(off[:, :, None, None], rate, 0.0).sum(axis=1)
        idx = np.arange(n)
        repaired = int(np.count_nonzero(rate[idx, idx] != -off_mass))
        rate[idx, idx] = -off_mass

    failures += [NegativeCost(i, (a, b), cost[i, a, b]) for i, a, b in np.argwhere(cost < 0)]

    checks = {
        "nonnegative_off_diagonal": not len(neg),
        "conservative_rows": not len(bad_rows),
        "nonnegative_cost": not np.any(cost < 0),
    }
    if failures and raise_on_error:
        raise failures[0]
    fixed = model.replace(rate=rate) if not len(bad_rows) else model
    return ValidationReport(
        model=fixed,
        max_exit_rate=fixed.max_exit_rate,
        cost_sup=float(cost.max()),
        checks=checks,
        failures=failures,
        repaired_rows=repaired,
    )


# -- mixed actions ------------------------------------------------------------


def mixed_action(weights, size: Optional[int] = None) -> np.ndarray:
    """Validate a probability vector (or a stack of them along the last axis)."""
    w = np.asarray(weights, dtype=float)
    if size is not None and w.shape[-1] != size:
        raise InvalidMixedAction(f"expected {size} weights, got shape {w.shape}")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise InvalidMixedAction(f"weights must be finite and nonnegative: {w}")
    if np.any(np.abs(w.sum(axis=-1) - 1.0) > MIXED_SUM_TOL):
        raise InvalidMixedAction(f"weights must sum to 1: {w.sum(axis=-1)}")
    return w


def pure(k: int, size: int) -> np.ndarray:
    e = np.zeros(size)
    e[k] = 1.0
    return e


def bilinear_rate(model: GameModel, i: int, j: int, v1, v2) -> float:
    """Rate from ``i`` to ``j`` when the players mix with ``v1`` and ``v2``."""
    return float(v1 @ model.rate[i, j] @ v2)


def bilinear_cost(model: GameModel, i: int, v1, v2) -> float:
    return float(v1 @ model.cost[i] @ v2)


def mixed_generator(model: GameModel, v1, v2) -> np.ndarray:
    """Generator matrix under per-state mixed actions ``v1`` (N, m1), ``v2`` (N, m2)."""
    return np.einsum("ijab,ia,ib->ij", model.rate, v1, v2)


def mixed_cost(model: GameModel, v1, v2) -> np.ndarray:
    return np.einsum("iab,ia,ib->i", model.cost, v1, v2)


def truncate_cost(model: GameModel, n: int) -> GameModel:
    """Copy of ``model`` whose cost vanishes outside the first ``n`` states."""
    if not 1 <= n <= model.n_states:
        raise BadTruncationLevel(f"truncation level {n} outside 1..{model.n_states}")
    cost = np.array(model.cost)
    cost[n:] = 0.0
    return model.replace(cost=cost)


# -- strategies ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StrategyProfile:
    """A pair of per-state mixed actions, stationary or tabulated in time.

    Each player's table is either ``(N, m)`` (stationary) or ``(K, N, m)``
    (Markov, piecewise constant on ``[k*dt, (k+1)*dt)``; the last row is
    held beyond the table).  The two players may mix the two forms.
    """

    v1: np.ndarray
    v2: np.ndarray
    dt: Optional[float] = None

    def __post_init__(self):
        v1 = _frozen(mixed_action(self.v1))
        v2 = _frozen(mixed_action(self.v2))
        if v1.ndim not in (2, 3) or v2.ndim not in (2, 3):
            raise InvalidMixedAction("strategy tables must be (N, m) or (K, N, m)")
        if v1.shape[-2] != v2.shape[-2]:
            raise InvalidMixedAction("players disagree on the number of states")
        if (v1.ndim == 3 or v2.ndim == 3) and not (self.dt and self.dt > 0):
            raise InvalidMixedAction("time-indexed tables need a positive dt")
        if v1.ndim == 3 and v2.ndim == 3 and len(v1) != len(v2):
            raise InvalidMixedAction("time tables of different lengths")
        object.__setattr__(self, "v1", v1)
        object.__setattr__(self, "v2", v2)

    @classmethod
    def stationary(cls, v1, v2) -> "StrategyProfile":
        return cls(v1, v2)

    @property
    def kind(self) -> str:
        return "stationary" if self.v1.ndim == 2 and self.v2.ndim == 2 else "markov"

    @property
    def n_segments(self) -> int:
        return max(len(v) if v.ndim == 3 else 1 for v in (self.v1, self.v2))

    def tables(self) -> tuple[np.ndarray, np.ndarray]:
        """Both tables broadcast to ``(K, N, m)``."""
        k = self.n_segments
        return tuple(
            np.broadcast_to(v, (k,) + v.shape) if v.ndim == 2 else v for v in (self.v1, self.v2)
        )

    def segment(self, t: float) -> int:
        if self.kind == "stationary":
            return 0
        return int(min(max(np.floor(t / self.dt), 0), self.n_segments - 1))

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        k = self.segment(t)
        v1, v2 = self.tables()
        return v1[k], v2[k]

    def with_player1(self, v1) -> "StrategyProfile":
        return StrategyProfile(v1, self.v2, self.dt)

    def with_player2(self, v2) -> "StrategyProfile":
        return StrategyProfile(self.v1, v2, self.dt)


# -- certificates -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LyapunovCertificate:
    """Drift data ``(W, delta, b, C)``; validity is decided by :func:`check_lyapunov`."""

    W: np.ndarray
    delta: float
    b: float
    C: tuple

    def __post_init__(self):
        W = _frozen(self.W)
        if W.ndim != 1 or np.any(W < 1):
            raise ModelError("W must be a vector with entries >= 1")
        if not (self.delta > 0 and self.b > 0):
            raise ModelError("delta and b must be positive")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "C", tuple(sorted(int(c) for c in self.C)))

    def indicator(self) -> np.ndarray:
        ind = np.zeros(len(self.W))
        ind[list(self.C)] = 1.0
        return ind

    def w_norm(self, h) -> float:
        return float(np.max(np.abs(h) / self.W))

    @property
    def tkep_threshold(self) -> float:
        d = self.delta
        return 1.0 + self.b * np.exp(1.5 * d) / np.expm1(0.5 * d)

    def c0(self) -> tuple:
        """States whose weight clears the return-time moment threshold."""
        return tuple(int(i) for i in np.flatnonzero(self.W >= self.tkep_threshold))


@dataclass(frozen=True)
class LyapunovReport:
    ok: bool
    worst_slack: np.ndarray
    worst_actions: np.ndarray
    ref_state_margin: float

    @property
    def ref_state_admissible(self) -> bool:
        return self.ref_state_margin >= 0


def pure_drift(model: GameModel, W) -> np.ndarray:
    """Generator applied to ``W`` for every state and pure action pair, (N, m1, m2)."""
    return np.einsum("ijab,j->iab", model.rate, W)


def check_lyapunov(
    model: GameModel, cert: LyapunovCertificate, raise_on_error: bool = True, tol: float = 1e-12
) -> LyapunovReport:
    """Verify ``Pi_v W <= -2 delta W + b 1_C`` over all pure action pairs.

    The drift is bilinear in the mixed pair, so its maximum over the product
    of simplices sits at a vertex and the pure check covers every mixed pair.
    """
    if len(cert.W) != model.n_states:
        raise ShapeMismatch("certificate W does not match the state space")
    W = cert.W
    bound = -2.0 * cert.delta * W + cert.b * cert.indicator()
    slack = bound[:, None, None] - pure_drift(model, W)
    flat = slack.reshape(model.n_states, -1)
    arg = flat.argmin(axis=1)
    worst = flat[np.arange(model.n_states), arg]
    actions = np.stack(np.unravel_index(arg, model.n_actions), axis=1)
    scale = tol * max(1.0, float(np.abs(bound).max()))
    ok = bool(np.all(worst >= -scale))
    if not ok and raise_on_error:
        i = int(np.argmin(worst))
        raise CertificateViolated(i, int(actions[i, 0]), int(actions[i, 1]), float(worst[i]))
    i0 = model.ref_state
    margin = float(W[i0] - (1.0 + cert.b / cert.delta))
    return LyapunovReport(ok, worst, actions, margin)


@dataclass(frozen=True)
class SmallCostReport:
    ok: bool
    cost_sup: float
    delta: float
    theta: float
    theta_max: float

    def __bool__(self):
        return self.ok


def check_small_cost(model: GameModel, cert: LyapunovCertificate, theta: float = 1.0) -> SmallCostReport:
    """Strict small-cost test ``theta * ||r|| < delta / 2``."""
    r = model.cost_sup
    ok = bool(theta * r < cert.delta / 2)
    theta_max = float("inf") if r == 0 else cert.delta / (2 * r)
    return SmallCostReport(ok, r, cert.delta, float(theta), theta_max)


def random_mixed(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Uniform samples from the simplex along the last axis."""
    return rng.dirichlet(np.ones(shape[-1]), size=tuple(shape[:-1]))
