"""Ergodic risk-sensitive game: the eigenvalue problem ``rho psi = H(psi)``.

The finite-horizon value ``psi(t)`` solves ``dpsi/dt = H(psi)`` from
``psi(0) = 1`` and grows like ``exp(rho t)``.  Marching the normalized
profile ``psi / psi(i0)`` with RK4 while accumulating ``ln psi(i0)`` gives
both the growth rate and the eigenfunction without overflow.

Once a stationary pair is fixed, the cost functional is the principal
eigenvalue of ``Pi_v + diag(r_v)`` (:func:`perron_value`), which is how a
solution is certified and how deviations are scored in
:func:`verify_saddle`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import (
    GateFailed,
    MonotonicityViolated,
    NoConvergence,
    NotIrreducible,
    PowerIterationStalled,
    ResidualTooLarge,
    SaddleViolated,
    StepUnstable,
)
from .hamiltonian import hamiltonian_eval
from .model import (
    GameModel,
    LyapunovCertificate,
    StrategyProfile,
    check_lyapunov,
    check_small_cost,
    mixed_cost,
    mixed_generator,
    random_mixed,
    truncate_cost,
    validate,
)

log = logging.getLogger(__name__)

MARCH_TOL = 1e-10
RESIDUAL_TOL = 1e-6
STABILITY = 0.1
MONOTONE_SLACK = 1e-8


@dataclass(frozen=True)
class MarchState:
    t: float
    psi_bar: np.ndarray
    log_psi_ref: float
    rho_estimate: float


@dataclass
class MarchHistory:
    """Every step of a normalized march.

    Row ``k`` holds the state at ``t = k * dt`` and the selectors evaluated
    there (the first RK4 stage of step ``k``).
    """

    dt: float
    times: np.ndarray
    psi_bar: np.ndarray
    log_psi_ref: np.ndarray
    rho_estimate: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    def __len__(self):
        return len(self.times)

    def state(self, k: int) -> MarchState:
        return MarchState(float(self.times[k]), self.psi_bar[k], float(self.log_psi_ref[k]),
                          float(self.rho_estimate[k]))

    def log_psi(self, t) -> np.ndarray:
        """``ln psi(t, .)`` of the unnormalized value, linear in t between steps."""
        t = np.asarray(t, dtype=float)
        logs = np.log(self.psi_bar) + self.log_psi_ref[:, None]
        x = np.clip(t / self.dt, 0, len(self.times) - 1)
        k = np.minimum(np.floor(x).astype(int), len(self.times) - 2)
        w = (x - k)[..., None]
        return (1 - w) * logs[k] + w * logs[k + 1]

    def psi(self, t) -> np.ndarray:
        return np.exp(self.log_psi(t))

    def policy(self, horizon: float) -> StrategyProfile:
        """Markov pair that is optimal over ``[0, horizon]``.

        At elapsed time ``s`` the remaining horizon is ``horizon - s``, so the
        selectors are read backwards from the history.
        """
        K = int(round(horizon / self.dt))
        if K < 1 or K >= len(self.times) or abs(K * self.dt - horizon) > 1e-9 * max(1.0, horizon):
            raise ValueError(f"horizon {horizon} is not a multiple of dt inside the history")
        idx = K - 1 - np.arange(K)
        return StrategyProfile(self.v1[idx], self.v2[idx], self.dt)


@dataclass
class ErgodicSolution:
    """Value ``rho``, eigenfunction ``psi_hat`` (``psi_hat[i0] = 1``) and the stationary saddle pair."""

    rho: float
    psi_hat: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    truncation_level: int
    ref_state: int = 0
    diagnostics: dict = field(default_factory=dict)
    history: Optional[MarchHistory] = None

    @property
    def profile(self) -> StrategyProfile:
        return StrategyProfile(self.v1, self.v2)


def ergodic_residual(model: GameModel, rho: float, psi) -> float:
    """``max_i |rho psi(i) - H(psi)(i)|``."""
    psi = np.asarray(psi, dtype=float)
    return float(np.abs(rho * psi - hamiltonian_eval(model, psi).H).max())


def _grow(a: np.ndarray, cap: int) -> np.ndarray:
    out = np.empty((cap,) + a.shape[1:])
    out[:len(a)] = a
    return out


def default_dt(model: GameModel) -> float:
    scale = model.max_exit_rate + model.cost_sup
    return STABILITY / scale if scale > 0 else STABILITY


def march_finite_horizon(
    model: GameModel,
    T_max: float = 500.0,
    dt: Optional[float] = None,
    tol: float = MARCH_TOL,
    W=None,
    psi0=None,
    min_time: float = 0.0,
) -> tuple[MarchHistory, ErgodicSolution]:
    """Integrate ``dpsi/dt = H(psi)`` in normalized variables until it settles.

    Each RK4 step starts from the normalized profile, divides the result by
    its value at the reference state and adds the log of that factor to the
    accumulator.  The growth rate estimate is the least-squares slope of the
    accumulator over the trailing ``max(10, 1/dt)`` steps.  The march stops
    once both the rate estimate and the profile (in the ``W``-weighted sup
    norm) have moved less than ``tol`` over the last unit of time.

    The returned candidate has ``rho = H(psi_hat)(i0)``, the exact growth
    factor of the final profile, and the selectors of that last evaluation.
    """
    model = validate(model).model
    N = model.n_states
    i0 = model.ref_state
    dt = default_dt(model) if dt is None else float(dt)
    if dt <= 0 or dt * (model.max_exit_rate + model.cost_sup) > STABILITY * (1 + 1e-12):
        raise StepUnstable(
            f"dt = {dt:g} violates dt * (M + ||r||) <= {STABILITY} "
            f"(M + ||r|| = {model.max_exit_rate + model.cost_sup:g})")
    W = np.ones(N) if W is None else np.asarray(W, dtype=float)
    window = max(10, int(round(1.0 / dt)))
    lag = max(1, int(round(1.0 / dt)))
    n_max = int(math.ceil(T_max / dt))
    n_min = int(math.ceil(min_time / dt))

    psi = np.ones(N) if psi0 is None else np.asarray(psi0, dtype=float) / psi0[i0]
    m1, m2 = model.n_actions
    cap = min(n_max + 1, 4096)
    psis = np.empty((cap, N))
    logs = np.empty(cap)
    rhos = np.empty(cap)
    v1s = np.empty((cap, N, m1))
    v2s = np.empty((cap, N, m2))
    # least-squares slope over window + 1 equally spaced points is a dot product
    kc = np.arange(window + 1) - window / 2.0
    slope_w = kc / ((kc * kc).sum() * dt)
    log_ref = 0.0
    hint = None
    converged = False
    for k in range(n_max + 1):
        r1 = hamiltonian_eval(model, psi, hint=hint)
        hint = r1.hint
        if k == cap:
            cap = min(2 * cap, n_max + 1)
            psis, logs, rhos, v1s, v2s = (_grow(a, cap) for a in (psis, logs, rhos, v1s, v2s))
        psis[k] = psi
        logs[k] = log_ref
        v1s[k] = r1.v1
        v2s[k] = r1.v2
        if k >= window:
            rhos[k] = slope_w @ logs[k - window:k + 1]
        else:
            rhos[k] = r1.H[i0] if k == 0 else log_ref / (k * dt)
        if k >= max(lag + window, n_min):
            d_rho = abs(rhos[k] - rhos[k - lag])
            d_psi = float(np.max(np.abs(psi - psis[k - lag]) / W))
            if d_rho < tol * max(1.0, abs(rhos[k])) and d_psi < tol:
                converged = True
                break
        if k == n_max:
            break
        k1 = r1.H
        k2 = hamiltonian_eval(model, psi + 0.5 * dt * k1, hint=hint).H
        k3 = hamiltonian_eval(model, psi + 0.5 * dt * k2, hint=hint).H
        k4 = hamiltonian_eval(model, psi + dt * k3, hint=hint).H
        new = psi + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(new > 0) or not np.all(np.isfinite(new)):
            raise StepUnstable(f"non-positive value after step {k} (dt = {dt:g})")
        g = new[i0]
        psi = new / g
        psi[i0] = 1.0
        log_ref += math.log(g)

    K = k + 1
    history = MarchHistory(dt, dt * np.arange(K), psis[:K].copy(), logs[:K].copy(),
                           rhos[:K].copy(), v1s[:K].copy(), v2s[:K].copy())
    if not converged:
        d_rho = abs(rhos[k] - rhos[k - lag]) if K > lag else math.inf
        d_psi = float(np.max(np.abs(psis[k] - psis[k - lag]) / W)) if K > lag else math.inf
        raise NoConvergence(f"T_max = {T_max:g}", f"last changes: rho {d_rho:.3e}, psi {d_psi:.3e}")

    final = hamiltonian_eval(model, psi, hint=hint)
    rho = float(final.H[i0])
    cand = ErgodicSolution(
        rho=rho,
        psi_hat=psi.copy(),
        v1=final.v1,
        v2=final.v2,
        truncation_level=N,
        ref_state=i0,
        diagnostics={
            "march_time": float(history.times[-1]),
            "steps": K - 1,
            "dt": dt,
            "rho_slope": float(rhos[k]),
            "residual": float(np.abs(rho * psi - final.H).max()),
        },
        history=history,
    )
    return history, cand


def solve_ergodic(
    model: GameModel,
    cert: Optional[LyapunovCertificate] = None,
    levels: Optional[Sequence[int]] = None,
    *,
    T_max: float = 500.0,
    dt: Optional[float] = None,
    tol: float = MARCH_TOL,
    residual_tol: float = RESIDUAL_TOL,
    override_gates: bool = False,
) -> ErgodicSolution:
    """Solve the ergodic equation through a ladder of cost truncations.

    The drift certificate and the small-cost condition are checked first;
    with ``override_gates`` a failure is only recorded.  Each level ``n``
    marches the model with cost kept on the first ``n`` states, warm-started
    from the previous level.  Values must not decrease along the ladder.
    """
    model = validate(model).model
    N = model.n_states
    gates = {"lyapunov": None, "small_cost": None, "override": bool(override_gates)}
    if cert is None:
        if not override_gates:
            raise GateFailed("lyapunov", "(no certificate supplied)")
    else:
        lyap = check_lyapunov(model, cert, raise_on_error=False)
        small = check_small_cost(model, cert)
        gates.update(lyapunov=lyap.ok, small_cost=small.ok,
                     ref_state_admissible=lyap.ref_state_admissible, theta_max=small.theta_max)
        if not override_gates:
            if not lyap.ok:
                i = int(np.argmin(lyap.worst_slack))
                raise GateFailed("lyapunov", f"(state {i}, slack {lyap.worst_slack[i]:.3e})")
            if not small.ok:
                raise GateFailed("small_cost", f"(||r|| = {small.cost_sup:g}, delta = {small.delta:g})")
    levels = [N] if levels is None else [int(n) for n in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"truncation levels must increase: {levels}")
    W = None if cert is None else cert.W

    ladder = []
    psi0 = None
    sol = None
    for n in levels:
        model_n = truncate_cost(model, n)
        _, sol = march_finite_horizon(model_n, T_max=T_max, dt=dt, tol=tol, W=W, psi0=psi0)
        sol.truncation_level = n
        if ladder and sol.rho < ladder[-1][1] - MONOTONE_SLACK:
            raise MonotonicityViolated(
                f"rho at level {n} is {sol.rho:.10g} < {ladder[-1][1]:.10g} at level {ladder[-1][0]}")
        ladder.append((n, sol.rho))
        psi0 = sol.psi_hat

    residual = sol.diagnostics["residual"]
    sol.diagnostics.update(gates=gates, ladder=ladder, residual_tol=residual_tol)
    if cert is not None:
        sol.diagnostics["w_bound_margin"] = float(np.min(cert.W - sol.psi_hat))
    if residual > residual_tol * max(1.0, abs(sol.rho)):
        raise ResidualTooLarge(f"ergodic residual {residual:.3e} exceeds {residual_tol:g} * max(1, |rho|)")
    return sol


# -- Perron oracle ------------------------------------------------------------


class PerronResult(NamedTuple):
    lam: float
    vec: np.ndarray


def cost_generator(model: GameModel, v1, v2) -> np.ndarray:
    """``Pi_v + diag(r_v)`` for a stationary pair."""
    return mixed_generator(model, v1, v2) + np.diag(mixed_cost(model, v1, v2))


def is_irreducible(A: np.ndarray) -> bool:
    adj = (A > 0) & ~np.eye(len(A), dtype=bool)
    n, _ = connected_components(adj, directed=True, connection="strong")
    return n == 1


def perron_value(model: GameModel, v1, v2, tol: float = 1e-13, max_squarings: int = 60) -> PerronResult:
    """Principal eigenpair of ``A = Pi_v + diag(r_v)`` for a stationary pair.

    Power iteration runs on the nonnegative matrix ``P = I + A / L`` with
    ``L = M + ||r|| + 1``.  When progress is slow the iteration matrix is
    squared (rescaled), which doubles the effective step count each time.
    Convergence is declared from the Collatz-Wielandt bracket
    ``min_i (Ax)_i / x_i <= lambda <= max_i (Ax)_i / x_i``; the midpoint is
    returned and the eigenvector is scaled to 1 at the reference state.
    """
    A = cost_generator(model, v1, v2)
    N = len(A)
    if not is_irreducible(A) and N > 1:
        raise NotIrreducible("chain under the given stationary pair is not irreducible")
    L = model.max_exit_rate + model.cost_sup + 1.0
    P = np.eye(N) + A / L
    Q = P.copy()
    x = np.ones(N)
    scale = max(1.0, float(np.abs(A).max()))
    for _ in range(max_squarings + 1):
        for _ in range(30):
            y = Q @ x
            x = y / y.max()
            Ax = A @ x
            ratios = Ax / x
            lo, hi = ratios.min(), ratios.max()
            if hi - lo <= tol * scale:
                vec = x / x[model.ref_state]
                return PerronResult(float(0.5 * (lo + hi)), vec)
        Q = Q @ Q
        Q /= Q.max()
    raise PowerIterationStalled(f"Collatz-Wielandt bracket still {hi - lo:.3e} wide")


def spectral_abscissa(model: GameModel, v1, v2) -> float:
    """Largest real eigenvalue of ``Pi_v + diag(r_v)``; works for reducible chains too."""
    return float(np.linalg.eigvals(cost_generator(model, v1, v2)).real.max())


def _growth(model, v1, v2) -> float:
    try:
        return perron_value(model, v1, v2).lam
    except NotIrreducible:
        return spectral_abscissa(model, v1, v2)


# -- saddle verification ------------------------------------------------------


@dataclass
class SaddleReport:
    """Worst deviation margins; a margin above ``tol`` means a profitable deviation.

    ``margin2 = max over player-2 deviations of lambda - rho`` and
    ``margin1 = max over player-1 deviations of rho - lambda``.
    """

    rho: float
    lam_star: float
    margin1: float
    margin2: float
    worst1: np.ndarray
    worst2: np.ndarray
    tol: float
    checked: dict

    @property
    def ok(self) -> bool:
        return self.margin1 <= self.tol and self.margin2 <= self.tol


def best_response(model: GameModel, fixed, player: int, max_iter: int = 200) -> tuple[float, np.ndarray]:
    """Exact best stationary reply to a fixed stationary strategy of the other player.

    Player 2 maximizes the principal eigenvalue, player 1 minimizes it.
    Policy iteration: with eigenvector ``phi`` of the current reply, switch
    each state to the pure action that improves ``(A_u phi)(i)``.  If
    ``A' phi >= lam phi`` the new eigenvalue is at least ``lam``
    (subinvariance), and at termination ``A_v phi <= lam phi`` for every
    mixed ``v``, so no mixed reply can do better either.
    """
    N = model.n_states
    m = model.n_actions[player - 1]
    sign = 1.0 if player == 2 else -1.0
    fixed = np.asarray(fixed, dtype=float)

    def pair(v):
        return (fixed, v) if player == 2 else (v, fixed)

    # candidate rows (N, m, N): A row of state i under pure action u
    if player == 2:
        rate = np.einsum("ijab,ia->ibj", model.rate, fixed)
        cost = np.einsum("iab,ia->ib", model.cost, fixed)
    else:
        rate = np.einsum("ijab,ib->iaj", model.rate, fixed)
        cost = np.einsum("iab,ib->ia", model.cost, fixed)

    # start from the pure action that is best for the one-step cost
    acts = (sign * cost).argmax(axis=1)
    lam = -math.inf * sign
    for _ in range(max_iter):
        v = np.eye(m)[acts]
        try:
            lam, phi = perron_value(model, *pair(v))
        except NotIrreducible:
            lam = spectral_abscissa(model, *pair(v))
            return lam, v
        score = np.einsum("iuj,j->iu", rate, phi) + cost * phi[:, None]
        cur = score[np.arange(N), acts]
        best = (sign * score).argmax(axis=1)
        gain = sign * (score[np.arange(N), best] - cur)
        improve = gain > 1e-12 * max(1.0, float(np.abs(score).max()))
        if not improve.any():
            return lam, v
        acts = np.where(improve, best, acts)
    raise NoConvergence("best-response policy iteration", f"{max_iter} iterations")


def pure_growth_rates(model: GameModel, fixed, player: int, chunk: int = 4096):
    """Growth rate of every pure stationary reply to a fixed stationary strategy.

    Yields ``(actions, lam)`` blocks: ``actions`` is (k, N) and ``lam`` the
    spectral abscissa of each ``Pi_v + diag(r_v)``, computed by batched
    dense eigenvalues.  This is the brute-force route, independent of the
    power iteration in :func:`perron_value`.
    """
    N = model.n_states
    m = model.n_actions[player - 1]
    fixed = np.asarray(fixed, dtype=float)
    if player == 2:
        rows = np.einsum("ijab,ia->ibj", model.rate, fixed)
        cost = np.einsum("iab,ia->ib", model.cost, fixed)
    else:
        rows = np.einsum("ijab,ib->iaj", model.rate, fixed)
        cost = np.einsum("iab,ib->ia", model.cost, fixed)
    idx = np.arange(N)
    total = m ** N
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total))
        # base-m digits of the strategy index, state 0 most significant
        acts = (codes[:, None] // m ** (N - 1 - idx)) % m
        A = rows[idx, acts]
        A[:, idx, idx] += cost[idx, acts]
        yield acts, np.linalg.eigvals(A).real.max(axis=1)


def verify_saddle(
    model: GameModel,
    solution: ErgodicSolution,
    *,
    n_mixed: int = 100,
    seed: int = 0,
    tol: float = 1e-6,
    enumerate_limit: int = 2 ** 17,
    raise_on_error: bool = False,
) -> SaddleReport:
    """Score unilateral stationary deviations against ``rho``.

    Deviations checked for each player: the exact best stationary reply
    (:func:`best_response`), every pure stationary strategy when there are
    at most ``enumerate_limit`` of them (:func:`pure_growth_rates`), and
    ``n_mixed`` random mixed ones.
    """
    rho = solution.rho
    v1s, v2s = solution.v1, solution.v2
    N = model.n_states
    m1, m2 = model.n_actions
    rng = np.random.default_rng(seed)
    lam_star = _growth(model, v1s, v2s)

    worst = {1: (-math.inf, None), 2: (-math.inf, None)}
    checked = {1: 0, 2: 0}

    def score(player, v):
        lam = _growth(model, v1s, v) if player == 2 else _growth(model, v, v2s)
        margin = lam - rho if player == 2 else rho - lam
        checked[player] += 1
        if margin > worst[player][0]:
            worst[player] = (margin, v)

    for player, m in ((1, m1), (2, m2)):
        other = v2s if player == 1 else v1s
        lam, v = best_response(model, other, player)
        checked[player] += 1
        margin = lam - rho if player == 2 else rho - lam
        if margin > worst[player][0]:
            worst[player] = (margin, v)
        if m ** N <= enumerate_limit:
            for acts, lam in pure_growth_rates(model, other, player):
                margins = lam - rho if player == 2 else rho - lam
                k = int(np.argmax(margins))
                checked[player] += len(lam)
                if margins[k] > worst[player][0]:
                    worst[player] = (float(margins[k]), np.eye(m)[acts[k]])
        for _ in range(n_mixed):
            score(player, random_mixed(rng, (N, m)))

    report = SaddleReport(rho, lam_star, worst[1][0], worst[2][0], worst[1][1], worst[2][1], tol,
                          {"player1": checked[1], "player2": checked[2]})
    if raise_on_error and not report.ok:
        p = 1 if report.margin1 > report.margin2 else 2
        raise SaddleViolated(p, worst[p][1], worst[p][0])
    return report
