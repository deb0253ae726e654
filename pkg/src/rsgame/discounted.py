"""Discounted risk-sensitive game: the HJI equation as an ODE in the risk parameter.

The value ``psi(theta, i)`` solves

    alpha * theta * dpsi/dtheta = H_theta(psi),   psi(0, .) = 1,

where ``H_theta`` is the Isaacs min-max of the stage game with cost weight
``theta``.  The equation is singular at ``theta = 0``, so it is started at a
small ``epsilon`` from the upper bound ``exp(epsilon * ||r|| / alpha)`` and
written in integral form

    psi(eta) = psi(a) + (1/alpha) * int_a^eta H_theta(psi(theta)) / theta dtheta.

On each interval ``[a, a + delta]`` short enough for the integral operator
to contract, Picard iteration (composite Simpson on a uniform grid) gives the
fixed point; the terminal slice seeds the next interval.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import GridTooCoarse, HorizonBeyondEpsilon, NoConvergence, ResidualTooLarge, SolverError
from .hamiltonian import hamiltonian_eval
from .model import GameModel, StrategyProfile, validate

log = logging.getLogger(__name__)

PICARD_TOL = 1e-10
MAX_SWEEPS = 200
MIN_NODES = 33
MAX_NODES = 1025
SIMPSON_TOL = 1e-10
RESIDUAL_TOL = 1e-6


class ContractionStep(NamedTuple):
    delta: float
    kappa: float


def contraction_constant(delta: float, epsilon: float, alpha: float, cost_sup: float, M: float) -> float:
    """Lipschitz bound of the integral operator on ``[epsilon, epsilon + delta]``."""
    return (cost_sup * delta + 2.0 * M * math.log1p(delta / epsilon)) / alpha


def contraction_step(model: GameModel, epsilon: float, alpha: Optional[float] = None,
                     safety: float = 0.5) -> ContractionStep:
    """Largest interval length whose contraction constant stays within ``safety``."""
    alpha = model.alpha if alpha is None else alpha
    r, M = model.cost_sup, model.max_exit_rate
    if r == 0 and M == 0:
        return ContractionStep(math.inf, 0.0)

    def kappa(d):
        return contraction_constant(d, epsilon, alpha, r, M)

    hi = epsilon
    while kappa(hi) <= safety:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if kappa(mid) <= safety:
            lo = mid
        else:
            hi = mid
    return ContractionStep(lo, kappa(lo))


def cumulative_simpson(g: np.ndarray, h: float) -> np.ndarray:
    """Running integral of samples ``g`` (uniform spacing ``h``, odd count) along axis 0.

    Even nodes get composite Simpson; odd nodes add the quadratic rule
    ``h/12 (5 g0 + 8 g1 - g2)`` over their last half panel.
    """
    n = len(g)
    out = np.zeros_like(g)
    panels = h / 3.0 * (g[0:-2:2] + 4.0 * g[1:-1:2] + g[2::2])
    out[2::2] = np.cumsum(panels, axis=0)
    out[1::2] = out[0:-2:2] + h / 12.0 * (5.0 * g[0:-2:2] + 8.0 * g[1:-1:2] - g[2::2])
    assert n % 2 == 1
    return out


def _simpson_error(g: np.ndarray, h: float) -> np.ndarray:
    """Richardson estimate of the Simpson error over the whole interval."""
    fine = h / 3.0 * (g[0:-2:2] + 4.0 * g[1:-1:2] + g[2::2]).sum(axis=0)
    if (len(g) - 1) % 4:
        return np.full(g.shape[1:], np.inf)
    gc = g[::2]
    coarse = 2 * h / 3.0 * (gc[0:-2:2] + 4.0 * gc[1:-1:2] + gc[2::2]).sum(axis=0)
    return np.abs(fine - coarse) / 15.0


@dataclass
class DiscountedSolution:
    """Value ``psi`` (K, N) on an increasing ``theta`` grid with saddle selectors."""

    theta: np.ndarray
    psi: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    epsilon: float
    alpha: float
    diagnostics: dict = field(default_factory=dict)

    def node(self, theta: float) -> int:
        return int(np.abs(self.theta - theta).argmin())

    def psi_at(self, theta: float) -> np.ndarray:
        """Values at the grid node nearest to ``theta``."""
        return self.psi[self.node(theta)]

    @property
    def theta_query(self) -> float:
        return float(self.theta[-1])


def _picard(model, theta, f, f_a, alpha, hint=None):
    weight = theta[:, None]
    res = hamiltonian_eval(model, f, weight, hint=hint)
    g = res.H / weight
    return f_a[None, :] + cumulative_simpson(g, theta[1] - theta[0]) / alpha, g, res


def upper_bound(model: GameModel, theta) -> np.ndarray:
    """``exp(theta ||r|| / alpha)``, the value of always paying the largest cost."""
    return np.exp(np.asarray(theta, dtype=float) * model.cost_sup / model.alpha)


def picard_apply(model: GameModel, theta, f, f_a=None) -> np.ndarray:
    """One application of the integral operator on the uniform grid ``theta``.

    ``(T f)(eta) = f_a + (1/alpha) int_{theta_0}^eta H_theta(f(theta)) / theta dtheta``
    with ``f`` of shape ``(len(theta), N)`` and Simpson quadrature (odd node
    count).  ``f_a`` defaults to ``exp(theta_0 ||r|| / alpha)``, the value
    that starts the march.
    """
    theta = np.asarray(theta, dtype=float)
    f = np.asarray(f, dtype=float)
    if len(theta) % 2 == 0 or len(theta) < 3:
        raise ValueError("picard_apply needs an odd number (>= 3) of nodes")
    if f_a is None:
        f_a = np.full(model.n_states, upper_bound(model, theta[0]))
    return _picard(model, theta, f, np.asarray(f_a, dtype=float), model.alpha)[0]


def _solve_interval(model, a, b, f_a, alpha, kappa, n_nodes, picard_tol, max_sweeps, guess=None):
    theta = np.linspace(a, b, n_nodes)

    if guess is None:
        g_a = hamiltonian_eval(model, f_a, a).H / a
        f = f_a[None, :] + (theta - a)[:, None] * g_a[None, :] / alpha
    else:
        f = guess
    hint = None
    prev_diff = None
    measured = 0.0
    for sweep in range(1, max_sweeps + 1):
        new, g, res = _picard(model, theta, f, f_a, alpha, hint)
        hint = res.hint
        diff = float(np.abs(new - f).max())
        scale = max(1.0, float(np.abs(new).max()))
        if prev_diff is not None and prev_diff > 1e-12 * scale:
            ratio = diff / prev_diff
            measured = max(measured, ratio)
            if ratio > 1.01 * kappa + 1e-9:
                raise SolverError(
                    f"Picard sweep on [{a:.6g}, {b:.6g}] contracted by {ratio:.4g} > bound {kappa:.4g}"
                )
        f = new
        prev_diff = diff
        if diff <= picard_tol * scale:
            break
    else:
        raise NoConvergence(f"interval [{a:.6g}, {b:.6g}]", f"{max_sweeps} sweeps, last change {diff:.3e}")
    weight = theta[:, None]
    res = hamiltonian_eval(model, f, weight, hint=hint)
    return theta, f, res.H / weight, res, sweep, measured


def solve_discounted(
    model: GameModel,
    epsilon: Optional[float] = None,
    theta_query: Optional[float] = None,
    *,
    safety: float = 0.5,
    checkpoints: Sequence[float] = (),
    min_nodes: int = MIN_NODES,
    picard_tol: float = PICARD_TOL,
    simpson_tol: float = SIMPSON_TOL,
    residual_tol: Optional[float] = RESIDUAL_TOL,
    cross_check: bool = False,
) -> DiscountedSolution:
    """March the epsilon-started HJI equation from ``epsilon`` to ``theta_query``.

    Intervals are sized by :func:`contraction_step` from their own left end
    and clipped to land on every checkpoint.  On each interval the node count
    starts at ``min_nodes`` and doubles until the Simpson error estimate of
    the integrand drops below ``simpson_tol`` (relative).  With
    ``residual_tol`` set, the central-difference residual of the ODE at the
    interior nodes is checked before returning.  ``cross_check`` integrates
    each interval a second time with classical RK4 and records the largest
    disagreement.
    """
    model = validate(model).model
    alpha = model.alpha
    theta_query = model.theta_cap if theta_query is None else float(theta_query)
    epsilon = 1e-3 * model.theta_cap if epsilon is None else float(epsilon)
    if not 0 < epsilon < theta_query:
        raise ValueError(f"need 0 < epsilon < theta_query, got {epsilon}, {theta_query}")
    if theta_query * model.cost_sup / alpha > 600:
        log.warning("theta*||r||/alpha = %.1f: values near exp(600) may overflow",
                    theta_query * model.cost_sup / alpha)
    if min_nodes % 2 == 0 or (min_nodes - 1) % 4:
        raise ValueError("min_nodes must be 1 mod 4")

    stops = sorted({float(c) for c in checkpoints if epsilon < c < theta_query} | {theta_query})
    h_eps = upper_bound(model, epsilon)
    a = epsilon
    f_a = np.full(model.n_states, h_eps)
    thetas, psis, v1s, v2s = [], [], [], []
    info = {"intervals": 0, "sweeps": 0, "max_kappa": 0.0, "max_measured_contraction": 0.0,
            "max_nodes": 0, "rk4_discrepancy": 0.0 if cross_check else None, "band_projection": 0.0}
    while stops:
        step = contraction_step(model, a, alpha, safety)
        b = min(a + step.delta, stops[0])
        if stops[0] - b <= 1e-12 * stops[0]:
            b = stops[0]
        if b == stops[0]:
            stops.pop(0)
        kappa = contraction_constant(b - a, a, alpha, model.cost_sup, model.max_exit_rate)
        n = min_nodes
        guess = None
        while True:
            theta, f, g, res, sweeps, measured = _solve_interval(
                model, a, b, f_a, alpha, kappa, n, picard_tol, MAX_SWEEPS, guess)
            info["sweeps"] += sweeps
            scale = float(np.abs(f).max())
            err = float(_simpson_error(g, theta[1] - theta[0]).max()) / alpha
            local = _interval_residual(theta, f, g, alpha)
            simpson_ok = err <= simpson_tol * max(1.0, scale)
            residual_ok = residual_tol is None or local <= 0.5 * residual_tol * scale
            if simpson_ok and residual_ok:
                break
            if 2 * n - 1 > MAX_NODES:
                raise GridTooCoarse(
                    f"[{a:.6g}, {b:.6g}] with {n} nodes: Simpson error {err:.3e}, "
                    f"residual {local:.3e}")
            fine = np.linspace(a, b, 2 * n - 1)
            guess = np.stack([np.interp(fine, theta, f[:, i]) for i in range(f.shape[1])], axis=1)
            n = 2 * n - 1
        # the exact solution lies in [1, upper_bound]; projecting removes overshoot
        # from rounding or quadrature when it runs along an edge of the band
        band = np.clip(f, 1.0, upper_bound(model, theta)[:, None])
        info["band_projection"] = max(info["band_projection"], float(np.abs(band - f).max()))
        f = band
        if cross_check:
            info["rk4_discrepancy"] = max(info["rk4_discrepancy"], _rk4_discrepancy(model, theta, f))
        skip = 1 if thetas else 0
        thetas.append(theta[skip:])
        psis.append(f[skip:])
        v1s.append(res.v1[skip:])
        v2s.append(res.v2[skip:])
        info["intervals"] += 1
        info["max_kappa"] = max(info["max_kappa"], kappa)
        info["max_measured_contraction"] = max(info["max_measured_contraction"], measured)
        info["max_nodes"] = max(info["max_nodes"], n)
        a, f_a = b, f[-1]

    sol = DiscountedSolution(np.concatenate(thetas), np.concatenate(psis), np.concatenate(v1s),
                             np.concatenate(v2s), epsilon, alpha, info)
    res_max = float(discounted_residual(model, sol).max()) if len(sol.theta) > 2 else 0.0
    info["residual"] = res_max
    info["residual_scale"] = float(np.abs(sol.psi).max())
    if residual_tol is not None and res_max > residual_tol * info["residual_scale"]:
        raise ResidualTooLarge(
            f"HJI residual {res_max:.3e} exceeds {residual_tol:g} * ||psi|| = "
            f"{residual_tol * info['residual_scale']:.3e}")
    return sol


def _interval_residual(theta, f, g, alpha) -> float:
    """Central-difference residual at the interior nodes of one interval.

    ``g`` is the integrand ``H_theta(f) / theta`` at the nodes.
    """
    h = theta[1] - theta[0]
    d = (f[2:] - f[:-2]) / (2 * h)
    t = theta[1:-1, None]
    return float(np.abs(alpha * t * d - t * g[1:-1]).max())


def _rk4_discrepancy(model, theta, f) -> float:
    """Integrate the interval again with RK4 on the same nodes; max difference."""
    alpha = model.alpha

    def rhs(t, y):
        return hamiltonian_eval(model, y, t).H / (alpha * t)

    y = f[0].copy()
    worst = 0.0
    for k in range(len(theta) - 1):
        t, h = theta[k], theta[k + 1] - theta[k]
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        worst = max(worst, float(np.abs(y - f[k + 1]).max()))
    return worst


def discounted_residual(model: GameModel, sol: DiscountedSolution) -> np.ndarray:
    """``|alpha theta dpsi/dtheta - H_theta(psi)|`` at interior nodes, (K-2, N).

    The derivative is the second-order central difference on the (possibly
    nonuniform) grid.
    """
    dpsi = np.gradient(sol.psi, sol.theta, axis=0)
    H = hamiltonian_eval(model, sol.psi, sol.theta[:, None]).H
    res = np.abs(sol.alpha * sol.theta[:, None] * dpsi - H)
    return res[1:-1]


def refine_epsilon(
    model: GameModel,
    theta_query: Optional[float] = None,
    tol: float = 1e-6,
    *,
    epsilon0: Optional[float] = None,
    max_halvings: int = 40,
    **solve_kw,
) -> DiscountedSolution:
    """Halve epsilon until two successive solutions agree to ``tol`` (sup norm).

    Solutions are compared at a fixed set of checkpoints that every solve
    places on its grid.  The history of differences is left in
    ``diagnostics["refinement"]``.
    """
    theta_query = model.theta_cap if theta_query is None else float(theta_query)
    eps = 1e-3 * model.theta_cap if epsilon0 is None else float(epsilon0)
    checkpoints = [c * theta_query for c in (0.125, 0.25, 0.5, 1.0) if c * theta_query > 2 * eps]
    prev = solve_discounted(model, eps, theta_query, checkpoints=checkpoints, **solve_kw)
    history = [(eps, None)]
    for _ in range(max_halvings):
        eps /= 2.0
        cur = solve_discounted(model, eps, theta_query, checkpoints=checkpoints, **solve_kw)
        diff = max(float(np.abs(cur.psi_at(c) - prev.psi_at(c)).max()) for c in checkpoints)
        history.append((eps, diff))
        prev = cur
        if diff < tol:
            cur.diagnostics["refinement"] = history
            return cur
    raise NoConvergence("epsilon refinement", f"{max_halvings} halvings, last difference {diff:.3e}")


@dataclass
class MarkovPolicy:
    """Saddle selectors sampled along ``theta(t) = theta * exp(-alpha t)``."""

    times: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    dt: float
    theta: float
    truncated: bool
    t_epsilon: float

    @property
    def profile(self) -> StrategyProfile:
        return StrategyProfile(self.v1, self.v2, self.dt)


def extract_markov_policy(sol: DiscountedSolution, theta: float, T_horizon: float, dt: float,
                          strict: bool = False) -> MarkovPolicy:
    """Tabulate the Markov saddle pair on ``[0, T_horizon]`` with step ``dt``.

    The selector used on ``[t, t + dt)`` is the one stored at the grid node
    nearest to ``theta * exp(-alpha t)``.  Past ``T_eps`` (where the risk
    parameter reaches ``epsilon``) the table is cut short and flagged, or
    :class:`HorizonBeyondEpsilon` is raised when ``strict``.
    """
    alpha = sol.alpha
    if not sol.epsilon <= theta <= sol.theta[-1] * (1 + 1e-12):
        raise ValueError(f"theta {theta} outside the solved range [{sol.epsilon}, {sol.theta[-1]}]")
    t_eps = math.log(theta / sol.epsilon) / alpha
    K = max(1, int(math.ceil(T_horizon / dt - 1e-12)))
    times = dt * np.arange(K)
    truncated = False
    if times[-1] > t_eps or T_horizon > t_eps:
        if strict:
            raise HorizonBeyondEpsilon(t_eps)
        keep = times <= t_eps
        keep[0] = True
        truncated = True
        times = times[keep]
    th = theta * np.exp(-alpha * times)
    idx = np.abs(sol.theta[None, :] - th[:, None]).argmin(axis=1)
    return MarkovPolicy(times, sol.v1[idx], sol.v2[idx], dt, theta, truncated, t_eps)
