"""Path simulation, Monte Carlo estimators and the exact linear-algebra checks.

Paths follow the jump construction: in state ``i`` under the mixed pair
``v`` the half-line is cut into consecutive intervals ``Delta_ij(v)`` of
lengths ``pi_ij(v)`` (ascending ``j``), and a Poisson clock with marks
``z`` moves the chain to ``j`` when its mark falls in ``Delta_ij(v)``.
The default sampler draws the equivalent exponential sojourns; the
``"thinning"`` method runs the clock literally at the uniform rate ``M``
and discards marks that miss every interval.

Randomness comes from numpy's Philox generator (counter based) seeded with
a 64-bit integer, so results are reproducible across platforms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import poisson

from .errors import MomentInfinite, SeriesDiverges, SeriesTruncationOverflow
from .model import GameModel, LyapunovCertificate, StrategyProfile, mixed_cost, mixed_generator

log = logging.getLogger(__name__)

SERIES_TOL = 1e-12
MAX_RATE_TIME = 30.0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _as_profile(strategy) -> StrategyProfile:
    if isinstance(strategy, StrategyProfile):
        return strategy
    v1, v2 = strategy
    return StrategyProfile(v1, v2)


# -- jump layout --------------------------------------------------------------


@dataclass(frozen=True)
class JumpLayout:
    """Intervals ``[lower[k], upper[k])`` leading to ``targets[k]``, packed from 0."""

    state: int
    targets: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def total(self) -> float:
        return float(self.upper[-1]) if len(self.upper) else 0.0

    def locate(self, z: float) -> Optional[int]:
        """Target whose interval holds the mark ``z``; None for a miss."""
        k = int(np.searchsorted(self.upper, z, side="right"))
        if k >= len(self.targets) or z < 0:
            return None
        return int(self.targets[k])


def jump_layout(model: GameModel, i: int, v1, v2) -> JumpLayout:
    """Layout at state ``i`` for per-state mixed actions ``v1`` (m1,), ``v2`` (m2,)."""
    rates = np.einsum("jab,a,b->j", model.rate[i], v1, v2)
    targets = np.array([j for j in range(model.n_states) if j != i], dtype=int)
    lengths = np.clip(rates[targets], 0.0, None)
    upper = np.cumsum(lengths)
    return JumpLayout(i, targets, upper - lengths, upper)


# -- segment tables shared by the samplers ------------------------------------


class _Tables(NamedTuple):
    dt: float            # segment length (inf for stationary)
    exit: np.ndarray     # (K, N) total jump rate
    cum: np.ndarray      # (K, N, N) cumulative off-diagonal rates, ascending j
    cost: np.ndarray     # (K, N)


def _tables(model: GameModel, profile: StrategyProfile) -> _Tables:
    v1, v2 = profile.tables()
    G = np.einsum("ijab,kia,kib->kij", model.rate, v1, v2)
    cost = np.einsum("iab,kia,kib->ki", model.cost, v1, v2)
    N = model.n_states
    off = G.copy()
    off[:, np.arange(N), np.arange(N)] = 0.0
    off = np.clip(off, 0.0, None)
    cum = np.cumsum(off, axis=2)
    dt = math.inf if profile.kind == "stationary" else float(profile.dt)
    return _Tables(dt, cum[:, :, -1].copy(), cum, cost)


# -- single path --------------------------------------------------------------


@dataclass
class PathSample:
    """One trajectory on ``[0, T]`` as pieces of constant state and action.

    A piece ends at a jump or at a change of the tabulated strategy.
    """

    times: np.ndarray
    states: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    T: float
    absorbed: bool = False

    @property
    def jump_times(self) -> np.ndarray:
        change = np.flatnonzero(np.diff(self.states) != 0) + 1
        return self.times[change]

    @property
    def visited(self) -> np.ndarray:
        keep = np.concatenate([[True], np.diff(self.states) != 0])
        return self.states[keep]

    def state_at(self, t: float) -> int:
        return int(self.states[np.searchsorted(self.times, t, side="right") - 1])


def simulate_path(model: GameModel, profile, i0_start: int, T: float, seed: int,
                  method: str = "exact") -> PathSample:
    """Sample one path (exponential sojourns, or literal thinning at rate ``M``)."""
    profile = _as_profile(profile)
    tab = _tables(model, profile)
    rng = make_rng(seed)
    K = len(tab.exit)
    M = model.max_exit_rate
    v1t, v2t = profile.tables()
    t, i = 0.0, int(i0_start)
    times, states, a1, a2 = [], [], [], []
    absorbed = False
    k = 0
    while t < T:
        seg_end = (k + 1) * tab.dt if k < K - 1 else math.inf
        times.append(t)
        states.append(i)
        a1.append(v1t[k, i])
        a2.append(v2t[k, i])
        q = tab.exit[k, i]
        if method == "thinning":
            clock = M
        elif method == "exact":
            clock = q
        else:
            raise ValueError(f"unknown method {method!r}")
        if q <= 0 and seg_end == math.inf:
            absorbed = True
            break
        while True:
            t_ev = t + rng.exponential() / clock if clock > 0 else math.inf
            if t_ev >= min(seg_end, T):
                t = min(seg_end, T)
                # track the segment by count; t / dt can round back below a boundary
                if t == seg_end:
                    k += 1
                break
            t = t_ev
            z = rng.random() * clock
            if z < q:
                i = int(np.searchsorted(tab.cum[k, i], z, side="right"))
                break
    return PathSample(np.asarray(times), np.asarray(states, dtype=int), np.asarray(a1),
                      np.asarray(a2), float(T), absorbed)


# -- batch engine -------------------------------------------------------------


@dataclass
class PathBatch:
    """Per-path summaries of ``n`` simulated paths."""

    cost_integral: np.ndarray
    n_jumps: np.ndarray
    final_state: np.ndarray
    stop_time: np.ndarray
    stopped: np.ndarray
    sojourn_time: np.ndarray = field(repr=False, default=None)


def simulate_paths(
    model: GameModel,
    profile,
    i0_start: int,
    T: float,
    n_paths: int,
    seed: int,
    *,
    discount: float = 0.0,
    stop_set: Optional[Sequence[int]] = None,
    method: str = "exact",
) -> PathBatch:
    """Simulate ``n_paths`` paths at once and return their summaries.

    ``cost_integral`` is ``int_0^{T ^ tau} e^{-discount s} r ds`` where
    ``tau`` is the first time the path is in ``stop_set`` (``tau = 0`` when
    it starts there).  ``final_state`` is the state at ``T ^ tau``.
    ``sojourn_time`` holds the total time each path spent in each state.
    """
    profile = _as_profile(profile)
    tab = _tables(model, profile)
    rng = make_rng(seed)
    N = model.n_states
    K = len(tab.exit)
    M = model.max_exit_rate
    if method not in ("exact", "thinning"):
        raise ValueError(f"unknown method {method!r}")
    stop_mask = np.zeros(N, dtype=bool)
    if stop_set is not None:
        stop_mask[list(stop_set)] = True

    t = np.zeros(n_paths)
    state = np.full(n_paths, int(i0_start))
    integral = np.zeros(n_paths)
    jumps = np.zeros(n_paths, dtype=np.int64)
    stopped = np.full(n_paths, bool(stop_mask[i0_start]))
    stop_time = np.where(stopped, 0.0, T)
    sojourn = np.zeros((n_paths, N))
    # segment index per path, counted rather than recomputed from t / dt
    seg = np.zeros(n_paths, dtype=np.int64)
    active = np.flatnonzero(~stopped & (t < T))
    while len(active):
        ta, sa = t[active], state[active]
        k = seg[active]
        seg_end = np.where(k < K - 1, (k + 1) * tab.dt, math.inf)
        q = tab.exit[k, sa]
        clock = q if method == "exact" else np.full(len(active), M)
        with np.errstate(divide="ignore"):
            t_ev = ta + rng.exponential(size=len(active)) / clock
        limit = np.minimum(seg_end, T)
        event = t_ev < limit
        t_next = np.where(event, t_ev, limit)
        c = tab.cost[k, sa]
        if discount > 0:
            integral[active] += c * (np.exp(-discount * ta) - np.exp(-discount * t_next)) / discount
        else:
            integral[active] += c * (t_next - ta)
        sojourn[active, sa] += t_next - ta
        t[active] = t_next
        seg[active[~event & (seg_end <= T)]] += 1
        z = rng.random(size=len(active)) * clock
        move = event & (z < q)
        if move.any():
            rows = tab.cum[k[move], sa[move]]
            new = (rows > z[move, None]).argmax(axis=1)
            idx = active[move]
            state[idx] = new
            jumps[idx] += 1
            hit = stop_mask[new]
            stopped[idx[hit]] = True
            stop_time[idx[hit]] = t_next[move][hit]
        active = active[~stopped[active] & (t[active] < T)]
    return PathBatch(integral, jumps, state, stop_time, stopped, sojourn)


# -- estimators ---------------------------------------------------------------


class MCEstimate(NamedTuple):
    mean: float
    stderr: float
    n_paths: int
    tail_factor: float = 1.0


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    mean = float(math.fsum(x) / n)
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def estimate_discounted(model: GameModel, profile, theta: float, i: int, T: float,
                        n_paths: int, seed: int, method: str = "exact") -> MCEstimate:
    """Monte Carlo mean of ``exp(theta int_0^T e^{-alpha s} r ds)`` from state ``i``.

    ``tail_factor = exp(theta e^{-alpha T} ||r|| / alpha)`` bounds the
    factor by which the neglected tail beyond ``T`` could raise the mean.
    """
    alpha = model.alpha
    batch = simulate_paths(model, profile, i, T, n_paths, seed, discount=alpha, method=method)
    mean, se = _mean_se(np.exp(theta * batch.cost_integral))
    tail = math.exp(theta * math.exp(-alpha * T) * model.cost_sup / alpha)
    return MCEstimate(mean, se, n_paths, tail)


def estimate_ergodic_growth(model: GameModel, profile, i: int, T: float, n_paths: int,
                            seed: int) -> MCEstimate:
    """``(1/T) ln`` of the Monte Carlo mean of ``exp(int_0^T r ds)``.

    The standard error comes from the delta method.  Exponential moments
    of long integrals are heavy tailed, so the error bar is only
    trustworthy while the sample mean is not dominated by a few paths.
    """
    batch = simulate_paths(model, profile, i, T, n_paths, seed)
    mean, se = _mean_se(np.exp(batch.cost_integral))
    return MCEstimate(math.log(mean) / T, se / (mean * T), n_paths)


# -- Feynman-Kac semigroup ----------------------------------------------------


def _uniformized(A: np.ndarray, L: float, t: float) -> np.ndarray:
    """``exp(A t)`` through the Poisson-weighted series in ``P = I + A / L``."""
    N = len(A)
    if t == 0:
        return np.eye(N)
    P = np.eye(N) + A / L
    nu = max(1.0, float(np.abs(P).sum(axis=1).max()))
    lt = L * t
    if lt * nu > MAX_RATE_TIME * 1.5:
        raise SeriesTruncationOverflow(f"L t = {lt:.3g} too large for one series; split t")
    n_terms = int(poisson.isf(SERIES_TOL, lt * nu)) + 2
    term = np.eye(N) * math.exp(-lt)
    out = term.copy()
    for k in range(1, n_terms + 1):
        term = term @ P * (lt / k)
        out += term
    return out


def feynman_kac(model: GameModel, strategy, t: float, *, split: bool = True) -> np.ndarray:
    """``K(t)[i, j] = E_i[exp(int_0^t r ds); Y(t) = j]``.

    For a stationary pair this is ``exp(A t)`` with ``A = Pi_v + diag(r_v)``,
    summed by uniformization at rate ``L = M + ||r|| + 1``.  Long times are
    split into pieces with ``L t`` at most ``MAX_RATE_TIME`` and composed;
    with ``split=False`` they raise :class:`SeriesTruncationOverflow`.
    Tabulated strategies are composed segment by segment.
    """
    profile = _as_profile(strategy)
    L = model.max_exit_rate + model.cost_sup + 1.0
    v1, v2 = profile.tables()
    if profile.kind == "stationary":
        pieces = [(0, t)]
    else:
        K = len(v1)
        edges = [k * profile.dt for k in range(K)] + [math.inf]
        pieces = []
        for k in range(K):
            a, b = edges[k], min(edges[k + 1], t)
            if a >= t:
                break
            pieces.append((k, b - a))
    out = np.eye(model.n_states)
    for k, length in pieces:
        A = mixed_generator(model, v1[k], v2[k]) + np.diag(mixed_cost(model, v1[k], v2[k]))
        n = 1
        if split:
            n = max(1, int(math.ceil(L * length / MAX_RATE_TIME)))
        step = _uniformized(A, L, length / n)
        out = out @ np.linalg.matrix_power(step, n)
    return out


# -- twisted chain ------------------------------------------------------------


@dataclass(frozen=True)
class TwistedChain:
    """Unit-time skeleton reweighted by the exponential cost.

    ``kernel[i, j] = K(1)[i, j] / sum_j K(1)[i, j]`` and
    ``r_hat[i] = ln sum_j K(1)[i, j]``.
    """

    kernel: np.ndarray
    r_hat: np.ndarray
    v1: np.ndarray
    v2: np.ndarray


def build_twisted_chain(model: GameModel, v1_star, v2) -> TwistedChain:
    K = feynman_kac(model, (v1_star, v2), 1.0)
    mass = K.sum(axis=1)
    kernel = K / mass[:, None]
    kernel /= kernel.sum(axis=1, keepdims=True)
    assert np.all(np.abs(kernel.sum(axis=1) - 1.0) <= 1e-10)
    return TwistedChain(kernel, np.log(mass), np.asarray(v1_star), np.asarray(v2))


def _first_return(P: np.ndarray, weight: np.ndarray, i: int, what: str) -> float:
    """``E_i[prod_{n=1}^{tau} weight(Y_n)]`` for the first return time ``tau >= 1`` to ``i``.

    With ``h(j)`` the same product started from ``j != i`` (stopping at the
    first visit to ``i``), ``h = B h + c`` where ``B[j, k] = P[j, k] w(k)``
    off ``i`` and ``c[j] = P[j, i] w(i)``.
    """
    N = len(P)
    rest = np.array([j for j in range(N) if j != i], dtype=int)
    direct = P[i, i] * weight[i]
    if not len(rest):
        return float(direct)
    B = P[np.ix_(rest, rest)] * weight[rest][None, :]
    c = P[rest, i] * weight[i]
    radius = float(np.abs(np.linalg.eigvals(B)).max())
    if radius >= 1.0:
        raise SeriesDiverges(f"{what}: spectral radius {radius:.6g} >= 1")
    h = np.linalg.solve(np.eye(len(rest)) - B, c)
    return float(direct + (P[i, rest] * weight[rest]) @ h)


def D_of_rho(chain: TwistedChain, rho: float, i: int, *, mc_paths: int = 20000, seed: int = 0,
             max_steps: int = 100000) -> float:
    """Expected product of ``exp(r_hat(Y_n) - rho)`` over one excursion from ``i``.

    Solved exactly by the first-return linear system.  If that system has
    spectral radius at least one the expectation is infinite; a Monte Carlo
    estimate over truncated excursions is computed for the report and
    :class:`SeriesDiverges` is raised.
    """
    w = np.exp(chain.r_hat - rho)
    try:
        return _first_return(chain.kernel, w, i, "D(rho)")
    except SeriesDiverges as exc:
        est = _mc_excursion(chain.kernel, np.log(w), i, mc_paths, seed, max_steps)
        raise SeriesDiverges(f"{exc}; truncated Monte Carlo estimate {est:.6g}") from None


def _mc_excursion(P, logw, i, n_paths, seed, max_steps) -> float:
    rng = make_rng(seed)
    cum = np.cumsum(P, axis=1)
    state = np.full(n_paths, i)
    acc = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if not len(idx):
            break
        u = rng.random(len(idx))
        nxt = np.minimum((cum[state[idx]] > u[:, None]).argmax(axis=1), len(P) - 1)
        state[idx] = nxt
        acc[idx] += logw[nxt]
        alive[idx[nxt == i]] = False
    return float(np.mean(np.exp(acc)))


def exp_hitting_moment(model: GameModel, v1, v2, target: int, delta: float) -> np.ndarray:
    """``u(i) = E_i[exp(delta tau)]`` with ``tau`` the hitting time of ``target``.

    Solves ``(Q u)(i) + delta u(i) = 0`` off the target with ``u(target) = 1``.
    The moment is finite exactly when ``Q`` restricted off the target, plus
    ``delta``, has negative spectral abscissa.
    """
    Q = mixed_generator(model, v1, v2)
    N = len(Q)
    rest = np.array([j for j in range(N) if j != target], dtype=int)
    u = np.ones(N)
    if not len(rest):
        return u
    R = Q[np.ix_(rest, rest)] + delta * np.eye(len(rest))
    abscissa = float(np.linalg.eigvals(R).real.max())
    if abscissa >= 0:
        raise MomentInfinite(f"delta = {delta:g} at or beyond the decay rate ({-abscissa + delta:.6g})")
    sol = np.linalg.solve(R, -Q[rest, target])
    if not np.all(np.isfinite(sol)) or np.any(sol <= 0):
        raise MomentInfinite("hitting moment is not finite and positive")
    u[rest] = sol
    return u


@dataclass
class TkepReport:
    """Return-time moments on the twisted chain against the drift bound.

    ``moments[i]`` is ``E_i[exp(delta tau / 2)]`` for the first return to
    ``i`` (``inf`` when the series diverges).  ``moments_to_C[i]`` is the
    same functional for the first visit to the drift set ``C`` after step
    0, kept as a diagnostic.
    """

    c0: tuple
    moments: dict
    bounds: dict
    margins: dict
    moments_to_C: dict

    @property
    def ok(self) -> bool:
        return all(m >= -1e-9 for m in self.margins.values())


def _first_visit(P: np.ndarray, weight: float, start: int, target: Sequence[int]) -> float:
    """``E_start[weight ** tau]`` with ``tau = min{n >= 1 : Y_n in target}``."""
    N = len(P)
    target = sorted(set(int(t) for t in target))
    rest = np.array([j for j in range(N) if j not in target], dtype=int)
    into = P[:, target].sum(axis=1) * weight
    if not len(rest):
        return float(into[start])
    B = P[np.ix_(rest, rest)] * weight
    if float(np.abs(np.linalg.eigvals(B)).max()) >= 1.0:
        return math.inf
    h = np.linalg.solve(np.eye(len(rest)) - B, into[rest])
    return float(into[start] + weight * P[start, rest] @ h)


def tkep_check(chain: TwistedChain, cert: LyapunovCertificate, i: Optional[int] = None,
               strict: bool = True) -> TkepReport:
    """Return-time moment ``E_i[exp(delta tau / 2)]`` on the twisted chain against
    ``exp(-delta/2) (W(i) + b exp(3 delta / 2))`` for every ``i`` in ``C0``
    (or only ``i`` when given).

    An infinite moment raises :class:`MomentInfinite` when ``strict``;
    otherwise it is reported with margin ``-inf``.
    """
    d, b, W = cert.delta, cert.b, cert.W
    c0 = cert.c0()
    states = c0 if i is None else (i,)
    moments, bounds, margins, to_c = {}, {}, {}, {}
    weight = np.full(len(W), math.exp(d / 2))
    for s in states:
        try:
            m = _first_return(chain.kernel, weight, s, "return-time moment")
        except SeriesDiverges as exc:
            if strict:
                raise MomentInfinite(f"state {s}: {exc}") from None
            m = math.inf
        bound = math.exp(-d / 2) * (W[s] + b * math.exp(1.5 * d))
        moments[s], bounds[s], margins[s] = m, bound, bound - m
        to_c[s] = _first_visit(chain.kernel, math.exp(d / 2), s, cert.C)
    return TkepReport(c0, moments, bounds, margins, to_c)


# -- multiplicative dynamic programming --------------------------------------


@dataclass
class DPPReport:
    """Outcome of :func:`multiplicative_dpp_check`.

    ``z`` scales the gap by the Monte Carlo standard error, floored at
    ``value_tol * |value|`` because the march value itself carries time
    discretization error (visible when the sample is degenerate).
    """

    t: float
    state: int
    stop_set: tuple
    value: float
    mean: float
    stderr: float
    value_tol: float = 1e-6

    @property
    def z(self) -> float:
        gap = self.mean - self.value
        if gap == 0:
            return 0.0
        scale = max(self.stderr, self.value_tol * abs(self.value))
        return gap / scale if scale > 0 else math.inf

    @property
    def ok(self) -> bool:
        return abs(self.z) <= 3.0


def multiplicative_dpp_check(model: GameModel, history, tilde_S: Sequence[int], t: float, i: int,
                             n_paths: int, seed: int) -> DPPReport:
    """Monte Carlo check of the product dynamic programming identity.

    ``history`` is a :class:`~rsgame.ergodic.MarchHistory` of the finite-horizon
    value on ``model``.  Under the tabulated saddle pair for horizon ``t``,
    ``psi(t, i)`` should equal the mean of
    ``exp(int_0^{t ^ tau} r ds) * psi(t - t ^ tau, Y(t ^ tau))`` where
    ``tau`` is the hitting time of ``tilde_S``.  ``t`` is snapped to the
    nearest multiple of the march step; the report carries the value used.
    """
    t = max(1, int(round(t / history.dt))) * history.dt
    profile = history.policy(t)
    batch = simulate_paths(model, profile, i, t, n_paths, seed, stop_set=tilde_S)
    s = np.minimum(batch.stop_time, t)
    logpsi = history.log_psi(t - s)[np.arange(n_paths), batch.final_state]
    mean, se = _mean_se(np.exp(batch.cost_integral + logpsi))
    value = float(history.psi(t)[i])
    return DPPReport(float(t), int(i), tuple(int(x) for x in tilde_S), value, mean, se)
