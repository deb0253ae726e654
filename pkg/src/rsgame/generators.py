"""Random and hand-built game models for tests, demos and benchmarks."""

from __future__ import annotations

import numpy as np

from .model import GameModel, LyapunovCertificate, pure_drift


def _conservative(rate: np.ndarray) -> np.ndarray:
    n = rate.shape[0]
    idx = np.arange(n)
    rate[idx, idx] = 0.0
    rate[idx, idx] = -rate.sum(axis=1)
    return rate


def random_model(
    rng: np.random.Generator,
    n_states: int,
    n_actions=(2, 2),
    rate_scale: float = 1.0,
    cost_scale: float = 1.0,
    alpha: float = 1.0,
    theta_cap: float = 1.0,
) -> GameModel:
    """Dense random model: off-diagonal rates ``U(0, rate_scale)``, costs ``U(0, cost_scale)``."""
    m1, m2 = n_actions
    rate = rng.uniform(0.0, rate_scale, size=(n_states, n_states, m1, m2))
    cost = rng.uniform(0.0, cost_scale, size=(n_states, m1, m2))
    return GameModel(_conservative(rate), cost, alpha=alpha, theta_cap=theta_cap)


def one_state_model(A, alpha: float = 1.0, theta_cap: float = 1.0) -> GameModel:
    """Single-state game whose cost matrix is ``A`` (the generator is zero)."""
    A = np.asarray(A, dtype=float)
    return GameModel(np.zeros((1, 1) + A.shape), A[None], alpha=alpha, theta_cap=theta_cap)


def birth_death_model(cost=None, up: float = 1.0, down: float = 4.0) -> GameModel:
    """Two states, rate ``up`` from 0 to 1 and ``down`` back, for every action pair.

    ``cost`` is a (2, m1, m2) tensor; by default 2x2 actions with costs below 0.4.
    """
    if cost is None:
        cost = np.array([[[0.0, 0.4], [0.3, 0.1]], [[0.2, 0.1], [0.05, 0.35]]])
    cost = np.asarray(cost, dtype=float)
    m1, m2 = cost.shape[1:]
    rate = np.zeros((2, 2, m1, m2))
    rate[0, 1] = up
    rate[1, 0] = down
    return GameModel(_conservative(rate), cost)


def drift_ladder_model(
    rng: np.random.Generator,
    n_states: int,
    n_actions=(2, 2),
    delta: float = 0.5,
    w_top: float = 12.0,
    cost_fraction: float = 0.8,
    spread: float = 0.5,
) -> tuple[GameModel, LyapunovCertificate]:
    """Random irreducible model together with a drift certificate it satisfies.

    ``W`` rises geometrically from 1 at state 0 to ``w_top``, ``C = {0}`` and
    state 0 is the reference state.  Every state above 0 is pushed back to 0
    fast enough for ``Pi W <= -2 delta W`` under every action pair; ``b`` is
    the smallest constant that covers state 0.  Costs stay below
    ``cost_fraction * delta / 2`` so the small-cost condition holds.
    """
    n = n_states
    m1, m2 = n_actions
    W = w_top ** (np.arange(n) / max(n - 1, 1))
    rate = np.zeros((n, n, m1, m2))
    if n > 1:
        rate[0, 1] = rng.uniform(0.1, 0.3, size=(m1, m2))
        for i in range(1, n):
            for j in range(1, n):
                if j != i:
                    rate[i, j] = rng.uniform(0.0, spread, size=(m1, m2))
            if i + 1 < n:
                rate[i, i + 1] += rng.uniform(0.05, 0.2, size=(m1, m2))
            push = (rate[i] * (W - W[i])[:, None, None]).sum(axis=0)
            need = (2 * delta * W[i] + push) / (W[i] - 1.0)
            rate[i, 0] = np.maximum(need, 0.0) * rng.uniform(1.05, 1.5, size=(m1, m2)) + 0.05
    rate = _conservative(rate)
    cost = rng.uniform(0.0, cost_fraction * delta / 2, size=(n, m1, m2))
    model = GameModel(rate, cost, ref_state=0)
    drift0 = pure_drift(model, W)[0].max()
    b = max(drift0 + 2 * delta * W[0], 1e-3) * (1 + 1e-9)
    return model, LyapunovCertificate(W, delta, b, (0,))
