"""Per-state stage games and the Isaacs min-max shared by both solvers.

For a positive value vector ``psi`` and a weight ``w`` the stage game at
state ``i`` has payoff

    G_i[u1, u2] = sum_j rate[i, j, u1, u2] * psi[j] + w * cost[i, u1, u2] * psi[i]

(``w = theta`` in the discounted equation, ``w = 1`` in the ergodic one).
The bracket is bilinear in the mixed pair, so inf-sup and sup-inf over mixed
actions both equal the matrix-game value of ``G_i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .matrix_game import BatchSolution, solve_matrix_games
from .model import GameModel


@dataclass(frozen=True)
class HamiltonianResult:
    """Values ``H`` (..., N) and saddle mixed actions ``v1`` (..., N, m1), ``v2`` (..., N, m2)."""

    H: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    @property
    def hint(self) -> tuple[np.ndarray, np.ndarray]:
        return self.v1 > 0, self.v2 > 0


def stage_matrices(model: GameModel, psi, weight=1.0) -> np.ndarray:
    """Stage payoffs for every state; ``psi`` may carry leading batch axes.

    ``weight`` broadcasts against ``psi`` (scalar, per batch entry as ``(..., 1)``,
    or per state).
    """
    psi = np.asarray(psi, dtype=float)
    w = np.broadcast_to(np.asarray(weight, dtype=float), psi.shape)[..., None, None]
    drift = np.einsum("ijab,...j->...iab", model.rate, psi)
    return drift + w * model.cost * psi[..., :, None, None]


def stage_matrix(model: GameModel, i: int, psi, weight: float = 1.0) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    return np.einsum("jab,j->ab", model.rate[i], psi) + weight * model.cost[i] * psi[i]


def hamiltonian_eval(model: GameModel, psi, weight=1.0, hint: Optional[tuple] = None) -> HamiltonianResult:
    """Isaacs min-max of the stage game at every state (and every batch entry).

    ``hint`` is the ``.hint`` of an earlier result on a nearby ``psi``; it only
    speeds up the support search.
    """
    sol: BatchSolution = solve_matrix_games(stage_matrices(model, psi, weight), hint=hint)
    return HamiltonianResult(sol.values, sol.p, sol.q)
