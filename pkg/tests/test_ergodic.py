import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import A_REF
from rsgame.ergodic import (
    best_response,
    cost_generator,
    ergodic_residual,
    march_finite_horizon,
    perron_value,
    pure_growth_rates,
    solve_ergodic,
    spectral_abscissa,
    verify_saddle,
)
from rsgame.errors import GateFailed, NotIrreducible, SaddleViolated, StepUnstable
from rsgame.generators import birth_death_model, drift_ladder_model, one_state_model, random_model
from rsgame.model import GameModel, LyapunovCertificate, random_mixed

seeds = st.integers(0, 2**32 - 1)
ONE_CERT = LyapunovCertificate([1.0], 8.0, 16.0, (0,))


# -- closed forms -------------------------------------------------------------


def test_one_state_value():
    sol = solve_ergodic(one_state_model(A_REF), ONE_CERT)
    assert sol.rho == pytest.approx(1.5, abs=1e-12)
    assert sol.psi_hat.tolist() == [1.0]
    assert np.allclose(sol.v1[0], [0.5, 0.5])


def test_zero_and_constant_cost(bd, bd_cert):
    free = bd.replace(cost=np.zeros_like(bd.cost))
    sol = solve_ergodic(free, bd_cert)
    assert sol.rho == 0.0 and np.all(sol.psi_hat == 1.0)
    flat = bd.replace(cost=np.full(bd.cost.shape, 0.3))
    sol = solve_ergodic(flat, bd_cert)
    assert sol.rho == pytest.approx(0.3, abs=1e-12)
    assert np.allclose(sol.psi_hat, 1.0, atol=1e-10)


def test_birth_death_solution(bd, bd_solution, bd_cert):
    sol = bd_solution
    assert ergodic_residual(bd, sol.rho, sol.psi_hat) <= 1e-6
    assert sol.psi_hat[0] == 1.0
    assert np.all(sol.psi_hat <= bd_cert.W)
    assert perron_value(bd, sol.v1, sol.v2).lam == pytest.approx(sol.rho, abs=1e-6)
    assert 0 <= sol.rho <= bd.cost_sup


def test_truncation_ladder_is_monotone(ladder):
    model, cert = ladder
    sol = solve_ergodic(model, cert, levels=range(1, model.n_states + 1))
    rhos = [r for _, r in sol.diagnostics["ladder"]]
    assert all(b >= a - 1e-8 for a, b in zip(rhos, rhos[1:]))
    assert sol.truncation_level == model.n_states


# -- gates and step control ---------------------------------------------------


def test_gates(bd, bd_cert):
    with pytest.raises(GateFailed):
        solve_ergodic(bd)
    weak = LyapunovCertificate([1.0, 2.0], 1.0, 2.0, (0,))
    with pytest.raises(GateFailed):
        solve_ergodic(bd, weak)
    sol = solve_ergodic(bd, weak, override_gates=True)
    assert sol.diagnostics["gates"]["lyapunov"] is False
    assert sol.rho == pytest.approx(solve_ergodic(bd, bd_cert).rho, abs=1e-9)


def test_unstable_step(bd):
    with pytest.raises(StepUnstable):
        march_finite_horizon(bd, dt=1.0)


def test_march_history_matches_exponential(one_state):
    history, _ = march_finite_horizon(one_state, min_time=3.0)
    t = history.times[-1]
    # RK4 with h * lambda = 0.05 loses about 3e-9 per step
    assert history.log_psi(t)[0] == pytest.approx(1.5 * t, rel=1e-6)
    assert history.psi(0.0)[0] == 1.0


def test_finite_horizon_against_matrix_exponential(bd):
    # under the saddle pair of the final profile the value is a semigroup of a fixed matrix
    history, cand = march_finite_horizon(bd, min_time=25.0)
    A = cost_generator(bd, cand.v1, cand.v2)
    # the selectors settle early, so late growth follows the fixed matrix
    assert np.allclose(history.psi(25.0), expm(5.0 * A) @ history.psi(20.0), rtol=1e-6)
    assert cand.diagnostics["residual"] <= 1e-9


def test_history_policy_reads_backwards(bd):
    history, _ = march_finite_horizon(bd, min_time=2.0)
    prof = history.policy(1.0)
    K = int(round(1.0 / history.dt))
    assert prof.n_segments == K
    assert np.array_equal(prof.v1[0], history.v1[K - 1])
    assert np.array_equal(prof.v2[-1], history.v2[0])
    with pytest.raises(ValueError):
        history.policy(1e6)


# -- Perron oracle ------------------------------------------------------------


@given(seeds, st.integers(1, 6))
def test_perron_matches_eigvals(seed, n):
    rng = np.random.default_rng(seed)
    model = random_model(rng, n, (2, 3), rate_scale=2.0)
    v1, v2 = random_mixed(rng, (n, 2)), random_mixed(rng, (n, 3))
    res = perron_value(model, v1, v2)
    assert res.lam == pytest.approx(spectral_abscissa(model, v1, v2), abs=1e-9)
    A = cost_generator(model, v1, v2)
    assert np.all(res.vec > 0) and res.vec[model.ref_state] == 1.0
    assert np.allclose(A @ res.vec, res.lam * res.vec, atol=1e-9 * np.abs(A).max())


def test_perron_rejects_reducible():
    rate = np.zeros((2, 2, 1, 1))
    rate[0, 1], rate[0, 0] = 1.0, -1.0
    model = GameModel(rate, np.ones((2, 1, 1)))
    with pytest.raises(NotIrreducible):
        perron_value(model, np.ones((2, 1)), np.ones((2, 1)))


# -- best responses and saddle check ------------------------------------------


@given(seeds, st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2]))
@settings(max_examples=25)
def test_best_response_beats_enumeration(seed, n, m1, m2, player):
    rng = np.random.default_rng(seed)
    model = random_model(rng, n, (m1, m2))
    fixed = random_mixed(rng, (n, m2 if player == 1 else m1))
    lam, v = best_response(model, fixed, player)
    m = m1 if player == 1 else m2
    sign = 1.0 if player == 2 else -1.0
    eye = np.eye(m)

    def growth(w):
        pair = (w, fixed) if player == 1 else (fixed, w)
        return perron_value(model, *pair).lam

    pure = [growth(eye[list(a)]) for a in itertools.product(range(m), repeat=n)]
    assert sign * lam >= sign * (max(pure) if player == 2 else min(pure)) - 1e-9
    for _ in range(10):
        assert sign * lam >= sign * growth(random_mixed(rng, (n, m))) - 1e-9


def test_pure_enumeration_matches_perron(rng):
    model = random_model(rng, 3, (2, 3))
    fixed = random_mixed(rng, (3, 2))
    blocks = list(pure_growth_rates(model, fixed, 2, chunk=5))
    acts = np.concatenate([a for a, _ in blocks])
    lam = np.concatenate([v for _, v in blocks])
    assert [tuple(a) for a in acts] == list(itertools.product(range(3), repeat=3))
    for a, value in zip(acts, lam):
        assert value == pytest.approx(perron_value(model, fixed, np.eye(3)[a]).lam, abs=1e-10)


def test_saddle_holds_at_solution(bd, bd_solution, ladder, ladder_solution):
    rep = verify_saddle(bd, bd_solution, n_mixed=50)
    assert rep.ok and rep.checked["player1"] == 1 + 4 + 50
    model, _ = ladder
    rep = verify_saddle(model, ladder_solution, n_mixed=50)
    assert rep.ok


def test_saddle_flags_wrong_value(bd, bd_solution):
    wrong = replace(bd_solution, rho=bd_solution.rho + 0.1)
    rep = verify_saddle(bd, wrong, n_mixed=10)
    assert not rep.ok and rep.margin1 > 0.05
    with pytest.raises(SaddleViolated):
        verify_saddle(bd, wrong, n_mixed=10, raise_on_error=True)


@given(seeds, st.integers(2, 5), st.integers(1, 3), st.integers(1, 3))
@settings(max_examples=10)
def test_ladder_models_solve_and_certify(seed, n, m1, m2):
    model, cert = drift_ladder_model(np.random.default_rng(seed), n, (m1, m2))
    sol = solve_ergodic(model, cert)
    assert sol.diagnostics["residual"] <= 1e-6 * max(1, sol.rho)
    assert np.all(sol.psi_hat <= cert.W + 1e-9)
    assert perron_value(model, sol.v1, sol.v2).lam == pytest.approx(sol.rho, abs=1e-6)
    assert verify_saddle(model, sol, n_mixed=20).ok


@given(seeds)
@settings(max_examples=10)
def test_value_monotone_in_cost(seed):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0, 0.3, size=(2, 2, 2))
    cert = LyapunovCertificate([1.0, 2.0], 1.0, 3.0, (0,))
    low = solve_ergodic(birth_death_model(cost), cert).rho
    high = solve_ergodic(birth_death_model(cost + rng.uniform(0, 0.09, size=cost.shape)), cert).rho
    assert high >= low - 1e-9
