import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import A_REF
from rsgame.discounted import (
    contraction_constant,
    contraction_step,
    discounted_residual,
    extract_markov_policy,
    picard_apply,
    refine_epsilon,
    solve_discounted,
)
from rsgame.errors import HorizonBeyondEpsilon
from rsgame.generators import one_state_model, random_model
from rsgame.matrix_game import solve_matrix_game
from rsgame.model import GameModel

seeds = st.integers(0, 2**32 - 1)


def zero_cost(rng, n=3):
    return random_model(rng, n, (2, 2), cost_scale=0.0)


# -- Picard operator ----------------------------------------------------------


def test_picard_fixes_one_without_cost(rng):
    model = zero_cost(rng)
    theta = np.linspace(0.1, 0.3, 9)
    assert np.allclose(picard_apply(model, theta, np.ones((9, 3))), 1.0, atol=1e-14)


def test_picard_first_iterate_one_state():
    model = one_state_model(A_REF, alpha=2.0)
    eps = 0.05
    theta = np.linspace(eps, 0.4, 33)
    h = math.exp(eps * 3.0 / 2.0)
    out = picard_apply(model, theta, np.full((33, 1), h))
    assert np.allclose(out[:, 0], h * (1 + 1.5 * (theta - eps) / 2.0), rtol=1e-13)


@given(seeds)
@settings(max_examples=15)
def test_picard_contraction_bound(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 3, (2, 2), rate_scale=2.0)
    eps = float(rng.uniform(0.01, 0.2))
    step = contraction_step(model, eps)
    theta = np.linspace(eps, eps + step.delta, 33)
    f1 = rng.uniform(1, 2, size=(33, 3))
    f2 = rng.uniform(1, 2, size=(33, 3))
    lhs = np.abs(picard_apply(model, theta, f1) - picard_apply(model, theta, f2)).max()
    assert lhs <= step.kappa * np.abs(f1 - f2).max() * (1 + 1e-9)


# -- interval length ----------------------------------------------------------


def test_contraction_step_examples():
    m = one_state_model([[1.0]])
    assert contraction_step(m, 0.1).delta == pytest.approx(0.5, rel=1e-12)
    rate = np.zeros((2, 2, 1, 1))
    rate[0, 1], rate[0, 0], rate[1, 0], rate[1, 1] = 1.0, -1.0, 1.0, -1.0
    free = GameModel(rate, np.zeros((2, 1, 1)))
    assert contraction_step(free, 0.1).delta == pytest.approx(0.1 * math.expm1(0.25), rel=1e-12)
    fast = random_model(np.random.default_rng(0), 3)
    assert contraction_step(fast.replace(alpha=2.0), 0.1).delta > contraction_step(fast, 0.1).delta


@given(st.floats(0.01, 1), st.floats(0.1, 3), st.floats(0, 2), st.floats(0, 5))
def test_contraction_step_is_largest_admissible(eps, alpha, r, M):
    d = 0.3
    k = contraction_constant(d, eps, alpha, r, M)
    assert k == pytest.approx((r * d + 2 * M * math.log1p(d / eps)) / alpha)


# -- solver examples ----------------------------------------------------------


def test_zero_cost_gives_one(rng):
    sol = solve_discounted(zero_cost(rng), 1e-3, 1.0)
    assert np.abs(sol.psi - 1.0).max() <= 1e-12


def test_one_state_closed_form():
    sol = solve_discounted(one_state_model(A_REF), 1e-4, 0.5)
    # the start sits on the upper bound, so the solution overshoots by exp(1.5 eps)
    expected = np.exp(1.5 * (sol.theta - 1e-4)) * math.exp(3e-4)
    assert np.allclose(sol.psi[:, 0], expected, rtol=1e-9)
    assert sol.psi[-1, 0] == pytest.approx(math.exp(0.75), rel=2e-4)


def test_constant_cost_is_state_independent(rng):
    model = random_model(rng, 4, (2, 3), alpha=1.5)
    model = model.replace(cost=np.full(model.cost.shape, 0.7))
    sol = solve_discounted(model, 1e-4, 1.0)
    # the start value is already exact here, so the closed form holds at every node
    assert np.allclose(sol.psi, np.exp(sol.theta * 0.7 / 1.5)[:, None], rtol=1e-9)


def test_rk4_cross_check_and_contraction(rng):
    model = random_model(rng, 3, (2, 2))
    sol = solve_discounted(model, 1e-3, 1.0, cross_check=True)
    d = sol.diagnostics
    assert d["rk4_discrepancy"] <= 1e-7
    assert d["max_measured_contraction"] <= d["max_kappa"] * 1.01 + 1e-9
    assert d["residual"] <= 1e-6 * d["residual_scale"]


@given(seeds, st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.floats(0.5, 2.0))
@settings(max_examples=12)
def test_sandwich_and_monotone(seed, n, m1, m2, alpha):
    rng = np.random.default_rng(seed)
    model = random_model(rng, n, (m1, m2), alpha=alpha)
    sol = solve_discounted(model, 1e-3, 1.0)
    bound = np.exp(sol.theta[:, None] * model.cost_sup / alpha)
    assert np.all(sol.psi >= 1.0) and np.all(sol.psi <= bound * (1 + 1e-6))
    assert np.all(np.diff(sol.psi, axis=0) >= 0)
    res = discounted_residual(model, sol)
    assert res.max() <= 1e-6 * np.abs(sol.psi).max()


@given(seeds)
@settings(max_examples=8)
def test_monotone_in_cost(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 3, (2, 2))
    higher = model.replace(cost=model.cost + rng.uniform(0, 0.3, model.cost.shape))
    kw = dict(checkpoints=[0.25, 0.5, 0.75])
    a = solve_discounted(model, 1e-3, 1.0, **kw)
    b = solve_discounted(higher, 1e-3, 1.0, **kw)
    for c in (0.25, 0.5, 0.75, 1.0):
        assert np.all(b.psi_at(c) >= a.psi_at(c) - 1e-12)


# -- epsilon refinement -------------------------------------------------------


def test_refine_zero_cost(rng):
    sol = refine_epsilon(zero_cost(rng), 1.0, 1e-8)
    hist = sol.diagnostics["refinement"]
    assert len(hist) == 2 and hist[1][1] == 0.0


def test_refine_one_state_rate():
    sol = refine_epsilon(one_state_model(A_REF), 1.0, 1e-7, epsilon0=1e-2)
    diffs = [d for _, d in sol.diagnostics["refinement"][1:]]
    ratios = np.array(diffs[1:]) / np.array(diffs[:-1])
    assert np.allclose(ratios, 0.5, atol=0.02)


def test_refine_differences_nonincreasing(rng):
    sol = refine_epsilon(random_model(rng, 3, (2, 2)), 1.0, 1e-6)
    diffs = [d for _, d in sol.diagnostics["refinement"][1:]]
    assert all(b <= 1.1 * a for a, b in zip(diffs, diffs[1:]))


# -- Markov policies ----------------------------------------------------------


def test_policy_starts_at_theta(rng):
    model = random_model(rng, 3, (2, 2))
    sol = solve_discounted(model, 1e-3, 1.0)
    pol = extract_markov_policy(sol, 1.0, 2.0, 0.1)
    k = sol.node(1.0)
    assert np.array_equal(pol.v1[0], sol.v1[k]) and np.array_equal(pol.v2[0], sol.v2[k])
    assert len(pol.times) == 20 and not pol.truncated


def test_policy_truncates_at_t_epsilon(rng):
    model = random_model(rng, 2, (2, 2), alpha=50.0)
    sol = solve_discounted(model, 1e-2, 1.0)
    pol = extract_markov_policy(sol, 1.0, 1.0, 0.1)
    assert pol.truncated and len(pol.times) == 1
    assert pol.t_epsilon == pytest.approx(math.log(100) / 50)
    with pytest.raises(HorizonBeyondEpsilon):
        extract_markov_policy(sol, 1.0, 1.0, 0.1, strict=True)


def test_one_state_policy_is_constant():
    sol = solve_discounted(one_state_model(A_REF), 1e-4, 1.0)
    pol = extract_markov_policy(sol, 1.0, 5.0, 0.25)
    ref = solve_matrix_game(A_REF)
    assert np.allclose(pol.v1[:, 0], ref.p) and np.allclose(pol.v2[:, 0], ref.q)
