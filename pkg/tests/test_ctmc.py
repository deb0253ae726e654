import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.stats import chisquare

from conftest import MODELS
from rsgame.ctmc import (
    D_of_rho,
    build_twisted_chain,
    estimate_discounted,
    estimate_ergodic_growth,
    exp_hitting_moment,
    feynman_kac,
    jump_layout,
    multiplicative_dpp_check,
    simulate_path,
    simulate_paths,
    tkep_check,
)
from rsgame.ergodic import cost_generator, march_finite_horizon, solve_ergodic
from rsgame.errors import MomentInfinite, SeriesDiverges, SeriesTruncationOverflow
from rsgame.generators import random_model
from rsgame.model_io import load_model
from rsgame.model import GameModel, LyapunovCertificate, StrategyProfile, mixed_generator, pure, random_mixed

seeds = st.integers(0, 2**32 - 1)


def uniform_pair(model):
    N, (m1, m2) = model.n_states, model.n_actions
    return np.full((N, m1), 1 / m1), np.full((N, m2), 1 / m2)


# -- jump construction --------------------------------------------------------


def test_jump_layout_intervals():
    rate = np.zeros((3, 3, 1, 1))
    rate[0, 1], rate[0, 2] = 0.5, 1.5
    rate[0, 0] = -2.0
    model = GameModel(rate, np.zeros((3, 1, 1)))
    lay = jump_layout(model, 0, [1.0], [1.0])
    assert lay.targets.tolist() == [1, 2]
    assert lay.lower.tolist() == [0.0, 0.5] and lay.upper.tolist() == [0.5, 2.0]
    assert lay.locate(0.0) == 1 and lay.locate(0.5) == 2 and lay.locate(1.99) == 2
    assert lay.locate(2.0) is None and lay.total == 2.0


@given(seeds)
@settings(max_examples=20)
def test_layout_lengths_match_bilinear_rates(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 4, (2, 3))
    v1, v2 = random_mixed(rng, (2,)), random_mixed(rng, (3,))
    lay = jump_layout(model, 1, v1, v2)
    Q = mixed_generator(model, np.tile(v1, (4, 1)), np.tile(v2, (4, 1)))
    assert np.allclose(lay.upper - lay.lower, Q[1, lay.targets])
    assert lay.total == pytest.approx(-Q[1, 1])


# -- samplers -----------------------------------------------------------------


def test_paths_are_reproducible(bd):
    prof = uniform_pair(bd)
    a = simulate_path(bd, prof, 0, 5.0, seed=9)
    b = simulate_path(bd, prof, 0, 5.0, seed=9)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.states, b.states)
    x = simulate_paths(bd, prof, 0, 5.0, 200, seed=4)
    y = simulate_paths(bd, prof, 0, 5.0, 200, seed=4)
    assert np.array_equal(x.cost_integral, y.cost_integral)


@pytest.mark.parametrize("method", ["exact", "thinning"])
def test_final_state_law(method, rng):
    model = random_model(rng, 4, (2, 2))
    v1, v2 = uniform_pair(model)
    P = expm(2.0 * mixed_generator(model, v1, v2))[1]
    batch = simulate_paths(model, (v1, v2), 1, 2.0, 20000, seed=3, method=method)
    counts = np.bincount(batch.final_state, minlength=4)
    assert chisquare(counts, P * 20000).pvalue > 1e-4


def test_single_path_law_and_sojourn(bd):
    # holding time in state 1 is exponential with rate 4
    hold = []
    for s in range(400):
        p = simulate_path(bd, uniform_pair(bd), 1, 50.0, seed=s)
        hold.append(p.jump_times[0] if len(p.jump_times) else 50.0)
    assert np.mean(hold) == pytest.approx(0.25, rel=0.15)
    p = simulate_path(bd, uniform_pair(bd), 0, 3.0, seed=1, method="thinning")
    assert p.times[0] == 0.0 and p.state_at(0.0) == 0 and p.T == 3.0


def test_expected_cost_integral(bd):
    v1, v2 = uniform_pair(bd)
    r = np.einsum("iab,ia,ib->i", bd.cost, v1, v2)
    Q = mixed_generator(bd, v1, v2)
    ts = np.linspace(0, 2.0, 401)
    occ = np.array([expm(t * Q)[0] @ r for t in ts])
    exact = float(np.sum((occ[1:] + occ[:-1]) / 2) * (ts[1] - ts[0]))
    batch = simulate_paths(bd, (v1, v2), 0, 2.0, 20000, seed=5)
    se = batch.cost_integral.std() / math.sqrt(20000)
    assert abs(batch.cost_integral.mean() - exact) <= 4 * se
    assert np.allclose(batch.sojourn_time.sum(axis=1), 2.0)


def test_markov_profile_segments_terminate(bd):
    # boundaries that are not exact in binary must still advance
    v1 = np.tile(np.eye(2)[[0, 1]], (10, 1, 1))
    prof = StrategyProfile(v1, v1.copy(), dt=0.1)
    batch = simulate_paths(bd, prof, 0, 1.0, 100, seed=0)
    assert np.allclose(batch.sojourn_time.sum(axis=1), 1.0)
    p = simulate_path(bd, prof, 0, 1.0, seed=0)
    assert p.times[-1] <= 1.0


def test_stop_set(bd):
    batch = simulate_paths(bd, uniform_pair(bd), 0, 5.0, 50, seed=1, stop_set=[0])
    assert np.all(batch.stopped) and np.all(batch.stop_time == 0.0) and not batch.cost_integral.any()
    batch = simulate_paths(bd, uniform_pair(bd), 0, 50.0, 500, seed=1, stop_set=[1])
    assert np.all(batch.final_state[batch.stopped] == 1)
    assert batch.stop_time[batch.stopped].mean() == pytest.approx(1.0, rel=0.15)


# -- Feynman-Kac --------------------------------------------------------------


@given(seeds, st.floats(0.01, 5.0))
@settings(max_examples=20)
def test_feynman_kac_matches_expm(seed, t):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 3, (2, 2), rate_scale=2.0)
    pair = (random_mixed(rng, (3, 2)), random_mixed(rng, (3, 2)))
    K = feynman_kac(model, pair, t)
    assert np.allclose(K, expm(t * cost_generator(model, *pair)), rtol=1e-10, atol=1e-14)


def test_feynman_kac_semigroup_and_split(rng):
    model = random_model(rng, 3, (2, 2), rate_scale=4.0)
    pair = uniform_pair(model)
    assert np.allclose(feynman_kac(model, pair, 3.0), feynman_kac(model, pair, 1.0) @ feynman_kac(model, pair, 2.0),
                       rtol=1e-10)
    long = feynman_kac(model, pair, 40.0)
    assert np.allclose(long, expm(40.0 * cost_generator(model, *pair)), rtol=1e-8)
    with pytest.raises(SeriesTruncationOverflow):
        feynman_kac(model, pair, 40.0, split=False)


def test_feynman_kac_markov_profile(bd):
    a, b = pure(0, 2), pure(1, 2)
    v1 = np.array([[a, a], [b, b]])
    prof = StrategyProfile(v1, v1.copy(), dt=0.5)
    K = feynman_kac(bd, prof, 1.2)
    A0 = cost_generator(bd, v1[0], v1[0])
    A1 = cost_generator(bd, v1[1], v1[1])
    assert np.allclose(K, expm(0.5 * A0) @ expm(0.7 * A1), rtol=1e-10)


# -- estimators ---------------------------------------------------------------


def test_discounted_estimate_one_state(one_state):
    prof = (np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
    est = estimate_discounted(one_state, prof, 0.8, 0, 10.0, 50, seed=0)
    assert est.stderr == 0.0
    assert est.mean == pytest.approx(math.exp(0.8 * 1.5 * (1 - math.exp(-10.0))), rel=1e-12)
    assert est.tail_factor == pytest.approx(math.exp(0.8 * math.exp(-10.0) * 3.0))


def test_ergodic_growth_estimate(bd):
    pair = uniform_pair(bd)
    T = 10.0
    exact = math.log(feynman_kac(bd, pair, T)[0].sum()) / T
    est = estimate_ergodic_growth(bd, pair, 0, T, 20000, seed=2)
    assert abs(est.mean - exact) <= 4 * est.stderr


def test_ergodic_growth_near_perron_at_long_horizon(bd, bd_solution):
    # the finite-horizon bias is O(1/T) and sits well inside the error bar at T = 50
    est = estimate_ergodic_growth(bd, bd_solution.profile, 0, 50.0, 10000, seed=8)
    assert abs(est.mean - bd_solution.rho) <= 3 * est.stderr


# -- twisted chain, excursions and moments ------------------------------------


def test_twisted_chain(bd, bd_solution, one_state):
    chain = build_twisted_chain(bd, bd_solution.v1, bd_solution.v2)
    assert np.allclose(chain.kernel.sum(axis=1), 1.0) and np.all(chain.kernel > 0)
    K = feynman_kac(bd, (bd_solution.v1, bd_solution.v2), 1.0)
    assert np.allclose(chain.r_hat, np.log(K.sum(axis=1)))
    one = build_twisted_chain(one_state, [[0.5, 0.5]], [[0.5, 0.5]])
    assert one.kernel.tolist() == [[1.0]] and one.r_hat[0] == pytest.approx(1.5)


def test_excursion_functional(bd, bd_solution):
    sol = bd_solution
    chain = build_twisted_chain(bd, sol.v1, sol.v2)
    assert D_of_rho(chain, sol.rho, 0) == pytest.approx(1.0, abs=1e-8)
    assert D_of_rho(chain, sol.rho, 1) == pytest.approx(1.0, abs=1e-8)
    # a unilateral deviation by player 2 cannot raise the excursion above one
    dev = build_twisted_chain(bd, sol.v1, np.eye(2)[[1, 0]])
    assert D_of_rho(dev, sol.rho, 0) <= 1.0 + 1e-8
    assert D_of_rho(chain, sol.rho + 0.05, 0) < 1.0 < D_of_rho(chain, sol.rho - 0.05, 0)
    with pytest.raises(SeriesDiverges):
        D_of_rho(chain, sol.rho - 5.0, 0, mc_paths=100, max_steps=50)


def test_exp_hitting_moment(bd):
    pair = uniform_pair(bd)
    u = exp_hitting_moment(bd, *pair, target=0, delta=1.0)
    assert u[0] == 1.0 and u[1] == pytest.approx(4.0 / 3.0)
    with pytest.raises(MomentInfinite):
        exp_hitting_moment(bd, *pair, target=0, delta=4.0)


def test_tkep_arithmetic(bd, bd_solution):
    chain = build_twisted_chain(bd, bd_solution.v1, bd_solution.v2)
    P = chain.kernel
    # with a tiny b the threshold is just above one, so both states are in C0
    cert = LyapunovCertificate([1.5, 2.0], 0.2, 1e-3, (0,))
    rep = tkep_check(chain, cert)
    assert rep.c0 == (0, 1)
    w = math.exp(0.1)
    for i, j in ((0, 1), (1, 0)):
        expected = P[i, i] * w + P[i, j] * w * P[j, i] * w / (1 - P[j, j] * w)
        assert rep.moments[i] == pytest.approx(expected, rel=1e-12)
        assert rep.bounds[i] == pytest.approx(math.exp(-0.1) * (cert.W[i] + 1e-3 * math.exp(0.3)))
    assert rep.ok == all(rep.margins[i] >= 0 for i in (0, 1))
    big = LyapunovCertificate([1.0, 2.0], 20.0, 1e-12, (0,))
    with pytest.raises(MomentInfinite):
        tkep_check(chain, big)
    lax = tkep_check(chain, big, strict=False)
    assert math.inf in lax.moments.values() and not lax.ok


def test_return_moment_diverges_when_a_state_is_sticky():
    # spectral radius of a nonnegative block is at least its largest diagonal entry,
    # so one state kept with probability above exp(-delta/2) makes the moment infinite
    model, cert = load_model(MODELS / "ladder6.json")
    sol = solve_ergodic(model, cert)
    chain = build_twisted_chain(model, sol.v1, sol.v2)
    (top,) = cert.c0()
    assert chain.kernel[0, 0] * math.exp(cert.delta / 2) > 1.0
    rep = tkep_check(chain, cert, strict=False)
    assert rep.moments[top] == math.inf and rep.moments_to_C[top] < math.inf
    with pytest.raises(MomentInfinite):
        tkep_check(chain, cert)


def test_tkep_empty_c0_is_vacuous(bd, bd_solution, bd_cert):
    chain = build_twisted_chain(bd, bd_solution.v1, bd_solution.v2)
    rep = tkep_check(chain, bd_cert)
    assert rep.c0 == () and rep.ok


# -- dynamic programming identity ---------------------------------------------


@pytest.mark.parametrize("stop", [(), (0,), (1,), (0, 1)])
def test_multiplicative_dpp(bd, stop):
    history, _ = march_finite_horizon(bd, min_time=3.0)
    rep = multiplicative_dpp_check(bd, history, stop, 2.0, 0, 20000, seed=11)
    assert rep.t == pytest.approx(2.0) and rep.ok, rep


def test_dpp_on_random_model(rng):
    model = random_model(rng, 4, (2, 2), cost_scale=0.5)
    history, _ = march_finite_horizon(model, min_time=3.0)
    for stop in ((), (2, 3)):
        rep = multiplicative_dpp_check(model, history, stop, 1.5, 3, 20000, seed=5)
        assert rep.ok, rep


def test_dpp_z_floor(one_state):
    history, _ = march_finite_horizon(one_state, min_time=3.0)
    rep = multiplicative_dpp_check(one_state, history, (), 2.0, 0, 10, seed=0)
    assert rep.stderr <= 1e-12 and abs(rep.z) <= 3.0
    assert rep.value == pytest.approx(math.exp(1.5 * rep.t), rel=1e-6)
