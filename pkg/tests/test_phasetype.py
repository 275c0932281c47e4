import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from eicoal.genealogy import COALESCENT, GRID, SAMPLING, EventTimeline, insert_grid
from eicoal.ode import DeterministicTrajectory
from eicoal.phasetype import (
    CoalescentRates,
    IntervalContext,
    KrylovConvergenceError,
    LikelihoodUsageError,
    RateDomainError,
    alternative_loglik,
    augmented_loglik,
    block_transition,
    build_rate_matrices,
    interval_likelihood,
    matexp_action,
    matexp_dense,
)
from oracles import ei_generator, mp_expm, simulate_absorption, taylor_expm


def ctx(k=3, E=4.0, I=5.0, alpha=0.4, gamma=0.3, dt=1.5, end=COALESCENT):
    return IntervalContext(E, I, alpha, gamma, 0.2, k, dt, end)


def test_generator_matches_entrywise_oracle():
    for k, E, I in [(1, 2.0, 3.0), (2, 1.5, 2.5), (4, 6.0, 3.5), (5, 10.0, 4.0)]:
        rm = build_rate_matrices(ctx(k, E, I))
        A, absorb = ei_generator(k, E, I, 0.4, 0.3)
        assert np.allclose(rm.A, A, rtol=1e-14)
        assert rm.L.shape == (k + 1, k - 1)
        for j in range(1, k):
            assert math.isclose(rm.L[j, j - 1], absorb[j], rel_tol=1e-14)
        # rows of Q sum to zero
        assert np.allclose(rm.Q.sum(axis=1), 0.0, atol=1e-12)


def test_migration_off_when_infectious_fully_sampled():
    rm = build_rate_matrices(ctx(k=3, E=5.0, I=2.0))
    # with j = 1 there are 2 I lineages in a population of 2: no unsampled infector
    assert rm.A[1, 0] == 0.0
    assert rm.A[2, 1] > 0.0


def test_nonpositive_population_rejected():
    with pytest.raises(RateDomainError):
        build_rate_matrices(ctx(E=0.0))


def test_context_validation():
    with pytest.raises(LikelihoodUsageError):
        ctx(dt=-1.0)
    with pytest.raises(LikelihoodUsageError):
        ctx(k=0)


def test_dense_expm_against_taylor(rng):
    for _ in range(10):
        n = int(rng.integers(1, 10))
        M = rng.normal(size=(n, n))
        M *= rng.uniform(0.1, 5.0) / np.abs(M).sum(axis=0).max()
        assert np.allclose(matexp_dense(M), taylor_expm(M), atol=1e-12)


def test_dense_expm_large_norm_and_zero():
    M = np.array([[-40.0, 40.0], [3.0, -3.0]])
    assert np.allclose(matexp_dense(M), mp_expm(M), atol=1e-12)
    assert np.array_equal(matexp_dense(np.zeros((3, 3))), np.eye(3))


def test_krylov_action_matches_dense(rng):
    for n in (5, 30, 120):
        c = ctx(k=n - 1, E=2.0 * n, I=1.5 * n, alpha=0.5, gamma=0.4)
        A = build_rate_matrices(c).A
        v = rng.random(n)
        want = matexp_dense(A * 0.7) @ v
        got = matexp_action(A, v, 0.7)
        assert np.allclose(got, want, rtol=1e-8, atol=1e-14 * np.abs(want).max())


def test_krylov_step_budget():
    A = -np.diag(np.arange(1.0, 40.0))
    with pytest.raises(KrylovConvergenceError):
        matexp_action(A * 1e4, np.ones(39), 1.0, m=2, max_steps=3)


@pytest.mark.parametrize("method", ["dense", "krylov", "compiled"])
def test_interval_likelihood_routes_agree(method):
    for end in (COALESCENT, SAMPLING):
        c = ctx(k=4, end=end)
        hi = 2 if end == COALESCENT else 4
        for s0 in range(5):
            for s1 in range(hi + 1):
                ref = mp_expm(build_rate_matrices(c).A * c.dt)[s0]
                if end == COALESCENT:
                    ref = ref @ build_rate_matrices(c).L[:, s1]
                else:
                    ref = ref[s1]
                assert math.isclose(interval_likelihood(s0, s1, c, method), ref, rel_tol=1e-8, abs_tol=1e-15)


def test_interval_likelihood_state_errors():
    with pytest.raises(LikelihoodUsageError):
        interval_likelihood(5, 0, ctx(k=3))
    with pytest.raises(LikelihoodUsageError):
        interval_likelihood(0, 2, ctx(k=3))


def test_dt_zero_transition_is_identity():
    c = ctx(k=3, dt=0.0, end=SAMPLING)
    for s0 in range(4):
        for s1 in range(4):
            assert interval_likelihood(s0, s1, c) == (1.0 if s0 == s1 else 0.0)


def test_two_lineage_density_closed_form():
    # k = 2, start with both in I: 0 -> 1 at rate 2 g (E+1)/I, then 1 coalesces or moves
    E, I, a, g = 3.0, 4.0, 0.5, 0.25
    c = IntervalContext(E, I, a, g, 0.1, 2, 0.0, COALESCENT)
    A, absorb = ei_generator(2, E, I, a, g)
    for t in (0.3, 1.0, 4.0):
        want = float((mp_expm(A * t) @ np.array([0.0, absorb[1], 0.0]))[0])
        got = interval_likelihood(0, 0, IntervalContext(E, I, a, g, 0.1, 2, t, COALESCENT))
        assert math.isclose(got, want, rel_tol=1e-10)
    assert interval_likelihood(0, 0, c) == 0.0


def test_density_integrates_to_one():
    c0 = ctx(k=3)
    total = 0.0
    for s1 in range(2):
        f = lambda t, s1=s1: interval_likelihood(1, s1, IntervalContext(c0.E, c0.I, c0.alpha, c0.gamma, c0.nu, 3, t))
        total += quad(f, 0, np.inf, limit=200)[0]
    assert math.isclose(total, 1.0, rel_tol=1e-7)


def test_density_against_ctmc_simulation(rng):
    k, E, I, a, g = 3, 4.0, 5.0, 0.4, 0.3
    A, absorb = ei_generator(k, E, I, a, g)
    times, states = simulate_absorption(A, absorb, 1, 200_000, rng)
    h = 0.2
    for t in (0.5, 2.0, 5.0):
        for s1 in range(k - 1):
            p = np.mean((times > t - h / 2) & (times <= t + h / 2) & (states == s1))
            f = lambda x: interval_likelihood(1, s1, IntervalContext(E, I, a, g, 0.2, k, x))
            want = quad(f, t - h / 2, t + h / 2)[0]
            se = math.sqrt(max(want * (1 - want), 1e-12) / len(times))
            assert abs(p - want) < 4 * se


def test_block_transition_rows_sum_to_one(rng):
    for _ in range(20):
        k = int(rng.integers(2, 8))
        c = ctx(k=k, E=rng.uniform(k, 3 * k), I=rng.uniform(k, 3 * k), alpha=rng.uniform(0.1, 1), gamma=rng.uniform(0.1, 1))
        P = block_transition(build_rate_matrices(c), rng.uniform(0, 5))
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(P > -1e-12)


def _constant_traj(timeline, E, I):
    u = timeline.times[-1] - timeline.times[::-1]
    return DeterministicTrajectory(u, np.full(len(u), E), np.full(len(u), I))


def test_marginalization_over_grid_states():
    base = EventTimeline.from_events([0.0, 1.2, 2.9, 6.1], [SAMPLING, SAMPLING, COALESCENT, COALESCENT], [2, 1, 0, 0])
    tl = insert_grid(base, 2.0)
    traj = DeterministicTrajectory(tl.times[-1] - tl.times[::-1], np.linspace(3.0, 6.0, len(tl)), np.linspace(4.0, 7.0, len(tl)))
    rates = CoalescentRates(0.3, 0.2, np.linspace(0.4, 0.8, len(tl) - 1))
    keep = tl.types != GRID
    grid_pos = np.flatnonzero(~keep)
    for ev in itertools.product(*[range(k + 1) for k in tl.k[keep]]):
        ev = np.array(ev)
        ev[0] = 0
        if np.any(ev[1:] > tl.k[keep][1:]):
            continue
        total = 0.0
        for combo in itertools.product(*[range(tl.k[i] + 1) for i in grid_pos]):
            s = np.zeros(len(tl), dtype=int)
            s[keep] = ev
            s[grid_pos] = combo
            total += math.exp(augmented_loglik(tl, s, rates, traj, check_validity=False))
        alt = alternative_loglik(tl, ev, rates, traj, check_validity=False)
        dense = alternative_loglik(tl, ev, rates, traj, method="dense", check_validity=False)
        if total == 0.0:
            assert alt == -np.inf
        else:
            assert math.isclose(math.exp(alt), total, rel_tol=1e-10)
            assert math.isclose(dense, alt, rel_tol=1e-10)


def test_augmented_routes_agree(rng):
    from conftest import random_timeline

    tl = insert_grid(random_timeline(rng, 6, 2, span=15.0), 3.0)
    n = len(tl)
    traj = DeterministicTrajectory(tl.times[-1] - tl.times[::-1], np.full(n, 8.0), np.full(n, 9.0))
    rates = CoalescentRates(0.3, 0.2, 0.6)
    from eicoal.inference import sample_latent_states

    s = sample_latent_states(tl, rates, traj, seed=1)
    a = augmented_loglik(tl, s, rates, traj)
    assert np.isfinite(a)
    assert math.isclose(a, augmented_loglik(tl, s, rates, traj, method="dense"), rel_tol=1e-10)
    assert math.isclose(a, augmented_loglik(tl, s, rates, traj, method="krylov"), rel_tol=1e-8)


def test_validity_violation_gives_minus_inf():
    tl = EventTimeline.from_events([0.0, 1.0], [SAMPLING, COALESCENT], [2, 0])
    traj = _constant_traj(tl, 0.5, 5.0)
    # the lineage in E just before the coalescence does not fit in E = 0.5
    assert augmented_loglik(tl, np.array([0, 0]), CoalescentRates(0.3, 0.2, 0.5), traj) == -np.inf


def test_state_vector_length_checked():
    tl = EventTimeline.from_events([0.0, 1.0], [SAMPLING, COALESCENT], [2, 0])
    with pytest.raises(LikelihoodUsageError):
        augmented_loglik(tl, np.array([0]), CoalescentRates(0.3, 0.2, 0.5), _constant_traj(tl, 3.0, 3.0))


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 6), st.floats(1.0, 20.0), st.floats(1.0, 20.0), st.floats(0.01, 2.0),
    st.floats(0.01, 2.0), st.floats(0.0, 10.0),
)
def test_substochastic_rows(k, E, I, alpha, gamma, dt):
    c = IntervalContext(max(E, k), max(I, k), alpha, gamma, 0.2, k, dt, SAMPLING)
    P = matexp_dense(build_rate_matrices(c).A * dt)
    assert np.all(P >= -1e-12)
    assert np.all(P.sum(axis=1) <= 1.0 + 1e-10)
