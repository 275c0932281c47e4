import math
from fractions import Fraction

import numpy as np
import pytest

from eicoal.coal_sim import (
    COAL_MIGRATION,
    COALESCENCE,
    NO_CHANGE,
    CoalConfig,
    JumpChainUsageError,
    PopulationSegments,
    intercoalescent_intervals,
    intervals_to_csv,
    jump_chain_coalescence_times,
    jump_chain_distribution,
    jump_chain_sample,
    segments_from_ode,
    segments_from_realization,
    simulate_coalescent_tt,
    simulate_coalescent_tt_until_accepted,
)
from eicoal.epi_dynamics import BIRTH, MIGRATION, PiecewiseConstant, PopulationTrajectory
from eicoal.genealogy import extract_events
from eicoal.ode import DeterministicTrajectory
from eicoal.phasetype import IntervalContext, block_transition, build_rate_matrices


def small_realization():
    """Four events after one infectious founder: birth, migration, birth, birth."""
    return PopulationTrajectory(
        times=np.array([1.0, 2.0, 3.0, 4.0]),
        E=np.array([1, 0, 1, 2]),
        I=np.array([1, 2, 2, 2]),
        marks=np.array([BIRTH, MIGRATION, BIRTH, BIRTH]),
        init=(0, 1),
        t_end=5.0,
    )


def test_hand_enumerated_probabilities():
    steps = jump_chain_distribution(small_realization(), (1, 1))
    u4, u3 = steps[0], steps[1]
    assert u4[0] == 4.0 and u3[0] == 3.0
    assert u4[3][COALESCENCE] == Fraction(1, 4)
    assert u4[3][COAL_MIGRATION] == Fraction(1, 4)
    assert u4[2][(1, 1)] == Fraction(1, 2)
    # coalescence at u3 needs (1, 1) after u4, then happens with probability 1/2
    assert u3[3][COALESCENCE] == Fraction(1, 4)
    assert u3[3][COALESCENCE] / u4[2][(1, 1)] == Fraction(1, 2)
    for _, _, dist, kinds in steps:
        assert sum(dist.values()) == 1 and sum(kinds.values()) == 1


def test_sampled_paths_match_exact_law():
    real = small_realization()
    exact = jump_chain_distribution(real, (1, 1))
    n = 20000
    rng = np.random.default_rng(3)
    counts = {}
    for _ in range(n):
        path = jump_chain_sample(real, (1, 1), rng)
        key = path.steps[0].state
        counts[key] = counts.get(key, 0) + 1
    for state, p in exact[0][2].items():
        p = float(p)
        assert abs(counts.get(state, 0) / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_vectorized_times_match_single_paths():
    real = small_realization()
    many = jump_chain_coalescence_times(real, (1, 1), 40000, 1)
    p_u4 = np.mean(many[:, 0] == 1.0)
    assert abs(p_u4 - 0.25) < 3 * math.sqrt(0.25 * 0.75 / 40000)
    # the pair always coalesces by the first event (only one infected then)
    assert not np.any(np.isnan(many))


def test_start_must_fit_population():
    with pytest.raises(JumpChainUsageError):
        jump_chain_sample(small_realization(), (3, 0))


def test_realization_segments_are_time_reversed():
    seg = segments_from_realization(small_realization(), PiecewiseConstant.constant(0.5))
    assert np.allclose(seg.start, [0.0, 1.0, 2.0, 3.0, 4.0])
    assert list(seg.E) == [2, 1, 0, 1, 0] and list(seg.I) == [2, 2, 2, 1, 1]
    assert seg.horizon == 5.0


def test_ode_segments_split_at_rate_changes():
    traj = DeterministicTrajectory(np.array([0.0, 2.0, 4.0]), np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.5, 2.0]))
    seg = segments_from_ode(traj, PiecewiseConstant((1.0,), (0.2, 0.4)))
    assert np.allclose(seg.start, [0.0, 2.0, 3.0])
    assert list(seg.E) == [2.0, 1.0, 1.0]
    assert np.allclose(seg.alpha, [0.4, 0.4, 0.2])


def _constant(E, I, alpha, horizon=1e6):
    return PopulationSegments(np.array([0.0]), np.array([E]), np.array([I]), np.array([alpha]), horizon)


def test_first_coalescence_matches_phase_type():
    E, I, alpha, gamma = 30.0, 40.0, 0.6, 0.4
    cfg = CoalConfig(0, 3, _constant(E, I, alpha), gamma)
    rng = np.random.default_rng(11)
    first = []
    for _ in range(20000):
        out = simulate_coalescent_tt(cfg, rng)
        assert out.accepted
        first.append(out.coalescence_times[0])
    first = np.array(first)
    rm = build_rate_matrices(IntervalContext(E, I, alpha, gamma, 0.1, 3, 1.0))
    for t in (5.0, 20.0, 60.0):
        P = block_transition(rm, t)
        want = P[0, 4:].sum()
        got = np.mean(first <= t)
        assert abs(got - want) < 3 * math.sqrt(want * (1 - want) / len(first))


def test_rejections():
    small = PopulationSegments(np.array([0.0, 1.0]), np.array([5.0, 0.0]), np.array([5.0, 5.0]), np.array([0.5, 0.5]), 2.0)
    out = simulate_coalescent_tt(CoalConfig(0, 6, small, 0.5), 1)
    assert not out.accepted and out.timeline is None
    out = simulate_coalescent_tt(CoalConfig(0, 2, _constant(10.0, 10.0, 1e-9, horizon=0.1), 1e-9), 1)
    assert not out.accepted and "horizon" in out.reason


def test_retry_and_tree_output():
    cfg = CoalConfig(1, 4, _constant(20.0, 20.0, 0.7), 0.5)
    out, tries = simulate_coalescent_tt_until_accepted(cfg, 4)
    assert out.accepted and tries >= 1
    res = simulate_coalescent_tt(cfg, 8, build_tree=True)
    assert res.accepted
    tl = extract_events(res.tree)
    assert np.allclose(tl.coalescent_times(), res.timeline.coalescent_times())
    assert res.timeline.n_coalescent == 4


def test_intervals_and_csv():
    iv = intercoalescent_intervals(np.array([3.0, 1.0, 4.5]))
    assert np.allclose(iv, [1.0, 2.0, 1.5])
    text = intervals_to_csv(np.array([[1.0, 2.0]]), arm="tt")
    assert text.splitlines() == ["arm,replicate,interval_index,length", "tt,0,1,1.0", "tt,0,2,2.0"]
    assert NO_CHANGE == "none"
