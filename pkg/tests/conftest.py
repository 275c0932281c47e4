import numpy as np
import pytest

from eicoal.genealogy import COALESCENT, SAMPLING, EventTimeline

# one "PASS/FAIL criterion N: detail" line per acceptance check, printed at the end
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda x: int(x.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def random_timeline(rng, n_tips, n_sampling_events=1, span=20.0):
    """A valid timeline with ``n_tips`` tips spread over sampling events."""
    n_events = n_sampling_events + n_tips - 1
    while True:
        times = np.sort(rng.uniform(0.0, span, n_events - 1))
        times = np.concatenate([[0.0], times])
        if np.all(np.diff(times) > 1e-3):
            break
    # first event is a sampling event; place the others so k never drops below 1
    counts = rng.multinomial(n_tips - n_sampling_events, np.ones(n_sampling_events) / n_sampling_events) + 1
    types = [SAMPLING]
    added = [int(counts[0])]
    k = int(counts[0])
    remaining_samp = list(counts[1:])
    remaining_coal = n_tips - 1
    for _ in range(1, n_events):
        can_coal = k >= 2 and remaining_coal > 0
        must_samp = remaining_coal == 0 or (k == 1 and remaining_samp)
        pick_samp = bool(remaining_samp) and (must_samp or not can_coal or rng.random() < 0.4)
        if pick_samp:
            a = int(remaining_samp.pop(0))
            types.append(SAMPLING)
            added.append(a)
            k += a
        else:
            types.append(COALESCENT)
            added.append(0)
            k -= 1
            remaining_coal -= 1
    return EventTimeline.from_events(times, types, added)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def ode_tree_timeline(n_tips=8, T=60.0, R=2.0, seed=1):
    """Timeline of a genealogy simulated backwards through an ODE epidemic."""
    from eicoal.coal_sim import CoalConfig, segments_from_ode, simulate_coalescent_tt_until_accepted
    from eicoal.epi_dynamics import PiecewiseConstant
    from eicoal.ode import solve_on_grid

    gamma, nu = 0.25, 1 / 7
    grid = np.arange(0.0, T + 1e-9, 0.5)
    traj = solve_on_grid(gamma, nu, np.array([R]), np.array([]), (1.1, 1.1), grid)
    cfg = CoalConfig(0, n_tips, segments_from_ode(traj, PiecewiseConstant.constant(R * nu)), gamma)
    out, _ = simulate_coalescent_tt_until_accepted(cfg, seed, 10000)
    return out.timeline
