"""Compare true EI genealogies with the approximating backwards process.

For each accepted forward realization of the EI process three genealogies of
the sampled infectious individuals are produced:

* ``empirical``: reconstructed from the recorded infection history;
* ``tt``: simulated backwards with the realized population counts;
* ``tt_ode``: simulated backwards with the deterministic solution in place of
  the realized counts.

Their intercoalescent intervals are returned for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coal_sim import (
    CoalConfig,
    intercoalescent_intervals,
    intervals_to_csv,
    segments_from_ode,
    segments_from_realization,
    simulate_coalescent_tt_until_accepted,
)
from .epi_dynamics import (
    EIParams,
    PiecewiseConstant,
    SamplingScheme,
    build_tree,
    draw_samples,
    simulate_ei_with_history,
)
from .genealogy import extract_events
from .ode import solve_on_grid

ARMS = ("empirical", "tt", "tt_ode")


@dataclass(frozen=True)
class FidelityConfig:
    alpha: float = 2.0 / 3.0
    nu: float = 1.0 / 3.0
    gamma: float = 0.5
    T: float = 35.0
    n_trajectories: int = 1000
    n_sampled: int = 5
    min_infectious: int = 5
    ode_step: float = 0.5
    max_tt_tries: int = 10000
    max_attempts: int = 1_000_000


@dataclass(frozen=True)
class FidelityResult:
    config: FidelityConfig
    intervals: dict
    attempts: int
    tt_tries: dict

    def medians(self) -> dict:
        return {arm: np.median(self.intervals[arm], axis=0) for arm in ARMS}

    def to_csv(self, arm: str) -> str:
        return intervals_to_csv(self.intervals[arm], arm=arm)


def run_fidelity(config: FidelityConfig, seed=None) -> FidelityResult:
    """Run the three arms on ``config.n_trajectories`` accepted realizations.

    Forward attempt ``a`` draws from child ``a`` of ``SeedSequence(seed)``;
    its three grandchildren drive the realization and sampling, the ``tt``
    arm and the ``tt_ode`` arm respectively.
    """
    params = EIParams(config.gamma, config.nu, PiecewiseConstant.constant(config.alpha))
    grid = np.arange(0.0, config.T + 1e-9, config.ode_step)
    if grid[-1] < config.T:
        grid = np.append(grid, config.T)
    ode = solve_on_grid(config.gamma, config.nu, np.array([config.alpha / config.nu]), np.array([]), (0.0, 1.0), grid)
    ode_cfg = CoalConfig(0, config.n_sampled, segments_from_ode(ode, params.alpha), config.gamma)

    root = np.random.SeedSequence(seed)
    n_int = config.n_sampled - 1
    out = {arm: [] for arm in ARMS}
    tries = {"tt": [], "tt_ode": []}
    attempts = 0
    while len(out["empirical"]) < config.n_trajectories:
        if attempts >= config.max_attempts:
            raise RuntimeError("fidelity run exhausted its forward-simulation budget")
        (fwd_seq, tt_seq, ode_seq) = np.random.SeedSequence(root.entropy, spawn_key=(attempts,)).spawn(3)
        attempts += 1
        rng = np.random.default_rng(fwd_seq)
        traj, hist = simulate_ei_with_history(params, (0, 1), config.T, rng)
        if traj.state_at(config.T)[1] < config.min_infectious:
            continue
        ids, times = draw_samples(hist, SamplingScheme("isochronous"), config.n_sampled, config.T, rng)
        gen = build_tree(hist, ids, times)
        emp = intercoalescent_intervals(extract_events(gen.tree))

        tt_cfg = CoalConfig(0, config.n_sampled, segments_from_realization(traj, params.alpha, config.T), config.gamma)
        tt, n_tt = simulate_coalescent_tt_until_accepted(tt_cfg, np.random.default_rng(tt_seq), config.max_tt_tries)
        tto, n_ode = simulate_coalescent_tt_until_accepted(ode_cfg, np.random.default_rng(ode_seq), config.max_tt_tries)
        if not (tt.accepted and tto.accepted):
            raise RuntimeError("backwards simulation was never accepted within the retry budget")
        out["empirical"].append(emp)
        out["tt"].append(intercoalescent_intervals(tt.timeline))
        out["tt_ode"].append(intercoalescent_intervals(tto.timeline))
        tries["tt"].append(n_tt)
        tries["tt_ode"].append(n_ode)
    intervals = {arm: np.asarray(v, dtype=float).reshape(-1, n_int) for arm, v in out.items()}
    return FidelityResult(config, intervals, attempts, {k: np.asarray(v) for k, v in tries.items()})
