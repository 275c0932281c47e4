"""Reproduction-number scenarios for simulation studies.

Each scenario runs the agent-based SEIR model in a population of 15000 with
mean latent period 4 days and mean infectious period 7 days for 22 weeks,
then samples infectious individuals up to day 153 and reconstructs their
genealogy.  ``R0(u)`` follows one of three shapes:

* ``fixed``: 2.2 throughout;
* ``increase``: 1.3, rising linearly (in daily steps) to 2.3 between weeks 4
  and 9, then 2.3;
* ``control``: 2.2, dropping to 1.1 at week 12.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .epi_dynamics import (
    InfectionHistory,
    PiecewiseConstant,
    PopulationTrajectory,
    SampledGenealogy,
    SamplingScheme,
    SimulationRejected,
    build_tree,
    draw_samples,
    simulate_seir_agents,
)
from .genealogy import EventTimeline, extract_events
from .metrics import TruthGrid

SCENARIOS = ("fixed", "increase", "control")


def r0_schedule(name: str) -> PiecewiseConstant:
    if name == "fixed":
        return PiecewiseConstant.constant(2.2)
    if name == "increase":
        start, stop = 28.0, 63.0
        days = np.arange(start, stop + 1.0)
        vals = 1.3 + (2.3 - 1.3) * (days - start) / (stop - start)
        return PiecewiseConstant(tuple(days), (1.3,) + tuple(vals))
    if name == "control":
        return PiecewiseConstant((84.0,), (2.2, 1.1))
    raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "fixed"
    N: int = 15000
    gamma: float = 0.25
    nu: float = 1.0 / 7.0
    t_end: float = 154.0
    t_last: float = 153.0
    n_samples: int = 50
    scheme: SamplingScheme = field(default_factory=SamplingScheme)
    init_infectious: int = 1
    max_attempts: int = 500

    def __post_init__(self):
        r0_schedule(self.name)
        if self.t_last > self.t_end:
            raise ValueError("last sampling time must not exceed the simulation length")


@dataclass(frozen=True)
class ScenarioRealization:
    config: ScenarioConfig
    attempts: int
    trajectory: PopulationTrajectory
    history: InfectionHistory
    genealogy: SampledGenealogy
    timeline: EventTimeline

    def truth(self, step: float = 0.5) -> TruthGrid:
        """True ``R_u = R0(u) S(u) / N`` on a grid in days since the tree root."""
        cfg = self.config
        root = self.genealogy.root_time
        span = float(self.genealogy.sample_times.max()) - root
        rel = np.arange(0.0, span + 1e-9, step)
        u = root + rel
        S = self.trajectory.susceptible_on_grid(u)
        R = r0_schedule(cfg.name)(u) * S / cfg.N
        E, I = self.trajectory.counts_on_grid(u)
        return TruthGrid(rel, R, E.astype(float), I.astype(float))


def simulate_scenario(config: ScenarioConfig, seed=None) -> ScenarioRealization:
    """Simulate until a realization supports the requested sampling design.

    Attempt ``j`` uses the ``j``-th child of ``SeedSequence(seed)``.
    """
    root_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    beta = r0_schedule(config.name)
    beta = PiecewiseConstant(beta.breakpoints, tuple(v * config.nu for v in beta.values))
    children = root_seq.spawn(config.max_attempts)
    for attempt, child in enumerate(children, start=1):
        rng = np.random.default_rng(child)
        traj, hist = simulate_seir_agents(
            config.N, beta, config.gamma, config.nu, config.init_infectious, config.t_end, rng
        )
        try:
            ids, times = draw_samples(hist, config.scheme, config.n_samples, config.t_last, rng)
            gen = build_tree(hist, ids, times)
        except SimulationRejected:
            continue
        return ScenarioRealization(
            config=config,
            attempts=attempt,
            trajectory=traj,
            history=hist.with_samples(ids, times),
            genealogy=gen,
            timeline=extract_events(gen.tree),
        )
    raise SimulationRejected(f"no usable realization in {config.max_attempts} attempts")
