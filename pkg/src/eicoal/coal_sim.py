"""Backwards-time simulation of sampled lineages under the EI model.

Two routes are provided:

* :func:`simulate_coalescent_tt` draws events of the approximating
  continuous-time chain (lineage counts ``(n_E, n_I)`` with population sizes
  held piecewise constant) by inverting the integrated total event rate;
* :func:`jump_chain_sample` walks backwards over the recorded events of one
  stochastic population realization and decides at each event whether it
  touched the sample, using exact hypergeometric-style probabilities.  The
  Fraction-valued :func:`jump_chain_distribution` enumerates the same chain
  exactly for small realizations.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from .epi_dynamics import BIRTH, DEATH, MIGRATION, PiecewiseConstant, PopulationTrajectory, as_generator
from .genealogy import COALESCENT, SAMPLING, EventTimeline, SampledTree, tree_from_times
from .ode import DeterministicTrajectory

# transition kinds of the sample chain
COALESCENCE = "coalescence"
BACK_MIGRATION = "migration"          # I lineage traced back into E
COAL_MIGRATION = "coalescent_migration"  # E lineage whose infector is unsampled
NO_CHANGE = "none"


class JumpChainUsageError(ValueError):
    pass


@dataclass(frozen=True)
class PopulationSegments:
    """Population sizes as a step function of backward time.

    Segment ``j`` covers ``[start[j], start[j+1])`` (the last one ends at
    ``horizon``) with sizes ``E[j]``, ``I[j]`` and birth rate ``alpha[j]``.
    """

    start: np.ndarray
    E: np.ndarray
    I: np.ndarray
    alpha: np.ndarray
    horizon: float

    @property
    def end(self) -> np.ndarray:
        return np.append(self.start[1:], self.horizon)


def _merge_alpha(start, E, I, horizon, alpha: PiecewiseConstant, T: float):
    # split segments at alpha breakpoints (given in forward time)
    cuts = sorted({T - b for b in alpha.breakpoints if 0.0 < T - b < horizon})
    if cuts:
        idx = np.searchsorted(start, cuts, side="right") - 1
        start = np.concatenate([start, cuts])
        E = np.concatenate([E, E[idx]])
        I = np.concatenate([I, I[idx]])
        order = np.argsort(start, kind="stable")
        start, E, I = start[order], E[order], I[order]
    ends = np.append(start[1:], horizon)
    mids = T - 0.5 * (start + ends)
    return start, E, I, np.asarray(alpha(mids), dtype=float)


def segments_from_realization(traj: PopulationTrajectory, alpha: PiecewiseConstant, T: Optional[float] = None):
    """Backward-time steps from a stochastic realization observed at ``T``."""
    T = traj.t_end if T is None else float(T)
    keep = traj.times <= T
    times = traj.times[keep]
    # forward piece j holds H(u_j) on [u_j, u_{j+1}); backwards it starts at T - u_{j+1}
    fwd_start = np.concatenate([[0.0], times])
    fwd_end = np.append(fwd_start[1:], T)
    E_b = np.concatenate([[traj.init[0]], traj.E[keep]]).astype(float)[::-1]
    I_b = np.concatenate([[traj.init[1]], traj.I[keep]]).astype(float)[::-1]
    bstart = (T - fwd_end)[::-1]
    # drop zero-length pieces (events exactly at T)
    ok = (fwd_end - fwd_start)[::-1] > 0
    s, e, i, a = _merge_alpha(bstart[ok], E_b[ok], I_b[ok], T, alpha, T)
    return PopulationSegments(s, e, i, a, T)


def segments_from_ode(traj: DeterministicTrajectory, alpha: PiecewiseConstant, T: Optional[float] = None):
    """Backward-time steps from grid values of the deterministic solution.

    Between forward grid times ``g_j < g_{j+1}`` the value at ``g_j`` is used,
    matching the convention of the likelihood.
    """
    T = float(traj.times[-1]) if T is None else float(T)
    g = traj.times
    keep = g < T
    fwd_start = g[keep]
    E_b = traj.E[keep][::-1].astype(float)
    I_b = traj.I[keep][::-1].astype(float)
    fwd_end = np.append(fwd_start[1:], T)
    bstart = (T - fwd_end)[::-1]
    s, e, i, a = _merge_alpha(bstart, E_b, I_b, T - fwd_start[0], alpha, T)
    return PopulationSegments(s, e, i, a, T - fwd_start[0])


@dataclass(frozen=True)
class CoalConfig:
    n_E: int
    n_I: int
    segments: PopulationSegments
    gamma: float

    def __post_init__(self):
        if self.n_E < 0 or self.n_I < 0 or self.n_E + self.n_I < 2:
            raise JumpChainUsageError("need at least two sampled lineages")


@dataclass(frozen=True)
class TTOutcome:
    """Result of one backwards simulation; ``timeline`` is ``None`` when rejected."""

    accepted: bool
    reason: str
    timeline: Optional[EventTimeline]
    transitions: tuple = ()
    tree: Optional[SampledTree] = None

    @property
    def coalescence_times(self) -> np.ndarray:
        return np.array([t for t, kind, *_ in self.transitions if kind == COALESCENCE])


def _lineage_rates(nE, nI, E, I, alpha, gamma):
    if nE > 0:
        coal = nE * nI * alpha / E
        cmig = nE * (I - nI) * alpha / E if I > nI else 0.0
    else:
        coal = cmig = 0.0
    mig = nI * gamma * (E + 1.0) / I if nI > 0 else 0.0
    return coal, mig, cmig


def simulate_coalescent_tt(config: CoalConfig, seed=None, build_tree: bool = False) -> TTOutcome:
    """Simulate lineage events backwards by time transformation.

    On each constant-population segment the total rate is constant between
    events, so the integrated rate is piecewise linear and its inverse at a
    standard exponential draw gives the next event time exactly.  The run is
    rejected when the sample no longer fits in the population (on entering a
    segment or after an event) or the horizon is reached before the root.
    """
    rng = as_generator(seed)
    seg = config.segments
    ends = seg.end
    nE, nI = int(config.n_E), int(config.n_I)
    gamma = float(config.gamma)
    t = 0.0
    j = 0
    transitions = []
    # lineage bookkeeping for optional tree output
    if build_tree:
        parent: list[int] = []
        node_time: list[float] = []
        E_lin = []
        I_lin = []
        for x in range(nE + nI):
            parent.append(-1)
            node_time.append(0.0)
            (E_lin if x < nE else I_lin).append(x)

    def fits(j):
        return nE <= seg.E[j] and nI <= seg.I[j]

    if not fits(0):
        return TTOutcome(False, "sample exceeds population at the present", None)
    target = rng.standard_exponential()
    while nE + nI > 1:
        E, I, alpha = seg.E[j], seg.I[j], seg.alpha[j]
        coal, mig, cmig = _lineage_rates(nE, nI, E, I, alpha, gamma)
        total = coal + mig + cmig
        room = ends[j] - t
        if total * room <= target:
            target -= total * room
            t = ends[j]
            j += 1
            if j >= len(seg.start):
                return TTOutcome(False, "reached the horizon before the root", None, tuple(transitions))
            if not fits(j):
                return TTOutcome(False, "sample exceeds population", None, tuple(transitions))
            continue
        t += target / total
        x = rng.random() * total
        if x < coal:
            kind = COALESCENCE
            nE -= 1
            if build_tree:
                a = E_lin.pop(int(rng.integers(len(E_lin))))
                b = I_lin.pop(int(rng.integers(len(I_lin))))
                new = len(parent)
                parent.append(-1)
                node_time.append(t)
                parent[a] = new
                parent[b] = new
                I_lin.append(new)
        elif x < coal + mig:
            kind = BACK_MIGRATION
            nE += 1
            nI -= 1
            if build_tree:
                E_lin.append(I_lin.pop(int(rng.integers(len(I_lin)))))
        else:
            kind = COAL_MIGRATION
            nE -= 1
            nI += 1
            if build_tree:
                I_lin.append(E_lin.pop(int(rng.integers(len(E_lin)))))
        transitions.append((t, kind, nE, nI))
        if not fits(j):
            return TTOutcome(False, "sample exceeds population", None, tuple(transitions))
        target = rng.standard_exponential()
    n0 = config.n_E + config.n_I
    coal_times = [tr[0] for tr in transitions if tr[1] == COALESCENCE]
    timeline = EventTimeline.from_events(
        [0.0] + coal_times, [SAMPLING] + [COALESCENT] * len(coal_times), [n0] + [0] * len(coal_times)
    )
    tree = None
    if build_tree:
        tree = tree_from_times(parent, node_time, [f"s{x}" if x < n0 else "" for x in range(len(parent))])
    return TTOutcome(True, "", timeline, tuple(transitions), tree)


def simulate_coalescent_tt_until_accepted(config: CoalConfig, seed=None, max_tries: int = 1000) -> tuple[TTOutcome, int]:
    """Repeat :func:`simulate_coalescent_tt` until a run is accepted."""
    rng = as_generator(seed)
    last = None
    for tries in range(1, max_tries + 1):
        last = simulate_coalescent_tt(config, rng)
        if last.accepted:
            return last, tries
    return last, max_tries


@dataclass(frozen=True)
class JumpStep:
    """One population event visited by the backwards jump chain."""

    u: float
    mark: int
    kind: str
    probability: float
    state: tuple


@dataclass(frozen=True)
class JumpChainPath:
    steps: tuple
    T: float

    @property
    def coalescence_times(self) -> np.ndarray:
        """Backward times (``T - u``) of sample coalescences, most recent first."""
        return np.array([self.T - s.u for s in self.steps if s.kind == COALESCENCE])


def _event_outcomes(mark, nE, nI, E, I):
    """Possible sample transitions at one population event.

    ``E`` and ``I`` are the population sizes just after the event (forward
    time).  Returns a list of ``(kind, new_state, probability)`` with
    probabilities as Fractions summing to 1.
    """
    if mark == BIRTH:
        pE = Fraction(nE, E)
        p_coal = pE * Fraction(nI, I)
        p_cmig = pE * Fraction(I - nI, I)
        return [
            (COALESCENCE, (nE - 1, nI), p_coal),
            (COAL_MIGRATION, (nE - 1, nI + 1), p_cmig),
            (NO_CHANGE, (nE, nI), 1 - pE),
        ]
    if mark == MIGRATION:
        p = Fraction(nI, I)
        return [(BACK_MIGRATION, (nE + 1, nI - 1), p), (NO_CHANGE, (nE, nI), 1 - p)]
    return [(NO_CHANGE, (nE, nI), Fraction(1))]


def _check_start(traj: PopulationTrajectory, c_init, T):
    nE, nI = (int(x) for x in c_init)
    E_T, I_T = traj.state_at(T)
    if nE < 0 or nI < 0 or nE > E_T or nI > I_T:
        raise JumpChainUsageError(f"sample {c_init} does not fit the population {(E_T, I_T)} at time {T}")
    return nE, nI


def jump_chain_sample(realization: PopulationTrajectory, c_init: tuple, seed=None, T: Optional[float] = None) -> JumpChainPath:
    """Draw the sample's history backwards over a realization's events."""
    rng = as_generator(seed)
    T = realization.t_end if T is None else float(T)
    nE, nI = _check_start(realization, c_init, T)
    steps = []
    idx = np.flatnonzero(realization.times <= T)[::-1]
    for i in idx:
        mark = int(realization.marks[i])
        E, I = int(realization.E[i]), int(realization.I[i])
        outcomes = _event_outcomes(mark, nE, nI, E, I)
        x = rng.random()
        acc = 0.0
        for kind, state, p in outcomes:
            acc += float(p)
            if x < acc or kind == outcomes[-1][0]:
                break
        nE, nI = state
        steps.append(JumpStep(float(realization.times[i]), mark, kind, float(p), (nE, nI)))
    return JumpChainPath(tuple(steps), T)


def jump_chain_distribution(realization: PopulationTrajectory, c_init: tuple, T: Optional[float] = None):
    """Exact marginal law of the sample state after each event, backwards.

    Returns a list (one entry per event, most recent first) of
    ``(u, mark, {state: probability}, {kind: probability})`` where the second
    dict gives the probability of each kind of sample transition at that
    event.  All probabilities are Fractions.
    """
    T = realization.t_end if T is None else float(T)
    start = _check_start(realization, c_init, T)
    dist = {start: Fraction(1)}
    out = []
    for i in np.flatnonzero(realization.times <= T)[::-1]:
        mark = int(realization.marks[i])
        E, I = int(realization.E[i]), int(realization.I[i])
        new: dict = {}
        kinds: dict = {}
        for (nE, nI), w in dist.items():
            for kind, state, p in _event_outcomes(mark, nE, nI, E, I):
                if p == 0:
                    continue
                new[state] = new.get(state, Fraction(0)) + w * p
                kinds[kind] = kinds.get(kind, Fraction(0)) + w * p
        dist = new
        out.append((float(realization.times[i]), mark, dict(dist), kinds))
    return out


def jump_chain_coalescence_times(
    realization: PopulationTrajectory, c_init: tuple, n_reps: int, seed=None, T: Optional[float] = None
) -> np.ndarray:
    """Backward coalescence times for many independent jump-chain draws.

    Returns an ``(n_reps, n - 1)`` array, most recent coalescence first, with
    ``nan`` where fewer coalescences happened.
    """
    rng = as_generator(seed)
    T = realization.t_end if T is None else float(T)
    nE0, nI0 = _check_start(realization, c_init, T)
    n = nE0 + nI0
    nE = np.full(n_reps, nE0, dtype=np.int64)
    nI = np.full(n_reps, nI0, dtype=np.int64)
    out = np.full((n_reps, max(n - 1, 0)), np.nan)
    for i in np.flatnonzero(realization.times <= T)[::-1]:
        mark = int(realization.marks[i])
        if mark == DEATH:
            continue
        E, I = float(realization.E[i]), float(realization.I[i])
        x = rng.random(n_reps)
        if mark == BIRTH:
            pE = nE / E
            coal = x < pE * (nI / I)
            cmig = (~coal) & (x < pE)
            if coal.any():
                k = nE[coal] + nI[coal]
                out[np.flatnonzero(coal), n - k] = T - realization.times[i]
            nE = nE - coal - cmig
            nI = nI + cmig
        else:
            mig = x < nI / I
            nE = nE + mig
            nI = nI - mig
    return out


def intercoalescent_intervals(timeline: Union[EventTimeline, np.ndarray]) -> np.ndarray:
    """Gaps between successive coalescences, starting from time 0."""
    times = timeline.coalescent_times() if isinstance(timeline, EventTimeline) else np.asarray(timeline, dtype=float)
    if len(times) == 0:
        return np.zeros(0)
    return np.diff(np.concatenate([[0.0], np.sort(times)]))


def intervals_to_csv(intervals: np.ndarray, arm: Optional[str] = None) -> str:
    """Rows ``replicate, interval_index, length`` (``interval_index`` from 1)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = (["arm"] if arm is not None else []) + ["replicate", "interval_index", "length"]
    writer.writerow(header)
    for r, row in enumerate(np.atleast_2d(intervals)):
        for j, x in enumerate(row, start=1):
            if np.isnan(x):
                continue
            writer.writerow(([arm] if arm is not None else []) + [r, j, repr(float(x))])
    return buf.getvalue()
