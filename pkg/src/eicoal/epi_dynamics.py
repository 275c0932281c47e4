"""Forward-time stochastic epidemics and the genealogies they induce.

Two simulators share one event-driven core:

* the EI jump process, where each infectious individual gives birth to a new
  exposed individual at rate ``alpha(u)``, exposed individuals become
  infectious at rate ``gamma`` and infectious individuals are removed at
  rate ``nu``;
* an agent-based SEIR model in a closed population of size ``N``, where the
  infection rate is ``beta(u) S I / N``.

Both record who infected whom, so that the genealogy of any set of sampled
individuals can be reconstructed exactly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .genealogy import SampledTree, tree_from_times

BIRTH = 1
MIGRATION = 2
DEATH = 3
MARK_NAMES = {BIRTH: "birth", MIGRATION: "migration", DEATH: "death"}


class SimulationRejected(RuntimeError):
    """A realization that does not meet the requested sampling design."""


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class PiecewiseConstant:
    """A right-continuous step function of forward time.

    ``values[0]`` holds before ``breakpoints[0]``, ``values[j]`` on
    ``[breakpoints[j-1], breakpoints[j])`` and ``values[-1]`` afterwards.
    """

    breakpoints: tuple
    values: tuple

    def __post_init__(self):
        b = tuple(float(x) for x in self.breakpoints)
        v = tuple(float(x) for x in self.values)
        if len(v) != len(b) + 1:
            raise ValueError("need one more value than breakpoints")
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstant":
        return cls((), (value,))

    def __call__(self, u):
        idx = np.searchsorted(np.asarray(self.breakpoints), u, side="right")
        return np.asarray(self.values)[idx]

    def segments(self, t_start: float, t_end: float):
        """Yield ``(a, b, value)`` pieces covering ``[t_start, t_end)``."""
        cuts = [x for x in self.breakpoints if t_start < x < t_end]
        edges = [t_start] + cuts + [t_end]
        for a, b in zip(edges[:-1], edges[1:]):
            yield a, b, float(self(a))


@dataclass(frozen=True)
class EIParams:
    gamma: float
    nu: float
    alpha: PiecewiseConstant

    def __post_init__(self):
        if self.gamma < 0 or self.nu < 0:
            raise ValueError("gamma and nu must be nonnegative")
        if min(self.alpha.values) < 0:
            raise ValueError("alpha must be nonnegative")

    def reproduction_number(self, u):
        return self.alpha(u) / self.nu


@dataclass(frozen=True)
class PopulationTrajectory:
    """Counts after each event; constant between events.

    For the SEIR model ``S`` holds the susceptible count after each event.
    """

    times: np.ndarray
    E: np.ndarray
    I: np.ndarray
    marks: np.ndarray
    init: tuple
    t_end: float
    S: Optional[np.ndarray] = None
    N: Optional[int] = None

    def state_at(self, u: float) -> tuple:
        idx = int(np.searchsorted(self.times, u, side="right")) - 1
        if idx < 0:
            return tuple(int(x) for x in self.init)
        return int(self.E[idx]), int(self.I[idx])

    def counts_on_grid(self, grid) -> tuple[np.ndarray, np.ndarray]:
        grid = np.asarray(grid, dtype=float)
        idx = np.searchsorted(self.times, grid, side="right") - 1
        E = np.where(idx >= 0, self.E[np.maximum(idx, 0)] if len(self.E) else 0, self.init[0])
        I = np.where(idx >= 0, self.I[np.maximum(idx, 0)] if len(self.I) else 0, self.init[1])
        return E.astype(int), I.astype(int)

    def susceptible_on_grid(self, grid) -> np.ndarray:
        if self.S is None:
            raise ValueError("trajectory does not track susceptibles")
        grid = np.asarray(grid, dtype=float)
        idx = np.searchsorted(self.times, grid, side="right") - 1
        s0 = self.N - self.init[0] - self.init[1]
        return np.where(idx >= 0, self.S[np.maximum(idx, 0)] if len(self.S) else s0, s0).astype(int)

    def mark_counts(self) -> dict:
        return {name: int(np.sum(self.marks == code)) for code, name in MARK_NAMES.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "E", "I", "mark"])
        writer.writerow([repr(0.0), self.init[0], self.init[1], "initial"])
        for t, e, i, m in zip(self.times, self.E, self.I, self.marks):
            writer.writerow([repr(float(t)), int(e), int(i), MARK_NAMES[int(m)]])
        return buf.getvalue()


@dataclass(frozen=True)
class InfectionHistory:
    """Per-individual records; ``nan`` marks events that did not happen.

    Index cases have ``infector == -1`` and no infection time.
    """

    infector: np.ndarray
    t_infect: np.ndarray
    t_onset: np.ndarray
    t_removal: np.ndarray
    t_sample: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.t_sample is None:
            object.__setattr__(self, "t_sample", np.full(len(self.infector), np.nan))

    def __len__(self):
        return len(self.infector)

    def infectious_at(self, t: float) -> np.ndarray:
        removal = np.where(np.isnan(self.t_removal), np.inf, self.t_removal)
        return np.flatnonzero((self.t_onset <= t) & (removal > t))

    def with_samples(self, ids, times) -> "InfectionHistory":
        t_sample = np.full(len(self), np.nan)
        t_sample[np.asarray(ids, dtype=int)] = times
        return InfectionHistory(self.infector, self.t_infect, self.t_onset, self.t_removal, t_sample)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "infector", "t_infect", "t_onset", "t_removal", "t_sample"])

        def fmt(x):
            return "" if np.isnan(x) else repr(float(x))

        for i in range(len(self)):
            par = int(self.infector[i])
            writer.writerow([
                i, "" if par < 0 else par, fmt(self.t_infect[i]), fmt(self.t_onset[i]),
                fmt(self.t_removal[i]), fmt(self.t_sample[i]),
            ])
        return buf.getvalue()


class _Pool:
    """Unordered set of ids with O(1) insert, removal and uniform draws."""

    def __init__(self, ids=()):
        self.items = list(ids)
        self.where = {x: i for i, x in enumerate(self.items)}

    def __len__(self):
        return len(self.items)

    def add(self, x):
        self.where[x] = len(self.items)
        self.items.append(x)

    def remove(self, x):
        i = self.where.pop(x)
        last = self.items.pop()
        if i < len(self.items):
            self.items[i] = last
            self.where[last] = i

    def draw(self, rng) -> int:
        return self.items[int(rng.integers(len(self.items)))]


def _simulate(rate_fn: PiecewiseConstant, gamma, nu, init_E, init_I, t_end, rng, N=None, track=True):
    """Event-driven simulation; ``N is None`` gives the EI birth rate
    ``rate * I``, otherwise the SEIR infection rate ``rate * S * I / N``."""
    E, I = int(init_E), int(init_I)
    S = None if N is None else int(N) - E - I
    n0 = E + I
    infector = [-1] * n0
    t_inf = [math.nan] * n0
    t_on = [math.nan] * init_E + [0.0] * init_I
    t_rem = [math.nan] * n0
    pool_E = _Pool(range(init_E)) if track else None
    pool_I = _Pool(range(init_E, n0)) if track else None
    times, marks, Es, Is, Ss = [], [], [], [], []
    for a, b, rate in rate_fn.segments(0.0, t_end):
        t = a
        while True:
            birth = rate * I if S is None else rate * S * I / N
            mig = gamma * E
            death = nu * I
            total = birth + mig + death
            if total <= 0.0:
                break
            t += rng.exponential(1.0 / total)
            if t >= b:
                break
            x = rng.random() * total
            if x < birth:
                E += 1
                if S is not None:
                    S -= 1
                mark = BIRTH
                if track:
                    new = len(infector)
                    infector.append(pool_I.draw(rng))
                    t_inf.append(t)
                    t_on.append(math.nan)
                    t_rem.append(math.nan)
                    pool_E.add(new)
            elif x < birth + mig:
                E -= 1
                I += 1
                mark = MIGRATION
                if track:
                    who = pool_E.draw(rng)
                    pool_E.remove(who)
                    pool_I.add(who)
                    t_on[who] = t
            else:
                I -= 1
                mark = DEATH
                if track:
                    who = pool_I.draw(rng)
                    pool_I.remove(who)
                    t_rem[who] = t
            times.append(t)
            marks.append(mark)
            Es.append(E)
            Is.append(I)
            if S is not None:
                Ss.append(S)
    traj = PopulationTrajectory(
        times=np.asarray(times, dtype=float),
        E=np.asarray(Es, dtype=np.int64),
        I=np.asarray(Is, dtype=np.int64),
        marks=np.asarray(marks, dtype=np.int8),
        init=(int(init_E), int(init_I)),
        t_end=float(t_end),
        S=None if S is None else np.asarray(Ss, dtype=np.int64),
        N=None if N is None else int(N),
    )
    history = None
    if track:
        history = InfectionHistory(
            infector=np.asarray(infector, dtype=np.int64),
            t_infect=np.asarray(t_inf, dtype=float),
            t_onset=np.asarray(t_on, dtype=float),
            t_removal=np.asarray(t_rem, dtype=float),
        )
    return traj, history


def _check_init(init):
    E0, I0 = (int(x) for x in init)
    if E0 < 0 or I0 < 0:
        raise ValueError("initial counts must be nonnegative")
    return E0, I0


def simulate_ei(params: EIParams, init: tuple, t_end: float, seed=None) -> PopulationTrajectory:
    """Exact realization of the EI jump process on ``[0, t_end)``.

    Exponential waiting times are drawn with the rates of the current
    constant-``alpha`` piece; a draw that overshoots the end of the piece is
    discarded and redrawn from the boundary, which is exact by memorylessness.
    """
    E0, I0 = _check_init(init)
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    traj, _ = _simulate(params.alpha, params.gamma, params.nu, E0, I0, t_end, as_generator(seed), track=False)
    return traj


def simulate_ei_with_history(params: EIParams, init: tuple, t_end: float, seed=None):
    """As :func:`simulate_ei`, also recording each individual's infector."""
    E0, I0 = _check_init(init)
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    return _simulate(params.alpha, params.gamma, params.nu, E0, I0, t_end, as_generator(seed), track=True)


def simulate_seir_agents(
    N: int,
    beta: PiecewiseConstant,
    gamma: float,
    nu: float,
    init_infectious: int,
    t_end: float,
    seed=None,
) -> tuple[PopulationTrajectory, InfectionHistory]:
    """Agent-based SEIR epidemic in a closed population.

    Each new infection picks its source uniformly among the currently
    infectious individuals.  The returned trajectory carries ``S`` so that
    the effective reproduction number ``beta / nu * S / N`` can be computed.
    """
    if N < 1 or not 1 <= init_infectious <= N:
        raise ValueError("need 1 <= init_infectious <= N")
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    return _simulate(beta, gamma, nu, 0, int(init_infectious), t_end, as_generator(seed), N=int(N), track=True)


@dataclass(frozen=True)
class SamplingScheme:
    """``isochronous``: all samples at ``t_last``.  ``heterochronous``: a
    fraction of the samples at uniform times in ``[t_last - window, t_last)``,
    one individual per time, the rest at ``t_last``."""

    kind: str = "isochronous"
    window: float = 35.0
    het_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in ("isochronous", "heterochronous"):
            raise ValueError(f"unknown sampling scheme {self.kind!r}")
        if self.window < 0 or not 0.0 <= self.het_fraction <= 1.0:
            raise ValueError("invalid heterochronous settings")


@dataclass(frozen=True)
class SampledGenealogy:
    tree: SampledTree
    sample_ids: np.ndarray
    sample_times: np.ndarray
    root_time: float
    coalescence_times: np.ndarray


def _blocked(history: InfectionHistory, x: int, sampled_time: dict) -> bool:
    """True if ``x`` descends from a sampled individual through a
    transmission that happened after that individual was sampled."""
    prev = x
    h = int(history.infector[x])
    while h >= 0:
        tau = sampled_time.get(h)
        if tau is not None and history.t_infect[prev] > tau:
            return True
        prev = h
        h = int(history.infector[h])
    return False


def draw_samples(history: InfectionHistory, scheme: SamplingScheme, n_samples: int, t_last: float, seed=None):
    """Choose sampled individuals and their sampling times.

    Returns ``(ids, times)`` sorted by time.  Sampling proceeds in
    chronological order; at each time the draw is uniform over infectious
    individuals that are not yet sampled and not blocked by an earlier sample.
    """
    rng = as_generator(seed)
    if n_samples < 2:
        raise ValueError("need at least two samples")
    n_het = int(round(scheme.het_fraction * n_samples)) if scheme.kind == "heterochronous" else 0
    het_times = np.sort(t_last - scheme.window + scheme.window * rng.random(n_het))
    sampled: dict = {}
    ids, times = [], []

    def pick(t, count):
        pool = [int(x) for x in history.infectious_at(t) if int(x) not in sampled]
        chosen = []
        while len(chosen) < count:
            if not pool:
                raise SimulationRejected(f"fewer than {count} eligible infectious individuals at time {t:.3f}")
            j = int(rng.integers(len(pool)))
            cand = pool[j]
            pool[j] = pool[-1]
            pool.pop()
            if not _blocked(history, cand, sampled):
                chosen.append(cand)
        return chosen

    for t in het_times:
        (c,) = pick(float(t), 1)
        sampled[c] = float(t)
        ids.append(c)
        times.append(float(t))
    for c in pick(float(t_last), n_samples - n_het):
        sampled[c] = float(t_last)
        ids.append(c)
        times.append(float(t_last))
    return np.asarray(ids, dtype=np.int64), np.asarray(times, dtype=float)


def build_tree(history: InfectionHistory, sample_ids: Sequence[int], sample_times: Sequence[float]) -> SampledGenealogy:
    """Reconstruct the genealogy of sampled individuals from infector links.

    Tracing backwards, a lineage stays in its host until the host's infection
    time and then moves to the infector.  When a lineage enters a host that
    already carries a lineage, the two coalesce at that transmission time.
    """
    sample_ids = [int(x) for x in sample_ids]
    sample_times = [float(x) for x in sample_times]
    if len(set(sample_ids)) != len(sample_ids):
        raise ValueError("an individual can be sampled only once")
    parent: list[int] = []
    fwd: list[float] = []
    labels: list[str] = []
    incoming: dict = {}
    for sid, tau in zip(sample_ids, sample_times):
        node = len(parent)
        parent.append(-1)
        fwd.append(tau)
        labels.append(f"id{sid}_t{tau:.6f}")
        incoming.setdefault(sid, []).append((tau, node, True))
    # every host on a sampled chain, processed from the latest infection back
    hosts = set()
    for sid in sample_ids:
        h = sid
        while h >= 0 and h not in hosts:
            hosts.add(h)
            h = int(history.infector[h])
    t_inf = history.t_infect
    order = sorted(hosts, key=lambda h: -np.inf if np.isnan(t_inf[h]) else t_inf[h], reverse=True)
    coal_times = []
    tops = []
    for h in order:
        arrivals = sorted(incoming.get(h, ()), key=lambda x: x[0], reverse=True)
        if not arrivals:
            continue
        current = arrivals[0][1]
        for time, node, own_sample in arrivals[1:]:
            if own_sample:
                raise ValueError(f"individual {h} was sampled after transmitting to a sampled descendant")
            merged = len(parent)
            parent.append(-1)
            fwd.append(time)
            labels.append("")
            parent[current] = merged
            parent[node] = merged
            coal_times.append(time)
            current = merged
        up = int(history.infector[h])
        if up >= 0:
            incoming.setdefault(up, []).append((float(t_inf[h]), current, False))
        else:
            tops.append(current)
    if len(tops) != 1:
        raise SimulationRejected("sampled individuals descend from more than one index case")
    fwd_arr = np.asarray(fwd)
    t_max = max(sample_times)
    tree = tree_from_times(parent, t_max - fwd_arr, labels)
    return SampledGenealogy(
        tree=tree,
        sample_ids=np.asarray(sample_ids, dtype=np.int64),
        sample_times=np.asarray(sample_times, dtype=float),
        root_time=float(fwd_arr[tops[0]]),
        coalescence_times=np.sort(np.asarray(coal_times, dtype=float)),
    )


def sample_and_build_tree(
    history: InfectionHistory,
    scheme: SamplingScheme,
    n_samples: int,
    seed=None,
    t_last: Optional[float] = None,
) -> SampledGenealogy:
    """Sample infectious individuals and return their genealogy.

    ``t_last`` defaults to the last recorded event time of the history.
    Raises :class:`SimulationRejected` when too few eligible individuals exist.
    """
    if t_last is None:
        finite = np.concatenate([history.t_infect, history.t_onset, history.t_removal])
        t_last = float(np.nanmax(finite))
    ids, times = draw_samples(history, scheme, n_samples, t_last, seed)
    return build_tree(history, ids, times)
