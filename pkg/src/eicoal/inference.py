"""Posterior sampling of EI coalescent parameters and latent lineage states.

The sampler alternates two moves:

* an elliptical slice move on the log-scale parameters, with the population
  sizes obtained by solving the deterministic EI system for each proposal;
* a joint draw of the latent lineage labels (number of lineages in E at every
  timeline point) given the parameters.

Parameters live on a mean-zero log scale.  The vector is

``[log gamma, log nu, log E(0), log I(0), log R_0, z_1, ..., z_{M-1}, log sigma] - mu``

where ``R_0`` is the reproduction number of the segment containing the tree
root and ``log R_j = log R_{j-1} + sigma z_j`` walks forward in time over
segments of fixed length.  In these coordinates the prior is a diagonal
Gaussian, which is what the elliptical slice move requires.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .genealogy import COALESCENT, EventTimeline, insert_grid
from .ode import DeterministicTrajectory, propagate
from .phasetype import CoalescentRates, IntervalInputs

POPULATION_CAP = 8.0e9


class InferenceError(RuntimeError):
    pass


class InitializationError(InferenceError):
    pass


class InvariantError(InferenceError):
    pass


@dataclass(frozen=True)
class LogNormalPrior:
    """Log-normal prior given by the mean and standard deviation of the log."""

    loc: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("log-normal scale must be positive")

    @classmethod
    def from_median(cls, median: float, scale: float) -> "LogNormalPrior":
        return cls(math.log(median), scale)

    def logpdf_log(self, x):
        """Normal log density of ``x = log(value)``."""
        z = (np.asarray(x, dtype=float) - self.loc) / self.scale
        return -0.5 * z * z - math.log(self.scale) - 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorConfig:
    gamma: LogNormalPrior
    nu: LogNormalPrior
    E0: LogNormalPrior
    I0: LogNormalPrior
    R0: LogNormalPrior
    sigma: LogNormalPrior
    changepoint_interval: float = 7.0

    def __post_init__(self):
        if not self.changepoint_interval > 0:
            raise ValueError("changepoint interval must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        names = ("gamma", "nu", "E0", "I0", "R0", "sigma")
        missing = [n for n in names if n not in d]
        if missing:
            raise ValueError(f"prior is missing {', '.join(missing)}")
        parts = {}
        for n in names:
            spec = d[n]
            if "median" in spec:
                parts[n] = LogNormalPrior.from_median(float(spec["median"]), float(spec["scale"]))
            else:
                parts[n] = LogNormalPrior(float(spec["loc"]), float(spec["scale"]))
        return cls(**parts, changepoint_interval=float(d.get("changepoint_interval", 7.0)))


def _simulation_prior(r0_median: float) -> PriorConfig:
    ln = LogNormalPrior.from_median
    return PriorConfig(
        gamma=ln(1 / 4, 0.25),
        nu=ln(1 / 7, 0.25),
        E0=ln(1.1, 0.05),
        I0=ln(1.1, 0.05),
        R0=ln(r0_median, 0.2),
        sigma=ln(0.2, 0.1),
    )


PRESETS = {
    "fixed": _simulation_prior(2.0),
    "control": _simulation_prior(2.0),
    "increase": _simulation_prior(1.2),
    "ebola": PriorConfig(
        gamma=LogNormalPrior.from_median(1 / 7, 0.45),
        nu=LogNormalPrior.from_median(1 / 7, 0.3),
        E0=LogNormalPrior.from_median(1.1, 0.05),
        I0=LogNormalPrior.from_median(1.1, 0.05),
        R0=LogNormalPrior.from_median(0.7, 0.5),
        sigma=LogNormalPrior.from_median(0.05, 0.2),
    ),
}


class ModelLayout:
    """Fixed bookkeeping linking a timeline to the parameter vector.

    Parameters
    ----------
    timeline : EventTimeline
        Sampling and coalescent events (grid events are added here).
    prior : PriorConfig
    output_step : float
        Spacing of the forward-time output grid, starting at the root.
    """

    def __init__(self, timeline: EventTimeline, prior: PriorConfig, output_step: float = 0.5):
        if timeline.n_coalescent < 1:
            raise ValueError("inference needs at least one coalescent event")
        width = prior.changepoint_interval
        self.prior = prior
        self.base_timeline = timeline.without_grid()
        self.timeline = insert_grid(self.base_timeline, width)
        tl = self.timeline
        self.t_root = float(tl.times[-1])
        self.n_seg = max(1, int(math.ceil(self.t_root / width - 1e-12)))
        self.n_params = self.n_seg + 5
        mids = 0.5 * (tl.times[1:] + tl.times[:-1])
        self.interval_seg = self.segment_of(mids)
        self.kprev = np.ascontiguousarray(tl.k[:-1], dtype=np.int64)
        self.coal = np.ascontiguousarray(tl.types[1:] == COALESCENT)
        self.dt = np.ascontiguousarray(np.diff(tl.times))
        # forward time runs from the root (u = 0) to the latest sample
        self.u_points = self.t_root - tl.times[::-1]
        self.fwd_dts = np.diff(self.u_points)
        n_out = int(math.floor(self.t_root / output_step + 1e-9))
        self.output_grid = output_step * np.arange(n_out + 1)
        self.output_seg = self.segment_of(self.t_root - self.output_grid, carry_forward=True)
        self.mu, self.sd = self._prior_moments()

    def segment_of(self, t_backward, carry_forward: bool = False) -> np.ndarray:
        """Index into ``R`` (0 = root segment) for backward times.

        With ``carry_forward`` a time on a changepoint takes the segment
        that starts there in forward time.
        """
        t = np.asarray(t_backward, dtype=float)
        if carry_forward:
            t = t - 1e-9
        j = np.floor(t / self.prior.changepoint_interval).astype(np.int64)
        return np.clip(self.n_seg - 1 - j, 0, self.n_seg - 1)

    @property
    def param_names(self) -> list[str]:
        return ["gamma", "nu", "E0", "I0", "sigma"] + [f"R_{j}" for j in range(self.n_seg)]

    def _prior_moments(self):
        p = self.prior
        mu = np.zeros(self.n_params)
        sd = np.ones(self.n_params)
        for pos, lp in enumerate((p.gamma, p.nu, p.E0, p.I0, p.R0)):
            mu[pos], sd[pos] = lp.loc, lp.scale
        mu[-1], sd[-1] = p.sigma.loc, p.sigma.scale
        return mu, sd

    def unpack(self, q: np.ndarray):
        """Natural-scale ``(gamma, nu, E0, I0, R, sigma)`` for a mean-zero vector."""
        x = np.asarray(q, dtype=float) + self.mu
        sigma = math.exp(x[-1])
        logR = x[4] + sigma * np.concatenate([[0.0], np.cumsum(x[5:-1])])
        return math.exp(x[0]), math.exp(x[1]), math.exp(x[2]), math.exp(x[3]), np.exp(logR), sigma

    def log_R(self, q: np.ndarray) -> np.ndarray:
        x = np.asarray(q, dtype=float) + self.mu
        return x[4] + math.exp(x[-1]) * np.concatenate([[0.0], np.cumsum(x[5:-1])])

    def solve(self, q: np.ndarray) -> DeterministicTrajectory:
        """ODE values at every timeline point, in forward time from the root."""
        gamma, nu, E0, I0, R, _ = self.unpack(q)
        alpha = (R[self.interval_seg] * nu)[::-1]
        E, I = propagate(gamma, nu, alpha, self.fwd_dts, E0, I0)
        return DeterministicTrajectory(self.u_points, E, I)

    def solve_output(self, q: np.ndarray):
        """ODE values on the output grid."""
        gamma, nu, E0, I0, R, _ = self.unpack(q)
        width = self.prior.changepoint_interval
        cps = self.t_root - width * np.arange(1, self.n_seg)
        grid = np.union1d(self.output_grid, cps[cps > 0])
        seg = self.segment_of(self.t_root - 0.5 * (grid[1:] + grid[:-1]))
        E, I = propagate(gamma, nu, R[seg] * nu, np.diff(grid), E0, I0)
        idx = np.searchsorted(grid, self.output_grid)
        return E[idx], I[idx]

    def inputs(self, q: np.ndarray, trajectory: DeterministicTrajectory) -> IntervalInputs:
        gamma, nu, _, _, R, _ = self.unpack(q)
        return IntervalInputs(
            k=self.kprev,
            coal=self.coal,
            dt=self.dt,
            E=np.ascontiguousarray(trajectory.E[::-1][1:]),
            I=np.ascontiguousarray(trajectory.I[::-1][1:]),
            alpha=np.ascontiguousarray(R[self.interval_seg] * nu),
            gamma=gamma,
            nu=nu,
        )

    def rates(self, q: np.ndarray) -> CoalescentRates:
        gamma, nu, _, _, R, _ = self.unpack(q)
        return CoalescentRates(gamma, nu, R[self.interval_seg] * nu)


def log_prior_conditional(log_theta, log_R, log_sigma: float, prior: PriorConfig) -> float:
    """Prior log density in natural log coordinates.

    ``log_theta`` holds ``log gamma, log nu, log E(0), log I(0)``.  The first
    ``log R`` is drawn from its own prior and each later one is Gaussian
    around its predecessor with standard deviation ``sigma``.
    """
    log_theta = np.asarray(log_theta, dtype=float)
    log_R = np.asarray(log_R, dtype=float)
    total = 0.0
    for lp, x in zip((prior.gamma, prior.nu, prior.E0, prior.I0), log_theta):
        total += float(lp.logpdf_log(x))
    total += float(prior.R0.logpdf_log(log_R[0]))
    total += float(prior.sigma.logpdf_log(log_sigma))
    sigma = math.exp(log_sigma)
    for j in range(1, len(log_R)):
        total += float(LogNormalPrior(log_R[j - 1], sigma).logpdf_log(log_R[j]))
    return total


def log_prior(q: np.ndarray, layout: ModelLayout) -> float:
    """Prior log density of the mean-zero vector (independent Gaussians).

    Equals :func:`log_prior_conditional` plus ``(M - 1) log sigma``, the
    Jacobian of the map from the random-walk increments to ``log R``.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (layout.n_params,):
        raise ValueError(f"parameter vector must have length {layout.n_params}")
    z = q / layout.sd
    return float(np.sum(-0.5 * z * z - np.log(layout.sd)) - 0.5 * len(q) * math.log(2.0 * math.pi))


def prior_draw(layout: ModelLayout, rng: np.random.Generator) -> np.ndarray:
    return layout.sd * rng.standard_normal(layout.n_params)


def elliptical_slice(
    q: np.ndarray,
    loglik: float,
    loglik_fn: Callable[[np.ndarray], float],
    prior_sd: np.ndarray,
    rng: np.random.Generator,
    *,
    max_shrinks: int = 1000,
    log_threshold: Optional[float] = None,
):
    """One elliptical slice move for a ``N(0, diag(prior_sd**2))`` prior.

    ``loglik_fn`` returns ``-inf`` for proposals violating a hard
    constraint, so they are treated like points below the slice.

    Returns
    -------
    q_new, loglik_new, n_evaluations, converged
        When the bracket has shrunk ``max_shrinks`` times without acceptance
        the current point is returned with ``converged=False``.
    """
    psi = prior_sd * rng.standard_normal(len(q))
    if log_threshold is None:
        log_threshold = loglik + math.log(rng.random())
    theta = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = theta - 2.0 * math.pi, theta
    for n in range(1, max_shrinks + 1):
        prop = q * math.cos(theta) + psi * math.sin(theta)
        ll = loglik_fn(prop)
        if ll > log_threshold:
            return prop, ll, n, True
        if theta < 0.0:
            lo = theta
        else:
            hi = theta
        theta = rng.uniform(lo, hi)
    return q, loglik, max_shrinks, False


@dataclass
class ChainState:
    """Current point of a chain together with cached derived quantities."""

    q: np.ndarray
    states: np.ndarray
    trajectory: DeterministicTrajectory
    loglik: float
    logprior: float


def _constrained_loglik(layout: ModelLayout, q: np.ndarray, states: np.ndarray):
    """Log likelihood and trajectory, ``-inf`` when the cap or validity fails."""
    traj = layout.solve(q)
    if not np.all(np.isfinite(traj.E)) or np.max(traj.E + traj.I) > POPULATION_CAP:
        return -np.inf, traj
    inp = layout.inputs(q, traj)
    if np.any(inp.E <= 0) or np.any(inp.I <= 0):
        return -np.inf, traj
    if not _kernels.all_valid(inp.k, inp.coal, inp.E, inp.I, states):
        return -np.inf, traj
    ll = _kernels.augmented_loglik(inp.k, inp.coal, inp.dt, inp.E, inp.I, inp.alpha, inp.gamma, states)
    return float(ll), traj


def chain_loglik(layout: ModelLayout, q: np.ndarray, states: np.ndarray) -> float:
    """Augmented log likelihood including the validity and population-cap checks."""
    return _constrained_loglik(layout, q, np.ascontiguousarray(states, dtype=np.int64))[0]


def ess_step(
    state: ChainState,
    layout: ModelLayout,
    seed=None,
    *,
    max_shrinks: int = 1000,
    loglik_override: Optional[Callable[[np.ndarray], float]] = None,
    log_threshold: Optional[float] = None,
):
    """Elliptical slice update of the parameters with the latent labels fixed.

    ``loglik_override`` replaces the whole constrained likelihood (used to
    check the move against known targets).  Returns ``(new_state, n_evals,
    converged)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if loglik_override is None:
        if not math.isfinite(state.loglik):
            raise InvariantError("current state violates the validity or population constraints")
        cache = {}

        def fn(q):
            ll, traj = _constrained_loglik(layout, q, state.states)
            cache[q.tobytes()] = traj
            return ll
    else:
        cache = None
        fn = loglik_override
    q, ll, n, ok = elliptical_slice(
        state.q, state.loglik, fn, layout.sd, rng, max_shrinks=max_shrinks, log_threshold=log_threshold
    )
    if q is state.q:
        return state, n, ok
    traj = cache[q.tobytes()] if cache is not None else state.trajectory
    return ChainState(q, state.states, traj, ll, log_prior(q, layout)), n, ok


LATENT_METHODS = ("exact", "sequential")


def _draw_labels(inp: IntervalInputs, rng: np.random.Generator, method: str):
    out = np.zeros(inp.n_intervals + 1, dtype=np.int64)
    u = rng.random(inp.n_intervals)
    if method == "exact":
        fail = _kernels.sample_states_ffbs(inp.k, inp.coal, inp.dt, inp.E, inp.I, inp.alpha, inp.gamma, u, out)
    elif method == "sequential":
        fail = _kernels.sample_states_sequential(
            inp.k, inp.coal, inp.dt, inp.E, inp.I, inp.alpha, inp.gamma, u, out
        )
    else:
        raise ValueError(f"unknown latent sampler {method!r}; choose from {LATENT_METHODS}")
    return out, int(fail)


class LatentDeadEnd(InferenceError):
    def __init__(self, interval: int):
        super().__init__(f"no feasible lineage labels at interval {interval}")
        self.interval = interval


def sample_latent_states_from_inputs(inputs: IntervalInputs, seed=None, method: str = "exact") -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if np.any(inputs.E <= 0) or np.any(inputs.I <= 0):
        raise LatentDeadEnd(0)
    out, fail = _draw_labels(inputs, rng, method)
    if fail >= 0:
        raise LatentDeadEnd(fail)
    return out


def sample_latent_states(
    timeline: EventTimeline,
    params: CoalescentRates,
    trajectory: DeterministicTrajectory,
    seed=None,
    method: str = "exact",
) -> np.ndarray:
    """Draw the number of lineages in E at every timeline point.

    ``method="sequential"`` draws each label from its one-interval
    conditional given the previous label, restricted to labels that fit in
    the population.  ``method="exact"`` draws the whole path from its joint
    conditional given all intervals (backward filtering, forward sampling).
    The first label is always 0 since samples are taken from I.

    Raises
    ------
    LatentDeadEnd
        When no label path fits inside the population sizes.
    """
    from .phasetype import _inputs

    return sample_latent_states_from_inputs(_inputs(timeline, params, trajectory), seed, method)


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 100_000
    burn_in: Optional[int] = None
    thin: int = 10
    seed: Optional[int] = None
    latent_sampler: str = "exact"
    max_init_draws: int = 10_000
    max_shrinks: int = 1000
    output_step: float = 0.5
    check_every: int = 100
    latent_retries: int = 3

    def __post_init__(self):
        if self.iterations < 1 or self.thin < 1:
            raise ValueError("iterations and thinning must be positive")
        if not 0 <= self.effective_burn_in < self.iterations:
            raise ValueError("burn-in must be in [0, iterations)")
        if self.latent_sampler not in LATENT_METHODS:
            raise ValueError(f"latent_sampler must be one of {LATENT_METHODS}")

    @property
    def effective_burn_in(self) -> int:
        return self.iterations // 2 if self.burn_in is None else int(self.burn_in)

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.effective_burn_in) // self.thin


@dataclass(frozen=True)
class PosteriorSamples:
    """Thinned draws of one chain.

    ``draws`` has one row per draw and one column per entry of
    ``param_names``; ``R_u``, ``E_u`` and ``I_u`` hold the reproduction
    number and ODE sizes on ``output_grid`` (forward days since the root).
    """

    param_names: list
    draws: np.ndarray
    output_grid: np.ndarray
    R_u: np.ndarray
    E_u: np.ndarray
    I_u: np.ndarray
    stats: dict = field(default_factory=dict)
    seed: Optional[int] = None
    config: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def to_csv(self, which: str = "params") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if which == "params":
            header, mat = self.param_names, self.draws
        elif which in ("R", "E", "I"):
            header = [repr(float(t)) for t in self.output_grid]
            mat = {"R": self.R_u, "E": self.E_u, "I": self.I_u}[which]
        else:
            raise ValueError("which must be params, R, E or I")
        writer.writerow(header)
        for row in mat:
            writer.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    def metadata(self) -> dict:
        return {"seed": self.seed, "config": self.config, "stats": self.stats, "n_draws": self.n_draws}

    def metadata_json(self) -> str:
        return json.dumps(self.metadata(), indent=2, sort_keys=True)


def grid_draws_from_csv(text: str):
    """Read a grid CSV written by :meth:`PosteriorSamples.to_csv` (``R``, ``E`` or ``I``)."""
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2:
        raise ValueError("posterior grid file has no draws")
    grid = np.array([float(x) for x in rows[0]])
    draws = np.array([[float(x) for x in r] for r in rows[1:]])
    return grid, draws


def initial_state(layout: ModelLayout, rng: np.random.Generator, config: RunConfig) -> ChainState:
    """Draw parameters from the prior until a feasible labelling exists."""
    reasons = {"cap": 0, "labels": 0}
    for _ in range(config.max_init_draws):
        q = prior_draw(layout, rng)
        traj = layout.solve(q)
        if not np.all(np.isfinite(traj.E)) or np.max(traj.E + traj.I) > POPULATION_CAP:
            reasons["cap"] += 1
            continue
        inp = layout.inputs(q, traj)
        try:
            states = sample_latent_states_from_inputs(inp, rng, config.latent_sampler)
        except LatentDeadEnd:
            reasons["labels"] += 1
            continue
        ll, _ = _constrained_loglik(layout, q, states)
        if math.isfinite(ll):
            return ChainState(q, states, traj, ll, log_prior(q, layout))
        reasons["labels"] += 1
    raise InitializationError(
        f"no valid initial state in {config.max_init_draws} prior draws "
        f"(population cap exceeded {reasons['cap']} times, infeasible labels {reasons['labels']} times)"
    )


def run_mcmc(timeline: EventTimeline, prior: PriorConfig, config: RunConfig) -> PosteriorSamples:
    """Metropolis-within-Gibbs sampler for one chain.

    Each iteration performs one elliptical slice move on the parameters and
    then redraws the latent labels.  Iterations after burn-in are kept every
    ``thin`` steps.
    """
    layout = ModelLayout(timeline, prior, config.output_step)
    rng = np.random.default_rng(config.seed)
    state = initial_state(layout, rng, config)

    n_draws = config.n_draws
    draws = np.empty((n_draws, layout.n_params))
    R_u = np.empty((n_draws, len(layout.output_grid)))
    E_u = np.empty_like(R_u)
    I_u = np.empty_like(R_u)
    evals = 0
    cap_hits = 0
    latent_failures = 0
    max_cache_error = 0.0
    burn = config.effective_burn_in
    row = 0
    for it in range(1, config.iterations + 1):
        state, n, ok = ess_step(state, layout, rng, max_shrinks=config.max_shrinks)
        evals += n
        cap_hits += not ok
        inp = layout.inputs(state.q, state.trajectory)
        for _ in range(config.latent_retries):
            try:
                states = sample_latent_states_from_inputs(inp, rng, config.latent_sampler)
            except LatentDeadEnd:
                latent_failures += 1
                continue
            state.states = states
            state.loglik = float(
                _kernels.augmented_loglik(inp.k, inp.coal, inp.dt, inp.E, inp.I, inp.alpha, inp.gamma, states)
            )
            break
        if it % config.check_every == 0:
            fresh = chain_loglik(layout, state.q, state.states)
            err = abs(fresh - state.loglik)
            max_cache_error = max(max_cache_error, err)
            if not math.isfinite(fresh) or err > 1e-8 * max(1.0, abs(fresh)):
                raise InvariantError(f"cached log likelihood drifted at iteration {it}")
        if it > burn and (it - burn) % config.thin == 0 and row < n_draws:
            gamma, nu, E0, I0, R, sigma = layout.unpack(state.q)
            draws[row] = np.concatenate([[gamma, nu, E0, I0, sigma], R])
            R_u[row] = R[layout.output_seg]
            E_u[row], I_u[row] = layout.solve_output(state.q)
            row += 1

    stats = {
        "mean_evaluations_per_move": evals / config.iterations,
        "shrink_cap_hits": cap_hits,
        "latent_failures": latent_failures,
        "max_cached_loglik_error": max_cache_error,
        "final_loglik": state.loglik,
    }
    snapshot = {"run": asdict(config), "prior": prior.to_dict()}
    return PosteriorSamples(
        param_names=layout.param_names,
        draws=draws,
        output_grid=layout.output_grid.copy(),
        R_u=R_u,
        E_u=E_u,
        I_u=I_u,
        stats=stats,
        seed=config.seed,
        config=snapshot,
    )
