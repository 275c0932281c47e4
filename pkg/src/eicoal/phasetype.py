"""Phase-type likelihood of a genealogy under the EI coalescent.

Between consecutive timeline events the ``k`` sampled lineages move between
the E and I compartments and eventually two of them coalesce.  For fixed
population sizes this is a continuous-time Markov chain with ``k + 1``
transient states (the number of lineages in E, ``0..k``) and ``k - 1``
absorbing states (the E count after a coalescence), so the time to the next
coalescence is phase-type distributed.

State labels used throughout this module are the number of lineages in E.
Row/column 0 of every matrix is the "all lineages in I" state.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .genealogy import COALESCENT, GRID, SAMPLING, EventTimeline
from .ode import DeterministicTrajectory

DENSE_MAX_DIM = 64


class RateDomainError(ValueError):
    """Population sizes for which the coalescent rates are undefined."""


class LikelihoodUsageError(ValueError):
    """Inputs with inconsistent shapes or out-of-range state labels."""


class KrylovConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntervalContext:
    """Everything that is constant over one inter-event interval."""

    E: float
    I: float
    alpha: float
    gamma: float
    nu: float
    k: int
    dt: float
    end_type: int = COALESCENT

    def __post_init__(self):
        if self.dt < 0:
            raise LikelihoodUsageError(f"negative interval length {self.dt}")
        if self.k < 1:
            raise LikelihoodUsageError("an interval needs at least one lineage")


@dataclass(frozen=True)
class RateMatrixSet:
    """Transient block ``A`` and absorption block ``L`` for ``k`` lineages.

    ``Q`` is the full ``2k x 2k`` generator ``[[A, L], [0, 0]]``.
    """

    k: int
    A: np.ndarray
    L: np.ndarray

    @property
    def Q(self) -> np.ndarray:
        k = self.k
        Q = np.zeros((2 * k, 2 * k))
        Q[: k + 1, : k + 1] = self.A
        Q[: k + 1, k + 1 :] = self.L
        return Q

    def to_csv(self, which: str = "A") -> str:
        M = {"A": self.A, "L": self.L, "Q": self.Q}[which]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in M:
            writer.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


def _rate_vectors(ctx: IntervalContext):
    if not (ctx.E > 0 and ctx.I > 0):
        raise RateDomainError(f"population sizes must be positive (E={ctx.E}, I={ctx.I})")
    return _kernels.interval_rates(int(ctx.k), float(ctx.E), float(ctx.I), float(ctx.alpha), float(ctx.gamma))


def build_rate_matrices(ctx: IntervalContext) -> RateMatrixSet:
    """Assemble ``A`` and ``L`` from the backwards-time lineage rates.

    With ``j`` lineages in E and ``k - j`` in I:

    * an I lineage is traced back into E at rate ``(k-j) gamma (E+1) / I``;
    * an E lineage whose infector is unsampled moves to I at rate
      ``j (I - (k-j)) alpha / E`` (zero unless ``I > k - j``);
    * an E lineage coalesces with an I lineage at rate ``j (k-j) alpha / E``,
      leaving ``j - 1`` lineages in E among ``k - 1``.
    """
    low, diag, up, absorb = _rate_vectors(ctx)
    k = ctx.k
    A = _kernels._dense_generator(low, diag, up)
    L = np.zeros((k + 1, max(k - 1, 0)))
    for j in range(1, k):
        L[j, j - 1] = absorb[j]
    return RateMatrixSet(k, A, L)


def matexp_dense(M: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with Pade approximants."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise LikelihoodUsageError("matexp_dense needs a square matrix")
    if not np.all(np.isfinite(M)):
        raise RateDomainError("matrix has non-finite entries")
    return _kernels.expm_pade(np.ascontiguousarray(M))


def matexp_action(
    M: np.ndarray,
    v: np.ndarray,
    t: float = 1.0,
    *,
    m: int = 30,
    tol: float = 1e-10,
    max_steps: int = 100000,
) -> np.ndarray:
    """``expm(M t) @ v`` from Arnoldi projections with adaptive time steps.

    Each step projects onto a Krylov space of dimension ``m`` and picks the
    step length from a local error estimate, shrinking it when the estimate
    exceeds ``tol``.
    """
    M = np.asarray(M, dtype=float)
    v = np.asarray(v, dtype=float)
    n = M.shape[0]
    if M.shape != (n, n) or v.shape != (n,):
        raise LikelihoodUsageError("dimension mismatch in matexp_action")
    if t < 0:
        raise LikelihoodUsageError("matexp_action needs t >= 0")
    beta = float(np.linalg.norm(v))
    if t == 0 or beta == 0.0 or n == 0:
        return v.copy()
    anorm = float(np.linalg.norm(M, np.inf))
    if anorm == 0.0:
        return v.copy()
    m = max(1, min(m, n))
    btol = 1e-14 * anorm
    gamma, delta = 0.9, 1.2
    rndoff = anorm * np.finfo(float).eps
    xm = 1.0 / m
    fact = ((m + 1) / math.e) ** (m + 1) * math.sqrt(2 * math.pi * (m + 1))
    t_new = (1.0 / anorm) * ((fact * tol) / (4.0 * beta * anorm)) ** xm
    t_new = _round_step(t_new)
    t_now = 0.0
    w = v.copy()
    steps = 0
    while t_now < t:
        steps += 1
        if steps > max_steps:
            raise KrylovConvergenceError("Krylov action exceeded the step budget")
        t_step = min(t - t_now, t_new)
        V = np.zeros((n, m + 1))
        H = np.zeros((m + 2, m + 2))
        V[:, 0] = w / beta
        breakdown = False
        mb = m
        for j in range(m):
            p = M @ V[:, j]
            for i in range(j + 1):
                H[i, j] = V[:, i] @ p
                p = p - H[i, j] * V[:, i]
            # one reorthogonalisation pass keeps V orthonormal for long runs
            for i in range(j + 1):
                c = V[:, i] @ p
                H[i, j] += c
                p = p - c * V[:, i]
            s = float(np.linalg.norm(p))
            if s < btol:
                breakdown = True
                mb = j + 1
                t_step = t - t_now
                break
            H[j + 1, j] = s
            V[:, j + 1] = p / s
        if not breakdown:
            H[m + 1, m] = 1.0
            avnorm = float(np.linalg.norm(M @ V[:, m]))
        for reject in range(11):
            if breakdown:
                F = matexp_dense(t_step * H[:mb, :mb])
                err_loc = btol
                break
            F = matexp_dense(t_step * H[: m + 2, : m + 2])
            phi1 = abs(beta * F[m, 0])
            phi2 = abs(beta * F[m + 1, 0] * avnorm)
            if phi1 > 10 * phi2:
                err_loc, xm = phi2, 1.0 / m
            elif phi1 > phi2:
                err_loc, xm = phi1 * phi2 / (phi1 - phi2), 1.0 / m
            else:
                err_loc, xm = phi1, 1.0 / max(m - 1, 1)
            if err_loc <= delta * t_step * tol:
                break
            if reject == 10:
                raise KrylovConvergenceError("requested Krylov tolerance not reachable")
            t_step = _round_step(gamma * t_step * (t_step * tol / err_loc) ** xm)
        mx = mb if breakdown else m + 1
        w = V[:, :mx] @ (beta * F[:mx, 0])
        beta = float(np.linalg.norm(w))
        t_now += t_step
        if beta == 0.0:
            return w
        err_loc = max(err_loc, rndoff)
        t_new = _round_step(gamma * t_step * (t_step * tol / err_loc) ** xm)
    return w


def _round_step(x: float) -> float:
    # two significant digits, rounded up, as in Expokit
    if not np.isfinite(x) or x <= 0:
        return x
    s = 10.0 ** (math.floor(math.log10(x)) - 1)
    return math.ceil(x / s) * s


def _row_of_expm(ctx: IntervalContext, s_prev: int, method: str) -> np.ndarray:
    """Row ``s_prev`` of ``expm(A dt)``."""
    n = ctx.k + 1
    if method == "auto":
        method = "dense" if n <= DENSE_MAX_DIM else "krylov"
    if method == "compiled":
        low, diag, up, _ = _rate_vectors(ctx)
        e = np.zeros(n)
        e[s_prev] = 1.0
        w, ls = _kernels.tridiag_action(e, low, diag, up, float(ctx.dt), False)
        return w * math.exp(ls) if ls > -np.inf else np.zeros(n)
    A = build_rate_matrices(ctx).A
    if method == "dense":
        return matexp_dense(A * ctx.dt)[s_prev]
    if method == "krylov":
        e = np.zeros(n)
        e[s_prev] = 1.0
        return np.maximum(matexp_action(A.T, e, ctx.dt), 0.0)
    raise LikelihoodUsageError(f"unknown method {method!r}")


def interval_likelihood(s_prev: int, s_next: int, ctx: IntervalContext, method: str = "auto") -> float:
    """Likelihood contribution of one interval.

    For a coalescent end this is the density ``e_{s_prev}' expm(A dt) l_{s_next}``
    where ``s_next`` is the E count after the coalescence; otherwise it is the
    transition probability ``[expm(A dt)]_{s_prev, s_next}``.  Impossible
    transitions give 0.
    """
    k = ctx.k
    if not 0 <= s_prev <= k:
        raise LikelihoodUsageError(f"state {s_prev} out of range for k={k}")
    if ctx.end_type == COALESCENT:
        if not 0 <= s_next <= k - 2:
            raise LikelihoodUsageError(f"absorbing state {s_next} out of range for k={k}")
    elif not 0 <= s_next <= k:
        raise LikelihoodUsageError(f"state {s_next} out of range for k={k}")
    row = _row_of_expm(ctx, s_prev, method)
    if ctx.end_type == COALESCENT:
        L = build_rate_matrices(ctx).L
        return float(max(row @ L[:, s_next], 0.0))
    return float(max(row[s_next], 0.0))


@dataclass(frozen=True)
class CoalescentRates:
    """Rates for the likelihood; ``alpha`` is a scalar or one value per interval."""

    gamma: float
    nu: float
    alpha: object


@dataclass(frozen=True)
class IntervalInputs:
    """Per-interval arrays for a timeline with ``N + 1`` points.

    Interval ``i`` runs from point ``i`` to point ``i + 1`` with ``k[i]``
    lineages, population sizes ``E[i]``, ``I[i]`` (the values at its older
    end) and birth rate ``alpha[i]``.
    """

    k: np.ndarray
    coal: np.ndarray
    dt: np.ndarray
    E: np.ndarray
    I: np.ndarray
    alpha: np.ndarray
    gamma: float
    nu: float

    @property
    def n_intervals(self) -> int:
        return len(self.dt)

    def context(self, i: int) -> IntervalContext:
        end = COALESCENT if self.coal[i] else SAMPLING
        return IntervalContext(
            float(self.E[i]), float(self.I[i]), float(self.alpha[i]), self.gamma, self.nu, int(self.k[i]),
            float(self.dt[i]), end,
        )


def bind_intervals(
    timeline: EventTimeline,
    gamma: float,
    nu: float,
    alpha,
    E_points: np.ndarray,
    I_points: np.ndarray,
) -> IntervalInputs:
    """Combine a timeline with population sizes given at its points."""
    n = len(timeline.times) - 1
    E_points = np.asarray(E_points, dtype=float)
    I_points = np.asarray(I_points, dtype=float)
    if E_points.shape != (n + 1,) or I_points.shape != (n + 1,):
        raise LikelihoodUsageError("population values must be given at every timeline point")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (n,)).copy()
    return IntervalInputs(
        k=np.ascontiguousarray(timeline.k[:-1], dtype=np.int64),
        coal=np.ascontiguousarray(timeline.types[1:] == COALESCENT),
        dt=np.diff(timeline.times),
        E=E_points[1:].copy(),
        I=I_points[1:].copy(),
        alpha=alpha,
        gamma=float(gamma),
        nu=float(nu),
    )


def trajectory_at_points(trajectory: DeterministicTrajectory, timeline: EventTimeline, tol: float = 1e-7):
    """Values of a forward-time trajectory at the timeline's (backward) points.

    The trajectory starts at the root (forward time 0) so timeline point
    ``t`` corresponds to forward time ``t_N - t``.
    """
    u = timeline.times[-1] - timeline.times
    idx = np.searchsorted(trajectory.times, u - tol)
    idx = np.minimum(idx, len(trajectory.times) - 1)
    if np.any(np.abs(trajectory.times[idx] - u) > tol):
        raise LikelihoodUsageError("trajectory grid does not contain every timeline point")
    return trajectory.E[idx], trajectory.I[idx]


def _inputs(timeline, params: CoalescentRates, trajectory) -> IntervalInputs:
    E, I = trajectory_at_points(trajectory, timeline)
    return bind_intervals(timeline, params.gamma, params.nu, params.alpha, E, I)


def states_valid(inputs: IntervalInputs, states: np.ndarray) -> bool:
    """Lineage counts fit inside the population at both ends of every interval."""
    return bool(_kernels.all_valid(inputs.k, inputs.coal, inputs.E, inputs.I, np.asarray(states, dtype=np.int64)))


def loglik_from_inputs(
    inputs: IntervalInputs, states: np.ndarray, *, method: str = "compiled", check_validity: bool = True
) -> float:
    states = np.ascontiguousarray(states, dtype=np.int64)
    if states.shape != (inputs.n_intervals + 1,):
        raise LikelihoodUsageError(
            f"expected {inputs.n_intervals + 1} state labels, got {states.shape[0] if states.ndim else 0}"
        )
    if check_validity and not states_valid(inputs, states):
        return -np.inf
    if method == "compiled":
        if np.any(inputs.E <= 0) or np.any(inputs.I <= 0):
            return -np.inf
        return float(
            _kernels.augmented_loglik(
                inputs.k, inputs.coal, inputs.dt, inputs.E, inputs.I, inputs.alpha, inputs.gamma, states
            )
        )
    total = 0.0
    for i in range(inputs.n_intervals):
        ctx = inputs.context(i)
        s0, s1 = int(states[i]), int(states[i + 1])
        if not 0 <= s0 <= ctx.k or s1 < 0 or s1 > (ctx.k - 2 if inputs.coal[i] else ctx.k):
            return -np.inf
        try:
            val = interval_likelihood(s0, s1, ctx, method)
        except RateDomainError:
            return -np.inf
        if val <= 0.0:
            return -np.inf
        total += math.log(val)
    return total


def augmented_loglik(
    timeline: EventTimeline,
    states: np.ndarray,
    params: CoalescentRates,
    trajectory: DeterministicTrajectory,
    *,
    method: str = "compiled",
    check_validity: bool = True,
) -> float:
    """Log likelihood of the timeline given a state label at every point.

    ``states[i]`` is the number of lineages in E just after point ``i``
    (``states[0] == 0``: every sample enters in I).  Returns ``-inf`` when a
    transition is impossible, the labels do not fit in the population, or a
    population size is not positive.
    """
    return loglik_from_inputs(_inputs(timeline, params, trajectory), states, method=method,
                              check_validity=check_validity)


def alternative_loglik(
    timeline: EventTimeline,
    event_states: np.ndarray,
    params: CoalescentRates,
    trajectory: DeterministicTrajectory,
    *,
    method: str = "compiled",
    check_validity: bool = True,
) -> float:
    """Log likelihood with the states at grid points summed out.

    ``event_states`` holds one label per non-grid point of ``timeline``.
    Across a grid point the transient block is simply multiplied through,
    ``expm(A_1 d_1) expm(A_2 d_2) ...``, before the final absorption column
    or transition entry is applied.
    """
    inputs = _inputs(timeline, params, trajectory)
    keep = np.ascontiguousarray(timeline.types != GRID)
    event_states = np.ascontiguousarray(event_states, dtype=np.int64)
    if event_states.shape != (int(keep.sum()),):
        raise LikelihoodUsageError("need one state label per non-grid timeline point")
    if np.any(inputs.E <= 0) or np.any(inputs.I <= 0):
        return -np.inf
    if check_validity:
        # check only the supplied labels, each against the interval that ends there
        idx = np.flatnonzero(keep)
        for pos in range(1, len(idx)):
            i = idx[pos] - 1
            k = int(inputs.k[i])
            s = int(event_states[pos])
            pre = s + 1 if inputs.coal[i] else s
            if pre > inputs.E[i] or k - pre > inputs.I[i]:
                return -np.inf
            prev = int(event_states[pos - 1])
            start = idx[pos - 1]
            if prev > inputs.E[start] or inputs.k[start] - prev > inputs.I[start]:
                return -np.inf
    if method == "compiled":
        return float(
            _kernels.alternative_loglik(
                inputs.k, inputs.coal, inputs.dt, inputs.E, inputs.I, inputs.alpha, inputs.gamma,
                event_states, keep,
            )
        )
    if method != "dense":
        raise LikelihoodUsageError("alternative_loglik supports the compiled and dense routes")
    total = 0.0
    pos = 0
    v = np.zeros(int(inputs.k[0]) + 1)
    v[event_states[0]] = 1.0
    for i in range(inputs.n_intervals):
        ctx = inputs.context(i)
        rm = build_rate_matrices(ctx)
        w = v @ matexp_dense(rm.A * ctx.dt)
        if keep[i + 1]:
            pos += 1
            s1 = int(event_states[pos])
            if inputs.coal[i]:
                if not 0 <= s1 <= ctx.k - 2:
                    return -np.inf
                val = float(w @ rm.L[:, s1])
                v = np.zeros(ctx.k)
            else:
                if not 0 <= s1 <= ctx.k:
                    return -np.inf
                val = float(w[s1])
                size = int(inputs.k[i + 1]) + 1 if i + 1 < inputs.n_intervals else ctx.k + 1
                v = np.zeros(size)
            if val <= 0.0:
                return -np.inf
            total += math.log(val)
            v[s1] = 1.0
        else:
            v = w
    return total


def block_transition(rm: RateMatrixSet, dt: float) -> np.ndarray:
    """``expm(Q dt)`` assembled from its blocks.

    The upper-right block is ``A^{-1} (expm(A dt) - I) L``, computed here as
    ``int_0^dt expm(A s) ds @ L`` via the augmented-matrix identity so that a
    singular ``A`` needs no special case.
    """
    k = rm.k
    n = k + 1
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = rm.A * dt
    aug[:n, n:] = np.eye(n) * dt
    big = matexp_dense(aug)
    eA = big[:n, :n]
    integral = big[:n, n:]
    out = np.zeros((2 * k, 2 * k))
    out[:n, :n] = eA
    out[:n, n:] = integral @ rm.L
    out[n:, n:] = np.eye(k - 1)
    return out
