"""Closed-form solution of the deterministic EI system.

    dE/du = alpha * I - gamma * E
    dI/du = gamma * E - nu * I

For constant coefficients the solution is ``expm(V * dt) @ (E0, I0)`` with
``V = [[-gamma, alpha], [gamma, -nu]]``.  With ``d = gamma - nu`` and
``B = sqrt(d**2 + 4 * alpha * gamma)`` the eigenvalues are
``(-(gamma + nu) +/- B) / 2`` and every entry of the propagator is a
nonnegative combination of the two exponentials, which is how it is
evaluated here (no subtractive cancellation, including near ``B = 0``).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

DEGENERATE_B = 1e-12


class ODEDomainError(ValueError):
    pass


class GridConfigurationError(ValueError):
    pass


def ei_propagator(gamma, nu, alpha, dt):
    """Entries ``(g1, g2, h1, h2)`` of ``expm(V * dt)``; broadcasts over arrays.

    ``E(dt) = g1 * E0 + g2 * I0`` and ``I(dt) = h1 * E0 + h2 * I0``.
    """
    gamma, nu, alpha, dt = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (gamma, nu, alpha, dt)))
    d = gamma - nu
    B = np.sqrt(d * d + 4.0 * alpha * gamma)
    mid = -0.5 * (gamma + nu)
    slow = np.exp((mid - 0.5 * B) * dt)
    fast = np.exp((mid + 0.5 * B) * dt)

    degenerate = B < DEGENERATE_B
    Bs = np.where(degenerate, 1.0, B)
    # (B - d) and (B + d), one of which may cancel; use B^2 - d^2 = 4 alpha gamma
    four_ag = 4.0 * alpha * gamma
    b_minus_d = np.where(d > 0, four_ag / np.where(B + d > 0, B + d, 1.0), B - d)
    b_plus_d = np.where(d < 0, four_ag / np.where(B - d > 0, B - d, 1.0), B + d)
    # (fast - slow) / B without cancellation; tends to dt * fast as B -> 0
    spread = -fast * np.expm1(-B * dt) / Bs

    g1 = (fast * b_minus_d + slow * b_plus_d) / (2.0 * Bs)
    h2 = (fast * b_plus_d + slow * b_minus_d) / (2.0 * Bs)
    g2 = alpha * spread
    h1 = gamma * spread

    if np.any(degenerate):
        # confluent limit: expm(V t) = e^{mid t} (I + t (V - mid I))
        base = np.exp(mid * dt)
        g1 = np.where(degenerate, base * (1.0 - 0.5 * d * dt), g1)
        h2 = np.where(degenerate, base * (1.0 + 0.5 * d * dt), h2)
        g2 = np.where(degenerate, alpha * dt * base, g2)
        h1 = np.where(degenerate, gamma * dt * base, h1)
    # make a zero step the identity to the last bit
    still = dt == 0.0
    if np.any(still):
        g1, h2 = np.where(still, 1.0, g1), np.where(still, 1.0, h2)
        g2, h1 = np.where(still, 0.0, g2), np.where(still, 0.0, h1)
    return g1, g2, h1, h2


def ei_ode_step(E0: float, I0: float, gamma: float, nu: float, alpha: float, dt: float) -> tuple[float, float]:
    """Advance ``(E0, I0)`` by ``dt`` days with constant rates."""
    if min(E0, I0, alpha, dt) < 0 or gamma <= 0 or nu <= 0:
        raise ODEDomainError(
            f"invalid ODE inputs E0={E0}, I0={I0}, gamma={gamma}, nu={nu}, alpha={alpha}, dt={dt}"
        )
    if dt == 0:
        return float(E0), float(I0)
    g1, g2, h1, h2 = (float(x) for x in ei_propagator(gamma, nu, alpha, dt))
    return g1 * E0 + g2 * I0, h1 * E0 + h2 * I0


@dataclass(frozen=True)
class DeterministicTrajectory:
    """ODE values at grid times (forward days), piecewise constant between them."""

    times: np.ndarray
    E: np.ndarray
    I: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "E", "I"])
        for row in zip(self.times, self.E, self.I):
            writer.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


def solve_on_grid(
    gamma: float,
    nu: float,
    R: np.ndarray,
    changepoints: np.ndarray,
    init: tuple[float, float],
    grid: np.ndarray,
    tol: float = 1e-9,
) -> DeterministicTrajectory:
    """Solve the EI system with a piecewise-constant reproduction number.

    ``R[j]`` applies between ``changepoints[j-1]`` and ``changepoints[j]``
    (forward time, ``changepoints`` sorted, ``len(R) == len(changepoints) + 1``)
    and ``alpha = R * nu``.  ``grid`` must contain every changepoint that lies
    inside its range.
    """
    grid = np.asarray(grid, dtype=float)
    changepoints = np.asarray(changepoints, dtype=float)
    R = np.asarray(R, dtype=float)
    if len(R) != len(changepoints) + 1:
        raise GridConfigurationError("need one more R value than changepoints")
    if np.any(np.diff(grid) < 0):
        raise GridConfigurationError("grid must be sorted")
    inside = changepoints[(changepoints > grid[0] + tol) & (changepoints < grid[-1] - tol)]
    if len(inside):
        dist = np.min(np.abs(inside[:, None] - grid[None, :]), axis=1)
        if np.any(dist > tol):
            missing = inside[dist > tol][0]
            raise GridConfigurationError(f"grid omits changepoint {missing}")
    E0, I0 = init
    if min(E0, I0) < 0 or gamma <= 0 or nu <= 0 or np.any(R < 0):
        raise ODEDomainError("invalid parameters for the EI system")
    mids = 0.5 * (grid[1:] + grid[:-1])
    alpha = R[np.searchsorted(changepoints, mids, side="right")] * nu
    E, I = propagate(gamma, nu, alpha, np.diff(grid), E0, I0)
    return DeterministicTrajectory(grid, E, I)


def propagate(gamma, nu, alpha, dts, E0, I0):
    """Apply successive constant-rate steps; returns values at all ``len(dts)+1`` points."""
    g1, g2, h1, h2 = ei_propagator(gamma, nu, alpha, dts)
    n = len(dts)
    E = np.empty(n + 1)
    I = np.empty(n + 1)
    e, i = float(E0), float(I0)
    E[0], I[0] = e, i
    g1, g2, h1, h2 = g1.tolist(), g2.tolist(), h1.tolist(), h2.tolist()
    for j in range(n):
        e, i = g1[j] * e + g2[j] * i, h1[j] * e + h2[j] * i
        E[j + 1] = e
        I[j + 1] = i
    return E, I
