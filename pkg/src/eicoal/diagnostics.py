"""Rank-normalized convergence diagnostics for MCMC output.

Split R-hat, bulk ESS and tail ESS following the rank-normalization
approach: draws are split in half, replaced by normal scores of their pooled
ranks, and the classical statistics are computed on the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

ESS_THRESHOLD = 100.0


@dataclass(frozen=True)
class ParameterDiagnostics:
    name: str
    ess_bulk: float
    ess_tail: float
    rhat: float
    undefined: bool

    @property
    def flagged(self) -> bool:
        return self.undefined or min(self.ess_bulk, self.ess_tail) < ESS_THRESHOLD


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    return x


def split_chains(x) -> np.ndarray:
    x = _as_chains(x)
    half = x.shape[1] // 2
    # drop the middle draw of odd-length chains
    return np.vstack([x[:, :half], x[:, x.shape[1] - half:]])


def z_scale(x) -> np.ndarray:
    """Normal scores of pooled average ranks (fractional offset 3/8)."""
    x = _as_chains(x)
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = len(x)
    y = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(y, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov


def ess(x) -> float:
    """Effective sample size from Geyer's initial monotone sequence."""
    x = _as_chains(x)
    m, n = x.shape
    if n < 4:
        return np.nan
    acov = np.array([_autocov(c) for c in x])
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)
    if not var_plus > 0:
        return np.nan
    rho = np.zeros(n)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 2 and rho_even + rho_odd >= 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        rho[t + 1] = rho_even
        if rho_even + rho_odd >= 0:
            rho[t + 2] = rho_odd
        t += 2
    max_t = t
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = (rho[t - 1] + rho[t]) / 2.0
        t += 2
    tau = -1.0 + 2.0 * rho[:max_t].sum() + rho[max_t + 1 : max_t + 2].sum()
    return float(m * n / tau)


def ess_bulk(x) -> float:
    return ess(z_scale(split_chains(x)))


def ess_tail(x, prob: float = 0.05) -> float:
    """Smaller of the ESS of the lower and upper quantile indicators."""
    s = split_chains(x)
    lo = np.quantile(s, prob)
    hi = np.quantile(s, 1.0 - prob)
    e_lo = ess(split_chains(x) <= lo)
    e_hi = ess(split_chains(x) <= hi)
    return float(min(e_lo, e_hi))


def _rhat(x: np.ndarray) -> float:
    m, n = x.shape
    between = n * np.var(x.mean(axis=1), ddof=1)
    within = np.mean(np.var(x, axis=1, ddof=1))
    return float(np.sqrt(((n - 1) / n * within + between / n) / within))


def rhat(x) -> float:
    """Maximum of the rank-normalized and folded split R-hat."""
    s = split_chains(x)
    bulk = _rhat(z_scale(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat(z_scale(folded))
    return max(bulk, tail)


def diagnose(name: str, draws) -> ParameterDiagnostics:
    x = _as_chains(draws)
    if x.shape[1] < 100:
        raise ValueError("diagnostics need at least 100 draws")
    if not np.all(np.isfinite(x)) or np.ptp(x) == 0.0:
        return ParameterDiagnostics(name, np.nan, np.nan, np.nan, True)
    return ParameterDiagnostics(name, ess_bulk(x), ess_tail(x), rhat(x), False)


def diagnostics(samples) -> list[ParameterDiagnostics]:
    """Diagnostics for every scalar parameter of a :class:`PosteriorSamples`."""
    return [diagnose(name, samples.draws[:, j]) for j, name in enumerate(samples.param_names)]
