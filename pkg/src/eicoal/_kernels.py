"""Compiled inner loops for the phase-type likelihood.

States for ``k`` lineages are indexed by the number of lineages in E
(``j = 0..k``, ``n_I = k - j``).  The transient generator is tridiagonal:
``up[j]`` moves to ``j+1`` (an I lineage traced back into E), ``low[j]`` to
``j-1`` (coalescent migration) and ``absorb[j]`` is the coalescence rate into
the absorbing state ``j-1`` of the ``k-1`` system.
"""

import math

import numpy as np
from numba import njit

# Poisson-weighted series are evaluated in chunks of at most this mean.
_CHUNK = 50.0
_TAIL = 1e-17
# beyond this many expected jumps the dense Pade route is cheaper
_DENSE_SWITCH = 2.0e4

_B13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
    129060195264000.0, 10559470521600.0, 670442572800.0, 33522128640.0, 1323241920.0,
    40840800.0, 960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


@njit(cache=True)
def _pade_low(A, b):
    n = A.shape[0]
    ident = np.eye(n)
    A2 = A @ A
    U = b[1] * ident
    V = b[0] * ident
    P = ident.copy()
    m = len(b) - 1
    for i in range(1, m // 2 + 1):
        P = P @ A2
        U += b[2 * i + 1] * P
        V += b[2 * i] * P
    U = A @ U
    return np.ascontiguousarray(np.linalg.solve(V - U, V + U))


@njit(cache=True)
def _pade13(A, b):
    n = A.shape[0]
    ident = np.eye(n)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A2 @ A4
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    return np.ascontiguousarray(np.linalg.solve(V - U, V + U))


@njit(cache=True)
def expm_pade(A):
    """Scaling and squaring with degree 3..13 diagonal Pade approximants."""
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    norm1 = 0.0
    for j in range(n):
        col = 0.0
        for i in range(n):
            col += abs(A[i, j])
        if col > norm1:
            norm1 = col
    if norm1 == 0.0:
        return np.eye(n)
    if norm1 <= 1.495585217958292e-2:
        return _pade_low(A, np.array((120.0, 60.0, 12.0, 1.0)))
    if norm1 <= 2.539398330063230e-1:
        return _pade_low(A, np.array((30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0)))
    if norm1 <= 9.504178996162932e-1:
        return _pade_low(A, np.array((17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0)))
    if norm1 <= 2.097847961257068e0:
        return _pade_low(A, np.array((17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
                                      2162160.0, 110880.0, 3960.0, 90.0, 1.0)))
    s = 0
    if norm1 > _THETA13:
        s = int(math.ceil(math.log2(norm1 / _THETA13)))
    X = _pade13(A / (2.0 ** s), _B13)
    for _ in range(s):
        X = X @ X
    return X


@njit(cache=True)
def interval_rates(k, E, I, alpha, gamma):
    low = np.zeros(k + 1)
    up = np.zeros(k + 1)
    absorb = np.zeros(k + 1)
    diag = np.zeros(k + 1)
    mig = gamma * (E + 1.0) / I
    coal = alpha / E
    for j in range(k + 1):
        n_i = k - j
        up[j] = n_i * mig
        if j > 0 and I > n_i:
            low[j] = j * (I - n_i) * coal
        absorb[j] = j * n_i * coal
        diag[j] = -(up[j] + low[j] + absorb[j])
    return low, diag, up, absorb


@njit(cache=True)
def _dense_generator(low, diag, up):
    n = diag.shape[0]
    A = np.zeros((n, n))
    for j in range(n):
        A[j, j] = diag[j]
        if j + 1 < n:
            A[j, j + 1] = up[j]
        if j > 0:
            A[j, j - 1] = low[j]
    return A


@njit(cache=True)
def _step(x, pd, pu, pl, transpose):
    # one multiplication by P = I + A / lam
    n = x.shape[0]
    out = np.empty(n)
    if not transpose:
        for j in range(n):
            acc = x[j] * pd[j]
            if j > 0:
                acc += x[j - 1] * pu[j - 1]
            if j + 1 < n:
                acc += x[j + 1] * pl[j + 1]
            out[j] = acc
    else:
        for j in range(n):
            acc = x[j] * pd[j]
            if j + 1 < n:
                acc += x[j + 1] * pu[j]
            if j > 0:
                acc += x[j - 1] * pl[j]
            out[j] = acc
    return out


@njit(cache=True)
def tridiag_action(v, low, diag, up, t, transpose):
    """``v @ expm(A t)`` (or ``expm(A t) @ v`` when ``transpose``) for a
    tridiagonal generator.

    Returns ``(w, log_scale)`` with the result equal to ``w * exp(log_scale)``
    and ``max(w) == 1`` (or ``w == 0``).  The series is in powers of the
    nonnegative matrix ``I + A / lam`` so every term is nonnegative.
    """
    n = v.shape[0]
    lam = 0.0
    for j in range(n):
        if -diag[j] > lam:
            lam = -diag[j]
    w = v.copy()
    if t <= 0.0 or lam == 0.0:
        m = w.max()
        if m > 0:
            return w / m, math.log(m)
        return w, -np.inf
    total = lam * t
    if total > _DENSE_SWITCH:
        M = np.ascontiguousarray(expm_pade(_dense_generator(low, diag, up) * t))
        if transpose:
            w = M @ v
        else:
            w = v @ M
        for j in range(n):
            if w[j] < 0.0:
                w[j] = 0.0
        m = w.max()
        if m > 0:
            return w / m, math.log(m)
        return w, -np.inf
    pd = 1.0 + diag / lam
    pu = up / lam
    pl = low / lam
    for j in range(n):
        if pd[j] < 0.0:
            pd[j] = 0.0
    nchunks = int(math.ceil(total / _CHUNK))
    x = total / nchunks
    log_scale = 0.0
    for _ in range(nchunks):
        p = math.exp(-x)
        term = w.copy()
        acc = p * term
        i = 0
        while True:
            i += 1
            term = _step(term, pd, pu, pl, transpose)
            p *= x / i
            acc += p * term
            if i + 1 > x and p * x / (i + 1 - x) < _TAIL:
                break
        m = acc.max()
        if not m > 0.0:
            return acc, -np.inf
        w = acc / m
        log_scale += math.log(m)
    return w, log_scale


@njit(cache=True)
def valid_interval(k, s_start, s_end, coal_end, E, I):
    """Lineage counts at both ends of an interval must fit in the population."""
    if s_start < 0 or s_start > k:
        return False
    if s_start > E or k - s_start > I:
        return False
    if coal_end:
        j = s_end + 1
        if s_end < 0 or j > k - 1:
            return False
    else:
        j = s_end
        if j < 0 or j > k:
            return False
    return j <= E and k - j <= I


@njit(cache=True)
def all_valid(kprev, coal, E, I, states):
    for i in range(kprev.shape[0]):
        if not valid_interval(kprev[i], states[i], states[i + 1], coal[i], E[i], I[i]):
            return False
    return True


@njit(cache=True)
def _interval_value(k, s0, s1, coal_end, E, I, alpha, gamma, dt):
    if E <= 0.0 or I <= 0.0:
        return -np.inf
    low, diag, up, absorb = interval_rates(k, E, I, alpha, gamma)
    v = np.zeros(k + 1)
    v[s0] = 1.0
    w, ls = tridiag_action(v, low, diag, up, dt, False)
    if coal_end:
        if s1 + 1 > k or s1 < 0:
            return -np.inf
        val = w[s1 + 1] * absorb[s1 + 1]
    else:
        if s1 > k or s1 < 0:
            return -np.inf
        val = w[s1]
    if not val > 0.0:
        return -np.inf
    return math.log(val) + ls


@njit(cache=True)
def augmented_loglik(kprev, coal, dt, E, I, alpha, gamma, states):
    total = 0.0
    for i in range(kprev.shape[0]):
        total += _interval_value(kprev[i], states[i], states[i + 1], coal[i], E[i], I[i], alpha[i], gamma, dt[i])
        if total == -np.inf:
            return total
    return total


@njit(cache=True)
def alternative_loglik(kprev, coal, dt, E, I, alpha, gamma, states, keep):
    """Likelihood with grid-point states summed out.

    ``keep[i]`` marks timeline points whose state is given; ``states`` holds
    entries only for those points (the first point is always kept).
    """
    total = 0.0
    pos = 0
    v = np.zeros(kprev[0] + 1)
    v[states[0]] = 1.0
    for i in range(kprev.shape[0]):
        k = kprev[i]
        if v.shape[0] != k + 1:
            return np.nan
        if E[i] <= 0.0 or I[i] <= 0.0:
            return -np.inf
        low, diag, up, absorb = interval_rates(k, E[i], I[i], alpha[i], gamma)
        w, ls = tridiag_action(v, low, diag, up, dt[i], False)
        if ls == -np.inf:
            return -np.inf
        total += ls
        if keep[i + 1]:
            pos += 1
            s1 = states[pos]
            if coal[i]:
                if s1 < 0 or s1 + 1 > k:
                    return -np.inf
                val = w[s1 + 1] * absorb[s1 + 1]
                v = np.zeros(k)
            else:
                if s1 < 0 or s1 > k:
                    return -np.inf
                val = w[s1]
                v = np.zeros(kprev[i + 1] + 1) if i + 1 < kprev.shape[0] else np.zeros(k + 1)
            if not val > 0.0:
                return -np.inf
            total += math.log(val)
            v[s1] = 1.0
        else:
            # grid points carry no lineage change
            v = w
    return total


@njit(cache=True)
def _masked_targets(i, k, coal_end, n_events, kprev, E, I):
    """Which end states of interval ``i`` keep the next interval valid."""
    size = k - 1 if coal_end else k + 1
    ok = np.zeros(max(size, 0), dtype=np.bool_)
    for s in range(size):
        pre = s + 1 if coal_end else s
        if pre > E[i] or k - pre > I[i]:
            continue
        if i + 1 < n_events:
            k_next = kprev[i + 1]
            if s > E[i + 1] or k_next - s > I[i + 1]:
                continue
        ok[s] = True
    return ok


@njit(cache=True)
def _end_weights(w, absorb, k, coal_end):
    if coal_end:
        out = np.empty(k - 1)
        for s in range(k - 1):
            out[s] = w[s + 1] * absorb[s + 1]
        return out
    return w.copy()


@njit(cache=True)
def sample_states_sequential(kprev, coal, dt, E, I, alpha, gamma, uniforms, out):
    """Draw each state from its one-interval conditional given the previous one.

    Returns the index of the first interval with no feasible continuation,
    or -1 on success.
    """
    n = kprev.shape[0]
    out[0] = 0
    for i in range(n):
        k = kprev[i]
        low, diag, up, absorb = interval_rates(k, E[i], I[i], alpha[i], gamma)
        v = np.zeros(k + 1)
        v[out[i]] = 1.0
        w, _ = tridiag_action(v, low, diag, up, dt[i], False)
        weights = _end_weights(w, absorb, k, coal[i])
        ok = _masked_targets(i, k, coal[i], n, kprev, E, I)
        total = 0.0
        for s in range(weights.shape[0]):
            if not ok[s] or not weights[s] > 0.0:
                weights[s] = 0.0
            total += weights[s]
        if not total > 0.0:
            return i
        target = uniforms[i] * total
        acc = 0.0
        choice = -1
        for s in range(weights.shape[0]):
            if weights[s] > 0.0:
                choice = s
                acc += weights[s]
                if acc > target:
                    break
        out[i + 1] = choice
    return -1


@njit(cache=True)
def sample_states_ffbs(kprev, coal, dt, E, I, alpha, gamma, uniforms, out):
    """Exact joint draw: backward filtering then forward sampling."""
    n = kprev.shape[0]
    # beta[i] is the (scaled) likelihood of data after point i given the state at i
    betas = []
    last_k = kprev[n - 1] - 1 if coal[n - 1] else kprev[n - 1]
    b = np.ones(last_k + 1)
    betas.append(b)
    for i in range(n - 1, -1, -1):
        k = kprev[i]
        low, diag, up, absorb = interval_rates(k, E[i], I[i], alpha[i], gamma)
        ok = _masked_targets(i, k, coal[i], n, kprev, E, I)
        nxt = betas[-1]
        x = np.zeros(k + 1)
        if coal[i]:
            for s in range(k - 1):
                if ok[s]:
                    x[s + 1] = absorb[s + 1] * nxt[s]
        else:
            for s in range(k + 1):
                if ok[s]:
                    x[s] = nxt[s]
        col, _ = tridiag_action(x, low, diag, up, dt[i], True)
        betas.append(col)
    # betas[-1] is for point 0, betas[0] for the last point
    if not betas[n][0] > 0.0:
        return 0
    out[0] = 0
    for i in range(n):
        k = kprev[i]
        low, diag, up, absorb = interval_rates(k, E[i], I[i], alpha[i], gamma)
        v = np.zeros(k + 1)
        v[out[i]] = 1.0
        w, _ = tridiag_action(v, low, diag, up, dt[i], False)
        weights = _end_weights(w, absorb, k, coal[i])
        ok = _masked_targets(i, k, coal[i], n, kprev, E, I)
        nxt = betas[n - 1 - i]
        total = 0.0
        for s in range(weights.shape[0]):
            if ok[s] and weights[s] > 0.0:
                weights[s] *= nxt[s]
            else:
                weights[s] = 0.0
            total += weights[s]
        if not total > 0.0:
            return i
        target = uniforms[i] * total
        acc = 0.0
        choice = -1
        for s in range(weights.shape[0]):
            if weights[s] > 0.0:
                choice = s
                acc += weights[s]
                if acc > target:
                    break
        out[i + 1] = choice
    return -1
