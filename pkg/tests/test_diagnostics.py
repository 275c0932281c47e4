import numpy as np
import pytest

from eicoal.diagnostics import diagnose, ess, ess_bulk, ess_tail, rhat, split_chains, z_scale


def test_iid_normal_bulk_ess():
    x = np.random.default_rng(0).standard_normal(10000)
    assert 8000 <= ess_bulk(x) <= 12000
    assert 8000 <= ess_tail(x) <= 12000
    assert rhat(x) < 1.01


def test_ar1_ess_matches_theory():
    # AR(1) with coefficient phi has ESS ~ n (1 - phi) / (1 + phi)
    rng = np.random.default_rng(1)
    phi, n = 0.8, 40000
    x = np.empty(n)
    x[0] = rng.standard_normal()
    for t in range(1, n):
        x[t] = phi * x[t - 1] + np.sqrt(1 - phi**2) * rng.standard_normal()
    want = n * (1 - phi) / (1 + phi)
    assert 0.8 * want < ess(x) < 1.2 * want


def test_constant_chain_is_undefined():
    d = diagnose("c", np.full(500, 2.5))
    assert d.undefined and d.flagged and np.isnan(d.ess_bulk)


def test_shifted_halves_have_large_rhat():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.standard_normal(1000), 3.0 + rng.standard_normal(1000)])
    assert rhat(x) > 1.1
    assert diagnose("x", x).flagged


def test_needs_enough_draws():
    with pytest.raises(ValueError):
        diagnose("short", np.arange(50.0))


def test_split_and_rank_helpers():
    s = split_chains(np.arange(11.0))
    assert s.shape == (2, 5) and s[1, 0] == 6.0
    z = z_scale(np.array([[3.0, 1.0, 2.0]]))
    assert z[0, 1] < z[0, 2] < z[0, 0] and np.isclose(z[0, 2], 0.0)


def test_multiple_chains_accepted():
    rng = np.random.default_rng(3)
    d = diagnose("m", rng.standard_normal((4, 1000)))
    assert not d.flagged and d.rhat < 1.01 and d.ess_bulk > 3000
