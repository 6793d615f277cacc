import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st
from scipy import integrate, stats

from ccrstyles import (ModelConfig, NonFinitePayoff, SimSettings, SimulationError, TimeGrid,
                       generate_path, mc_estimate, mc_estimate_crn, simulate)
from ccrstyles.sim import _Partial, _pairwise, _stats, iter_batches


def test_no_hazard_means_no_default(semiannual):
    b = simulate(ModelConfig(lambda_B=0.0, lambda_C=0.0), semiannual, 0, 5000, 7)
    assert np.all(np.isinf(b.tau_B)) and np.all(np.isinf(b.tau_C))


def test_zero_volatility_path_is_deterministic():
    c = ModelConfig(sigma=0.0, m0=3.0, amortizing=True)
    grid = TimeGrid.uniform(5.0, 10)
    b = simulate(c, grid, 0, 1000, 3)
    np.testing.assert_allclose(b.m_grid, np.broadcast_to(3.0 * c.amortization(grid.times), b.m_grid.shape),
                               rtol=0, atol=1e-15)
    hit = np.isfinite(b.tau_C)
    np.testing.assert_allclose(b.m_tau_C[hit], 3.0 * c.amortization(b.tau_C[hit]), atol=1e-15)


def test_default_fraction_matches_exponential_cdf():
    c = ModelConfig()
    grid = TimeGrid.uniform(c.T, 1)
    n = 1_000_000
    frac = np.mean(np.concatenate([np.isfinite(b.tau_C) for b in
                                   iter_batches(c, grid, SimSettings(n_paths=n, batch_size=250_000))]))
    p = 1.0 - math.exp(-0.1)
    assert p == pytest.approx(0.09516, abs=1e-5)
    assert abs(frac - p) < 3.0 * math.sqrt(p * (1 - p) / n)


@pytest.mark.parametrize("rho", [0.0, 0.6])
def test_copula_marginal_ks(rho):
    c = ModelConfig(lambda_C=0.3, rho_BC=rho, rho_MC=-0.3)
    b = simulate(c, TimeGrid.uniform(c.T, 1), 0, 100_000, 11)
    # tau > T is censored; compare u = F(tau) on [0, F(T)] by uniformising on the full axis
    u = np.where(np.isfinite(b.tau_C), 1.0 - np.exp(-c.lambda_C * b.tau_C), 1.0)
    cut = 1.0 - math.exp(-c.lambda_C * c.T)
    observed = u[u < cut] / cut
    assert stats.kstest(observed, "uniform").pvalue > 0.01
    frac = np.mean(u < cut)
    assert abs(frac - cut) < 3 * math.sqrt(cut * (1 - cut) / u.size)


def test_constant_payoff(semiannual, small):
    s = mc_estimate(lambda b: np.ones(b.size), ModelConfig(), semiannual, small)
    assert (s.mean, s.std_error, s.n) == (1.0, 0.0, small.n_paths)


def test_discount_payoff_exact(semiannual, small):
    s = mc_estimate(lambda b: b.discount(np.full(b.size, 5.0)), ModelConfig(), semiannual, small)
    assert s.mean == math.exp(-0.15) and s.std_error == 0.0


def test_bachelier_positive_part():
    c = ModelConfig(T=4.0)
    expected = 0.1 * math.sqrt(4.0 / (2 * math.pi))
    numeric, _ = integrate.quad(lambda z: max(0.2 * z, 0.0) * stats.norm.pdf(z), -10, 10, points=[0.0])
    assert numeric == pytest.approx(expected, rel=1e-10)
    assert expected == pytest.approx(0.07979, abs=1e-5)
    s = mc_estimate(lambda b: np.maximum(b.m_grid[:, -1], 0.0), c, TimeGrid.uniform(4.0, 4),
                    SimSettings(n_paths=200_000))
    assert abs(s.mean - expected) < 3 * s.std_error


def test_crn_counts(semiannual, small):
    f = lambda b: np.maximum(b.m_grid[:, -1], 0.0)
    res = mc_estimate_crn({"a": f, "b": f, "c": lambda b: f(b) + 1.0}, ModelConfig(), semiannual, small)
    assert res.pairs[("a", "b")].equal == small.n_paths
    assert res.violations("a", "c") == 0
    assert res.pairs[("a", "c")].less == small.n_paths


def test_non_finite_payoff_raises(semiannual, small):
    with pytest.raises(NonFinitePayoff):
        mc_estimate(lambda b: np.where(np.arange(b.size) == 3, np.nan, 0.0), ModelConfig(), semiannual, small)


def _payoff(b):
    return np.maximum(b.m_tau_C, 0.0) * b.discount(b.tau_C) + 0.1 * b.m_grid[:, 4]


@pytest.mark.parametrize("workers", [2, 8])
def test_worker_count_does_not_change_results(semiannual, workers):
    c = ModelConfig(rho_MC=0.3)
    base = SimSettings(n_paths=30_000, batch_size=4_000)
    one = mc_estimate(_payoff, c, semiannual, base)
    many = mc_estimate(_payoff, c, semiannual, base.replace(workers=workers))
    assert one == many


def test_paths_independent_of_batching(semiannual):
    c = ModelConfig(rho_BC=0.2)
    a = simulate(c, semiannual, 0, 1000, 99)
    b = simulate(c, semiannual, 400, 300, 99)
    for name in ("tau_B", "tau_C", "w_grid", "w_tau_B", "w_tau_C", "z_liq_C"):
        np.testing.assert_array_equal(getattr(a, name)[400:700], getattr(b, name))


def test_generate_path_matches_batch_twin(semiannual):
    c = ModelConfig(lambda_C=0.5, lambda_B=0.4)
    batch = simulate(c, semiannual, 0, 50, 5)
    for i in range(50):
        p = generate_path(c, semiannual, i, 5)
        q = batch.path(i)
        assert p.tau_B == q.tau_B and p.tau_C == q.tau_C
        np.testing.assert_array_equal(p.times, q.times)
        np.testing.assert_array_equal(p.m_values, q.m_values)
        assert p.m_B(0.0) == c.m0
        for t in p.times:
            assert p.m_B(t) + p.m_C(t) == 0.0
        if math.isfinite(p.tau_C):
            assert p.m_B(p.tau_C) == batch.m_tau_C[i]


def test_path_rejects_unsampled_time(semiannual):
    p = generate_path(ModelConfig(lambda_B=0, lambda_C=0), semiannual, 0, 1)
    with pytest.raises(KeyError):
        p.m_B(0.123)
    assert p.first_default == math.inf


def test_seed_changes_paths(semiannual):
    a = simulate(ModelConfig(), semiannual, 0, 100, 1)
    b = simulate(ModelConfig(), semiannual, 0, 100, 2)
    assert not np.array_equal(a.w_grid, b.w_grid)


def test_terminal_value_independent_of_grid():
    c = ModelConfig(lambda_C=0.3)
    coarse = simulate(c, TimeGrid.uniform(5.0, 1), 0, 2000, 4)
    fine = simulate(c, TimeGrid.uniform(5.0, 50), 0, 2000, 4)
    np.testing.assert_array_equal(coarse.w_grid[:, -1], fine.w_grid[:, -1])
    np.testing.assert_array_equal(coarse.tau_C, fine.tau_C)


def test_bridge_keeps_grid_law():
    # Refining the grid (and bridging default times into it) leaves the law at shared dates intact.
    c = ModelConfig(lambda_C=0.4, lambda_B=0.3)
    n = 100_000
    coarse = simulate(c, TimeGrid.uniform(5.0, 2), 0, n, 8)
    fine = simulate(c, TimeGrid.uniform(5.0, 10), 0, n, 8)
    w1 = coarse.w_grid[:, 1]
    w2 = fine.w_grid[:, 5]
    se_mean = math.sqrt(2.5 / n)
    assert abs(w1.mean()) < 3 * se_mean and abs(w2.mean()) < 3 * se_mean
    se_var = 2.5 * math.sqrt(2.0 / n)
    assert abs(w1.var() - 2.5) < 3 * se_var and abs(w2.var() - 2.5) < 3 * se_var
    # Brownian value at the default time has variance tau
    hit = np.isfinite(fine.tau_C)
    x = fine.w_tau_C[hit] / np.sqrt(fine.tau_C[hit])
    assert stats.kstest(x, "norm").pvalue > 0.01


def test_bridge_covariance_between_defaults():
    c = ModelConfig(lambda_C=0.6, lambda_B=0.6)
    b = simulate(c, TimeGrid.uniform(5.0, 2), 0, 200_000, 21)
    both = np.isfinite(b.tau_B) & np.isfinite(b.tau_C)
    s, t = np.minimum(b.tau_B, b.tau_C)[both], np.maximum(b.tau_B, b.tau_C)[both]
    ws = np.where(b.tau_B < b.tau_C, b.w_tau_B, b.w_tau_C)[both]
    wt = np.where(b.tau_B < b.tau_C, b.w_tau_C, b.w_tau_B)[both]
    # W_t - W_s is independent of W_s with variance t - s
    inc = (wt - ws) / np.sqrt(t - s)
    assert stats.kstest(inc, "norm").pvalue > 0.01
    assert abs(np.corrcoef(inc, ws / np.sqrt(s))[0, 1]) < 4 / math.sqrt(both.sum())


def test_simultaneous_defaults_rejected():
    c = ModelConfig(lambda_B=0.5, lambda_C=0.5, rho_BC=1.0)
    with pytest.raises(SimulationError):
        simulate(c, TimeGrid.uniform(5.0, 1), 0, 100, 1)


def test_antithetic_pairs_mirror(semiannual):
    b = simulate(ModelConfig(), semiannual, 0, 10, 3, antithetic=True)
    np.testing.assert_array_equal(b.w_grid[0::2], -b.w_grid[1::2])


def test_grid_must_match_maturity():
    with pytest.raises(Exception):
        simulate(ModelConfig(T=5.0), TimeGrid.uniform(4.0, 4), 0, 10, 1)


@hsettings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200), st.integers(1, 7))
def test_pairwise_merge_matches_direct(values, parts):
    arr = np.asarray(values)
    chunks = [c for c in np.array_split(arr, parts) if c.size]
    merged = _pairwise([_Partial.of(c) for c in chunks])
    s = _stats(merged, arr.size)
    assert merged.n == arr.size
    assert s.mean == pytest.approx(arr.mean(), rel=1e-12, abs=1e-9)
    expected_se = arr.std(ddof=1) / math.sqrt(arr.size)
    assert s.std_error == pytest.approx(expected_se, rel=1e-8, abs=1e-9)


@pytest.mark.parametrize("kw,field", [({"n_paths": 0}, "n_paths"), ({"batch_size": 0}, "batch_size"),
                                      ({"workers": 0}, "workers"),
                                      ({"antithetic": True, "n_paths": 11}, "antithetic")])
def test_settings_validation(kw, field):
    with pytest.raises(Exception) as err:
        SimSettings(**kw)
    assert err.value.field == field
