import math

import numpy as np
import pytest

from ccrstyles import (DegeneratePool, DomainError, LiquiditySpec, ModelConfig, NettingSet, PoolConfig,
                       SimSettings, TimeGrid, Trade, TrancheSpec, UnsupportedStyle, generate_path,
                       highfreq_premium, lender_fairness, netting_set_report, oracle, periodic_window_cva,
                       repo_carry_cost, simulate_pool, tranche_spread, tranche_spreads, ucva)
from ccrstyles.margin import (PoolPaths, discretization_tolerance, netting_set_exposure, pool_loss,
                              tranche_cut, tranche_loss, tranche_stack_consistency)

from conftest import REF_UCVA_BC, REF_UCVA_CB


def within_3se(stats, target, extra=0.0):
    return abs(stats.mean - target) <= 3.0 * stats.std_error + extra


# ---------------------------------------------------------------- high-frequency resets

def test_highfreq_zero_without_default(semiannual, small):
    hf = highfreq_premium(ModelConfig(lambda_C=0.0), semiannual, small)
    assert all(s.mean == 0.0 for s in hf.steps) and hf.total.mean == 0.0


def test_highfreq_zero_kappa_is_no_liquidity(ref, semiannual, small):
    a = highfreq_premium(ref, semiannual, small, liquidity=LiquiditySpec.none())
    b = highfreq_premium(ref, semiannual, small, liquidity=LiquiditySpec.constant_fraction(0.0))
    assert a.steps == b.steps and a.total == b.total


def test_highfreq_sum_is_the_unilateral_protection(ref, mc):
    daily = TimeGrid.uniform(ref.T, 5 * 252)
    hf = highfreq_premium(ref, daily, mc())
    assert len(hf.steps) == 5 * 252
    tol = discretization_tolerance(ref, daily, REF_UCVA_BC)
    assert within_3se(hf.total, REF_UCVA_BC, tol)
    assert math.isclose(sum(s.mean for s in hf.steps), hf.total.mean, rel_tol=1e-9)


def test_highfreq_side_d(ref, semiannual, mc):
    hf = highfreq_premium(ref, semiannual, mc(), side="D")
    assert within_3se(hf.total, REF_UCVA_CB)


def test_highfreq_rejects_antithetic(ref, semiannual):
    with pytest.raises(DomainError):
        highfreq_premium(ref, semiannual, SimSettings(n_paths=10, batch_size=10, antithetic=True))


def test_discretization_tolerance(ref):
    daily = TimeGrid.uniform(5.0, 1260)
    assert discretization_tolerance(ref, daily, 1.0) == pytest.approx(2 * (5 / 1260) * 0.05)


# ---------------------------------------------------------------- periodic resets

def test_window_of_zero_length(ref):
    assert periodic_window_cva(ref, (1.0, 1.0), 0.2) == 0.0


def test_window_with_certain_prior_assessor_default(ref):
    vals = [periodic_window_cva(ref.replace(lambda_B=lam), (0.0, 0.5), 0.0) for lam in (1e1, 1e2, 1e3)]
    assert vals[0] > vals[1] > vals[2]
    # at the money: (1-R) lam_C sigma / sqrt(2 pi) * int e^{-k t} sqrt(t) dt, and k is huge
    approx = 0.6 * 0.02 * 0.1 / math.sqrt(2 * math.pi) * math.gamma(1.5) / (1e3 + 0.05) ** 1.5
    assert vals[2] == pytest.approx(approx, rel=1e-9)
    assert vals[2] < 1e-5 * REF_UCVA_BC


def test_window_matches_truncated_oracle(ref):
    assert periodic_window_cva(ref, (0.0, 0.5), 0.0) == pytest.approx(
        oracle.window_cva_quadrature(ref, 0.0, 0.5, 0.0), rel=1e-10)


def test_tri_partite_b_leg_has_no_window(ref):
    v = periodic_window_cva(ref, (0.0, 0.5), 0.0, structure="tri", side="D")
    assert v == pytest.approx(REF_UCVA_CB, rel=1e-12)


def test_window_value_vectorised(ref):
    m = np.array([-0.2, 0.0, 0.2])
    v = periodic_window_cva(ref, (1.0, 1.5), m)
    assert v.shape == (3,) and np.all(np.diff(v) > 0)


def test_finite_haircut_with_proportional_cost_not_priced_semi_analytically(ref):
    with pytest.raises(DomainError):
        periodic_window_cva(ref, (0.0, 0.5), 0.0, liquidity=LiquiditySpec.constant_fraction(0.1, haircut=0.01))


def test_lender_fairness_without_default(semiannual, small):
    pnl = lender_fairness(ModelConfig(lambda_C=0.0), semiannual, small)
    assert all(s.mean == 0.0 and s.std_error == 0.0 for s in pnl)


@pytest.mark.parametrize("structure,side", [("quadri", "A"), ("quadri", "D"), ("tri", "A")])
def test_lender_breaks_even(ref, semiannual, mc, structure, side):
    pnl = lender_fairness(ref, semiannual, mc(), structure, side)
    assert len(pnl) == 10
    for s in pnl:
        assert within_3se(s, 0.0)


def test_double_premium_is_detected(ref, semiannual, small):
    fair = lender_fairness(ref, semiannual, small)
    double = lender_fairness(ref, semiannual, small, premium_scale=2.0)
    # P&L is linear in the premium: doubling it adds one fair premium to every window
    assert all(d.mean > f.mean + 3 * f.std_error for f, d in zip(fair, double))
    first = periodic_window_cva(ref, (0.0, 0.5), 0.0)
    assert double[0].mean - fair[0].mean == pytest.approx(first, rel=1e-12)


def test_lender_fairness_with_liquidity(ref, semiannual, mc):
    liq = LiquiditySpec.lognormal(math.log(0.01), 0.5)
    for s in lender_fairness(ref, semiannual, mc(), liquidity=liq):
        assert within_3se(s, 0.0)


def test_tri_partite_has_no_b_side_lender(ref, semiannual, small):
    with pytest.raises(UnsupportedStyle):
        lender_fairness(ref, semiannual, small, "tri", "D")


# ---------------------------------------------------------------- tranches

def test_tranche_cut_examples():
    assert tranche_cut(7.0, TrancheSpec(0, 5)) == 5.0
    assert tranche_cut(7.0, TrancheSpec(5, 5)) == 2.0
    assert tranche_cut(7.0, TrancheSpec(10, 5)) == 0.0


def test_tranche_spec_validation():
    with pytest.raises(DomainError):
        TrancheSpec(-1.0, 5.0)
    with pytest.raises(DomainError):
        TrancheSpec(0.0, 0.0)


def _fixed_bundle(losses):
    losses = np.asarray(losses, dtype=float)
    return PoolPaths(tau=np.zeros((1, losses.size)), loss=losses[None, :])


def test_stack_examples():
    pool = PoolConfig((ModelConfig(T=1.0),), np.array([0.0, 1.0]))
    stack = [TrancheSpec(0, 5), TrancheSpec(5, 5)]
    bundle = _fixed_bundle([7.0, 12.0])
    assert [float(tranche_loss(pool, tr, bundle, 1.0)[0]) for tr in stack] == [5.0, 2.0]
    assert [float(tranche_loss(pool, tr, bundle, 1.0)[1]) for tr in stack] == [5.0, 5.0]
    assert tranche_stack_consistency(pool, stack, bundle).ok


def test_stack_must_be_contiguous():
    pool = PoolConfig((ModelConfig(T=1.0),), np.array([0.0, 1.0]))
    with pytest.raises(DomainError):
        tranche_stack_consistency(pool, [TrancheSpec(0, 5), TrancheSpec(6, 5)], _fixed_bundle([1.0]))


def test_pool_validation():
    with pytest.raises(DomainError):
        PoolConfig((), np.array([0.0, 5.0]))
    with pytest.raises(DomainError):
        PoolConfig((ModelConfig(), ModelConfig(r=0.01)), np.array([0.0, 5.0]))
    with pytest.raises(DomainError):
        PoolConfig((ModelConfig(),), np.array([0.0, 4.0]))


def test_no_default_pool_has_zero_spread():
    pool = PoolConfig((ModelConfig(lambda_C=0.0),) * 3, np.linspace(0, 5, 11))
    ts = tranche_spread(pool, TrancheSpec(0.0, 0.1), SimSettings(n_paths=5000))
    assert ts.spread == 0.0 and ts.protection.mean == 0.0


def test_wiped_out_tranche_is_degenerate():
    member = ModelConfig(lambda_C=1e9, R_C=0.0, sigma=0.0, m0=7.0, T=1.0, r=0.0)
    pool = PoolConfig((member,), np.array([0.0, 1.0]))
    bundle = simulate_pool(pool, 0, 100, 1)
    np.testing.assert_array_equal(pool_loss(bundle, 1.0), 7.0)
    with pytest.raises(DegeneratePool):
        tranche_spread(pool, TrancheSpec(0.0, 5.0), SimSettings(n_paths=100))


def test_wide_tranche_matches_pool_oracle(ref, mc):
    resets = np.linspace(0, 5, 11)
    pool = PoolConfig((ref,), resets)
    ts = tranche_spread(pool, TrancheSpec(0.0, 1e6), mc())
    expected = oracle.pool_loss_quadrature([ref], resets, ref.r)
    assert within_3se(ts.protection, expected)
    assert ts.spread * ts.premium.mean == pytest.approx(ts.protection.mean, rel=1e-12)


def test_spread_nonincreasing_in_attachment(ref, mc):
    members = tuple(ref.replace(lambda_C=l, sigma=s) for l, s in [(0.02, 0.1), (0.05, 0.2), (0.1, 0.15),
                                                                   (0.03, 0.3)])
    pool = PoolConfig(members, np.linspace(0, 5, 11))
    levels = [0.0, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1, 0.15]
    spreads = [ts.spread for ts in tranche_spreads(pool, [TrancheSpec(L, 0.05) for L in levels], mc(50_000))]
    assert all(b <= a for a, b in zip(spreads, spreads[1:]))


def test_random_pools_telescoping(mc):
    rng = np.random.default_rng(5)
    for _ in range(3):
        members = tuple(ModelConfig(lambda_C=rng.uniform(0.01, 0.3), sigma=rng.uniform(0.05, 0.5),
                                    m0=rng.uniform(-0.1, 0.1), R_C=rng.uniform(0, 0.9),
                                    rho_MC=rng.uniform(-0.5, 0.5)) for _ in range(rng.integers(1, 6)))
        pool = PoolConfig(members, np.linspace(0, 5, 11), side=str(rng.choice(["quadri", "tri"])))
        edges = np.sort(rng.uniform(0, 0.5, 5))
        stack = [TrancheSpec(float(a), float(b - a)) for a, b in zip(edges[:-1], edges[1:])]
        report = tranche_stack_consistency(pool, stack, simulate_pool(pool, 0, 10_000, 3))
        assert report.ok and report.max_abs_error <= 1e-12


def test_tri_pool_loses_more_than_quadri(ref):
    resets = np.linspace(0, 5, 6)
    q = simulate_pool(PoolConfig((ref,), resets, "quadri"), 0, 5000, 2)
    t = simulate_pool(PoolConfig((ref,), resets, "tri"), 0, 5000, 2)
    np.testing.assert_array_equal(q.tau, t.tau)
    assert np.all(t.loss >= q.loss)


def test_pool_members_are_independent(ref):
    pool = PoolConfig((ref.replace(lambda_C=0.5), ref.replace(lambda_C=0.5)), np.linspace(0, 5, 6))
    b = simulate_pool(pool, 0, 40_000, 9)
    d = np.isfinite(b.tau)
    assert not np.array_equal(b.tau[0], b.tau[1])
    assert abs(np.corrcoef(d[0], d[1])[0, 1]) < 0.02


def test_tranche_spreads_deterministic_across_workers(ref):
    pool = PoolConfig((ref, ref.replace(lambda_C=0.1)), np.linspace(0, 5, 11))
    st = SimSettings(n_paths=20_000, batch_size=3000)
    tr = [TrancheSpec(0, 0.05), TrancheSpec(0.05, 0.1)]
    assert tranche_spreads(pool, tr, st) == tranche_spreads(pool, tr, st.replace(workers=4))


# ---------------------------------------------------------------- netting and carry

def test_offsetting_trades_net_to_zero(ref, semiannual):
    nset = NettingSet([Trade(1.0), Trade(-1.0)])
    path = generate_path(ref.replace(lambda_C=0.5), semiannual, 3, 1)
    for t in path.times:
        assert netting_set_exposure(nset, path, t) == 0.0


def test_single_trade_set_is_the_trade(ref, semiannual):
    nset = NettingSet([Trade(1.0)])
    path = generate_path(ref, semiannual, 4, 1)
    for t in path.times:
        assert netting_set_exposure(nset, path, t) == path.m_B(t)


def test_half_hedged_set_halves_the_cva(ref, semiannual, small):
    full = netting_set_report(NettingSet([Trade(1.0)]), ref, semiannual, small)
    half = netting_set_report(NettingSet([Trade(1.0), Trade(-0.5)]), ref, semiannual, small)
    assert half["cva"].mean == pytest.approx(0.5 * full["cva"].mean, rel=1e-12)
    assert full["cva"] == ucva(ref, semiannual, small)


def test_trade_weight_must_be_finite():
    with pytest.raises(DomainError):
        Trade(math.nan)


def test_repo_carry_vanishes(ref, small):
    assert repo_carry_cost(ref, small, LiquiditySpec.none()).mean == 0.0
    assert repo_carry_cost(ref.replace(R_C=1.0), small, LiquiditySpec.constant_fraction(0.1)).mean == 0.0


def test_repo_carry_matches_oracle(ref, mc):
    s = repo_carry_cost(ref, mc(), LiquiditySpec.constant_fraction(0.1))
    assert within_3se(s, oracle.repo_carry_quadrature(ref, 0.1))


def test_repo_carry_lognormal(ref, mc):
    liq = LiquiditySpec.lognormal(math.log(0.02), 0.3)
    s = repo_carry_cost(ref, mc(), liq)
    # exposure-independent cost: (1-R_C) E[L] times the first-to-default discounted probability
    lam, rate = ref.lambda_C, ref.r + ref.lambda_C + ref.lambda_B
    expected = 0.6 * liq.expected_lender_share() * lam / rate * (1 - math.exp(-rate * ref.T))
    assert within_3se(s, expected)
