import numpy as np
import pytest
from scipy.stats import norm

from hjmlab.black import call_deltas, call_price, total_volatility
from hjmlab.curves import (
    BondCurve,
    DiscountedCurve,
    ForwardCurve,
    MaturityGrid,
    PortfolioMeasure,
    initial_discounted,
)
from hjmlab.errors import BudgetExceeded, PreconditionError, SingularHedgeMatrix
from hjmlab.hedging import (
    BasketPayout,
    ZcbCall,
    arrears_payout,
    bump_revalue,
    finite_factor_hedge,
    modified_payout,
    payout_subgradient,
    prehedge,
    prehedge_norm_bound,
    price_claim,
    replicate,
    self_financing_complete,
    support_check,
    uniqueness_gap,
    validate_lipschitz,
)
from hjmlab.models import (
    ConstKappa,
    FactorLoadings,
    GaussianVol,
    LocalVol,
    TauComponent,
    catalog_model,
    diagnostics,
    simulate,
)


@pytest.fixture(scope="module")
def grid():
    return MaturityGrid.uniform(30.0, 30)


@pytest.fixture(scope="module")
def p0(grid):
    return initial_discounted(ForwardCurve(grid, np.full(grid.n_nodes, 0.05))).values


@pytest.fixture(scope="module")
def call():
    return ZcbCall(expiry=1.0, underlying=2.0, strike=0.95)


def _curve(grid, values, t=0.0):
    return DiscountedCurve(grid, values, as_of=t)


# ---------------------------------------------------------------------------
# payouts


def test_modified_payout_direct(grid):
    x = np.linspace(1.0, 0.4, grid.n_nodes)
    x[grid.node_index(2.0)] = 0.8
    x[grid.node_index(1.0)] = 0.9
    c = ZcbCall(1.0, 2.0, 0.85)
    assert modified_payout(c, _curve(grid, x)) == pytest.approx(0.8 - 0.85 * 0.9, abs=1e-15)


def test_modified_payout_out_of_the_money(grid, p0, call):
    x = p0.copy()
    x[grid.node_index(2.0)] = 0.5 * call.strike * x[grid.node_index(1.0)]
    assert modified_payout(call, _curve(grid, x)) == 0.0


def test_modified_payout_homogeneous(grid, p0, call):
    lam = 2.7
    v1 = modified_payout(call, _curve(grid, lam * p0))
    v0 = modified_payout(call, _curve(grid, p0))
    assert v1 == pytest.approx(lam * v0, rel=1e-14)


def test_arrears_reduces_to_modified(grid, p0):
    c = ZcbCall(1.0, 2.0, 0.9, arrears=0.0)
    val, carry = arrears_payout(c, _curve(grid, p0))
    assert val == pytest.approx(modified_payout(c, _curve(grid, p0)), rel=1e-14)
    assert carry.bond_maturity == 1.0


def test_arrears_formula(grid, p0):
    c = ZcbCall(1.0, 2.0, 0.9, arrears=1.0)
    val, carry = arrears_payout(c, _curve(grid, p0))
    i1, i0 = grid.node_index(2.0), grid.node_index(1.0)
    want = p0[grid.node_index(2.0)] * max(p0[i1] / p0[i0] - 0.9, 0.0)
    assert val == pytest.approx(want, rel=1e-14)
    assert carry.units == pytest.approx(max(p0[i1] / p0[i0] - 0.9, 0.0))


def test_arrears_zero_vol_carry_consistency(grid, p0):
    # deterministic rates: the deferred payout discounts to exactly the
    # modified value of the settlement-bond-weighted fixing
    c = ZcbCall(1.0, 2.0, 0.9, arrears=1.0)
    val, carry = arrears_payout(c, _curve(grid, p0))
    settle = c.expiry + c.arrears
    # with zero volatility the discounted curve never moves, so the
    # discounted arrears payout is the frozen inverse bank at settlement
    # times the fixing
    want = p0[grid.node_index(settle)] * carry.units
    assert val == pytest.approx(want, rel=1e-14)


def test_subgradient_call(grid, p0, call):
    m = payout_subgradient(call, _curve(grid, p0))  # in the money at flat 5%
    dense = m.to_dense()
    assert dense[grid.node_index(2.0)] == 1.0
    assert dense[grid.node_index(1.0)] == -call.strike
    assert np.count_nonzero(dense) == 2


def test_subgradient_out_of_the_money(grid, p0, call):
    x = p0.copy()
    x[grid.node_index(2.0)] = 0.5 * call.strike * x[grid.node_index(1.0)]
    m = payout_subgradient(call, _curve(grid, x))
    assert np.all(m.to_dense() == 0.0)


def test_subgradient_basket_finite_difference(grid, p0):
    b = BasketPayout(
        expiry=1.0, maturities=(2.0, 4.0),
        fn=lambda u1, u2: np.tanh(u1) * u2,
        grad=lambda u1, u2: np.array([u2 / np.cosh(u1) ** 2, np.tanh(u1)]),
    )
    m = payout_subgradient(b, _curve(grid, p0))
    rng = np.random.default_rng(1)
    h = rng.standard_normal(grid.n_nodes) * 0.01
    eps = 1e-5
    fd = (b.modified_batch(p0 + eps * h, grid) - b.modified_batch(p0 - eps * h, grid)) / (2 * eps)
    assert m.pair(h) == pytest.approx(float(fd), rel=1e-4)


def test_lipschitz_validation(grid, p0, call):
    bound = call.lipschitz_bound(grid)
    worst = validate_lipschitz(call, grid, p0, n_pairs=100, seed=2)
    assert worst <= bound * (1.0 + 1e-9)
    assert bound <= (1.0 + call.strike) * 1.0 + 1e-9  # (1 + K) sqrt(c_v)


# ---------------------------------------------------------------------------
# pre-hedging


def test_prehedge_zero_vol_exact(grid, p0, call):
    model = GaussianVol(grid, [TauComponent(0.0)])
    times = np.linspace(0.0, call.expiry, 11)
    m = prehedge(model, call, times, 0, p0, n_inner=16, seed=3)
    dense = m.to_dense()
    assert dense[grid.node_index(2.0)] == 1.0
    assert dense[grid.node_index(1.0)] == -call.strike
    assert np.all(m.stderr == 0.0)


def test_prehedge_matches_black_deltas(grid, p0, call):
    tau0 = 0.02
    model = GaussianVol(grid, [TauComponent(tau0)])
    times = np.linspace(0.0, call.expiry, 51)
    m = prehedge(model, call, times, 0, p0, n_inner=20000, seed=4)
    vol = total_volatility(model, 0.0, call.expiry, call.underlying)
    i1, i0 = grid.node_index(2.0), grid.node_index(1.0)
    w1, w0 = call_deltas(p0[i1], p0[i0], call.strike, vol)
    assert abs(m.weights[i1] - w1) <= 3 * m.stderr[i1]
    assert abs(m.weights[i0] - w0) <= 3 * m.stderr[i0]


def test_prehedge_local_confined_exactly(grid, p0):
    # locality makes the variation lower triangular, so weight beyond the
    # longest underlying maturity vanishes identically, not just in the mean
    model = catalog_model("local10", grid)
    call = ZcbCall(1.0, 2.0, 0.95)
    times = np.linspace(0.0, 1.0, 9)
    m = prehedge(model, call, times, 0, p0, n_inner=128, seed=5)
    beyond = grid.nodes > call.underlying
    assert np.all(m.weights[beyond] == 0.0)
    assert np.all(m.stderr[beyond] == 0.0)


def test_prehedge_dual_norm_bound(grid, p0, call):
    model = catalog_model("local10", grid)
    rep = diagnostics(model, p0, t_list=(0.0,), seed=6, n_pairs=40)
    times = np.linspace(0.0, call.expiry, 17)
    m = prehedge(model, call, times, 0, p0, n_inner=512, seed=7)
    cap = prehedge_norm_bound(call, grid, rep.lipschitz_est, call.expiry)
    assert m.dual_norm() <= cap * 1.01


def test_price_matches_closed_form(grid, p0, call):
    tau0 = 0.02
    model = GaussianVol(grid, [TauComponent(tau0)])
    times = np.linspace(0.0, call.expiry, 51)
    price, se = price_claim(model, call, times, p0, 20000, seed=8)
    vol = total_volatility(model, 0.0, call.expiry, call.underlying)
    want = float(call_price(p0[grid.node_index(2.0)], p0[grid.node_index(1.0)],
                            call.strike, vol))
    assert abs(price - want) <= 3 * se


# ---------------------------------------------------------------------------
# bump-and-revalue


def test_bump_zero_direction(grid, p0, call):
    model = catalog_model("ho_lee", grid)
    times = np.linspace(0.0, call.expiry, 21)
    d, se = bump_revalue(model, call, times, p0, np.zeros(grid.n_nodes), 1e-4,
                         256, seed=9)
    assert d == 0.0 and se == 0.0


def test_bump_zero_vol_linear_region(grid, p0, call):
    model = GaussianVol(grid, [TauComponent(0.0)])
    times = np.linspace(0.0, call.expiry, 21)
    h = np.zeros(grid.n_nodes)
    h[grid.node_index(2.0)] = 1.0
    d, se = bump_revalue(model, call, times, p0, h, 1e-4, 64, seed=10)
    assert d == pytest.approx(1.0, abs=1e-12)
    assert se == 0.0


def test_bump_matches_black_delta(grid, p0, call):
    tau0 = 0.02
    model = GaussianVol(grid, [TauComponent(tau0)])
    times = np.linspace(0.0, call.expiry, 51)
    h = np.zeros(grid.n_nodes)
    h[grid.node_index(2.0)] = 1.0
    d, se = bump_revalue(model, call, times, p0, h, 1e-4, 20000, seed=11)
    vol = total_volatility(model, 0.0, call.expiry, call.underlying)
    w1, _ = call_deltas(p0[grid.node_index(2.0)], p0[grid.node_index(1.0)],
                        call.strike, vol)
    assert abs(d - float(w1)) <= 3 * se + 1e-4

    with pytest.raises(PreconditionError):
        bump_revalue(model, call, times, p0, h, 0.0, 8, seed=0)


# ---------------------------------------------------------------------------
# self-financing completion


def test_completion_identity(grid, p0):
    bonds = BondCurve(grid, p0 / p0[0], as_of=0.0)
    phi = PortfolioMeasure.from_atoms(grid, [(2.0, 1.0), (1.0, -0.95)])
    v = 0.123
    full = self_financing_complete(phi, v, bonds)
    assert full.value(bonds) == pytest.approx(v, abs=1e-14)


def test_completion_all_cash(grid, p0):
    bonds = BondCurve(grid, p0 / p0[0], as_of=0.0)
    phi = PortfolioMeasure(grid, np.array([], dtype=int), np.array([]))
    full = self_financing_complete(phi, 2.5, bonds)
    assert full.cash_weight == pytest.approx(2.5)
    assert full.value(bonds) == pytest.approx(2.5, abs=1e-14)


def test_completion_no_gap(grid, p0):
    bonds = BondCurve(grid, p0 / p0[0], as_of=0.0)
    phi = PortfolioMeasure.from_atoms(grid, [(2.0, 1.0)])
    v = phi.pair(bonds)
    full = self_financing_complete(phi, v, bonds)
    assert full.cash_weight == pytest.approx(0.0, abs=1e-15)


# ---------------------------------------------------------------------------
# finite-factor hedging


def test_identity_claim_replicates_exactly(grid, p0):
    model = GaussianVol(grid, [TauComponent(0.015)])
    claim = ZcbCall(1.0, 2.0, 1e-9)  # strike ~ 0: effectively the 2y bond
    times = np.linspace(0.0, 1.0, 101)
    rep = finite_factor_hedge(model, claim, [2.0], times, p0, 64, seed=12)
    assert np.allclose(rep.weights, 1.0, atol=1e-6)
    assert np.max(np.abs(rep.terminal_errors)) < 1e-7


def test_far_maturity_hedge_converges(grid, p0):
    # hedging a short call with a long bond works, errors shrink with dt
    model = GaussianVol(grid, [TauComponent(0.015)])
    claim = ZcbCall(1.0, 2.0, 0.95)
    rms = []
    for L in (64, 128):
        times = np.linspace(0.0, 1.0, L + 1)
        rep = finite_factor_hedge(model, claim, [10.0], times, p0, 1024, seed=13)
        rms.append(rep.rel_rms)
    assert rms[1] < rms[0]
    assert rms[1] < 0.2


def test_singular_hedge_matrix_detected(grid, p0):
    tau = TauComponent(0.01)
    model = GaussianVol(grid, [tau, tau])  # two identical factors
    claim = ZcbCall(1.0, 2.0, 0.95)
    times = np.linspace(0.0, 1.0, 11)
    with pytest.raises(SingularHedgeMatrix):
        finite_factor_hedge(model, claim, [10.0, 20.0], times, p0, 8, seed=14)


def test_hedge_maturities_must_outlive_expiry(grid, p0):
    model = catalog_model("ho_lee", grid)
    claim = ZcbCall(2.0, 3.0, 0.95)
    with pytest.raises(PreconditionError):
        finite_factor_hedge(model, claim, [1.0], np.linspace(0, 2, 11), p0, 8, seed=0)


# ---------------------------------------------------------------------------
# generic replication


def test_replicate_zero_vol_exact(grid, p0):
    model = GaussianVol(grid, [TauComponent(0.0)])
    call = ZcbCall(1.0, 2.0, 0.9)
    times = np.linspace(0.0, 1.0, 9)
    rep = replicate(model, call, times, p0, n_outer=8, n_inner=8, seed=15)
    assert rep.rms <= 1e-14


def test_replicate_gaussian_rate(grid, p0):
    model = GaussianVol(grid, [TauComponent(0.02)])
    call = ZcbCall(1.0, 2.0, 0.95)
    rel = []
    for L in (64, 128):
        times = np.linspace(0.0, 1.0, L + 1)
        rep = replicate(model, call, times, p0, n_outer=2000, n_inner=0, seed=16,
                        integrand="gaussian")
        rel.append(rep.rel_rms)
    assert 1.25 <= rel[0] / rel[1] <= 1.6


def test_replicate_nested_smoke(grid, p0):
    model = catalog_model("local10", grid)
    call = ZcbCall(1.0, 2.0, 0.95)
    times = np.linspace(0.0, 1.0, 9)
    rep = replicate(model, call, times, p0, n_outer=12, n_inner=96, seed=17)
    assert np.isfinite(rep.rel_rms)
    assert rep.rel_rms < 0.8


def test_replicate_budget_guard(grid, p0):
    model = catalog_model("local10", grid)
    call = ZcbCall(1.0, 2.0, 0.95)
    times = np.linspace(0.0, 1.0, 9)
    with pytest.raises(BudgetExceeded):
        replicate(model, call, times, p0, n_outer=64, n_inner=512, seed=0,
                  cost_cap=1.0)


# ---------------------------------------------------------------------------
# support verdicts


def test_support_zero_vol_call(grid, p0):
    model = GaussianVol(grid, [TauComponent(0.0)])
    call = ZcbCall(1.0, 2.0, 0.9)
    times = np.linspace(0.0, 1.0, 5)
    m = prehedge(model, call, times, 0, p0, n_inner=8, seed=18)
    assert m.support_interval == (1.0, 2.0)
    verdict = support_check([m], [0.0], window_end=call.underlying)
    assert verdict.passed


def test_support_local_prehedge_passes(grid, p0):
    model = catalog_model("local10", grid)
    call = ZcbCall(1.0, 2.0, 0.95)
    times = np.linspace(0.0, 1.0, 9)
    ms, ts = [], []
    for k in (0, 4):
        ms.append(prehedge(model, call, times, k, p0, n_inner=256, seed=19,
                           outer_id=k))
        ts.append(float(times[k]))
    verdict = support_check(ms, ts, window_end=call.underlying)
    assert verdict.passed


def test_support_far_maturity_hedge_fails(grid, p0):
    model = GaussianVol(grid, [TauComponent(0.015)])
    claim = ZcbCall(1.0, 2.0, 0.95)
    times = np.linspace(0.0, 1.0, 65)
    rep = finite_factor_hedge(model, claim, [10.0], times, p0, 256, seed=20)
    ms = [rep.mean_measure(k) for k in range(rep.rebalance_times.size)]
    verdict = support_check(ms, rep.rebalance_times, window_end=claim.underlying)
    assert not verdict.passed
    assert verdict.worst_maturity == 10.0


# ---------------------------------------------------------------------------
# uniqueness


def test_uniqueness_identical(grid, p0, call):
    m = PortfolioMeasure.from_atoms(grid, [(2.0, 0.5), (1.0, -0.4)])
    rep = uniqueness_gap(m, m)
    assert rep.passed and rep.dual_gap == 0.0


def test_uniqueness_prehedge_vs_bump(grid, p0, call):
    tau0 = 0.02
    model = GaussianVol(grid, [TauComponent(tau0)])
    times = np.linspace(0.0, call.expiry, 51)
    a = prehedge(model, call, times, 0, p0, n_inner=8000, seed=21)
    idx, w, se = [], [], []
    for s in (call.underlying, call.expiry):
        h = np.zeros(grid.n_nodes)
        h[grid.node_index(s)] = 1.0
        d, dse = bump_revalue(model, call, times, p0, h, 1e-4, 8000, seed=22)
        idx.append(grid.node_index(s))
        w.append(d)
        se.append(dse)
    b_dense = np.zeros(grid.n_nodes)
    b_se = np.zeros(grid.n_nodes)
    b_dense[idx] = w
    b_se[idx] = se
    b = PortfolioMeasure(grid, np.arange(grid.n_nodes), b_dense, b_se)
    rep = uniqueness_gap(a, b, model=model, t=0.0, state=p0)
    assert rep.passed


def test_uniqueness_detects_fault(grid):
    idxs = np.arange(grid.n_nodes)
    w = np.zeros(grid.n_nodes)
    w[5] = 0.5
    se = np.full(grid.n_nodes, 1e-3)
    a = PortfolioMeasure(grid, idxs, w, se)
    w2 = w.copy()
    w2[9] += 0.1
    b = PortfolioMeasure(grid, idxs, w2, se)
    rep = uniqueness_gap(a, b)
    assert not rep.passed
