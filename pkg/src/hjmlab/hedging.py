"""Payouts, hedging strategies and replication backtests.

A claim pays g(P_T(T_1), .., P_T(T_n)) at its expiry T.  Every estimator here
works with the discounted modified payoff, which reads the payout off the
terminal discounted curve alone; backtests accordingly track discounted
wealth against discounted price moves, so the cash account drops out of the
recursion and reappears only in the self-financing completion.

The pre-hedging weights are conditional expectations of the first-variation
transpose applied to the payout subgradient.  They are estimated by nested
Monte Carlo: inner paths continue the outer state, the subgradient at the
inner terminal curve is pulled back step by step through the transposed
variation maps, and the average over inner paths is the portfolio measure.
The pullback costs the same as the forward step, so nesting stays affordable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .black import call_deltas, call_integrand, call_price, total_volatility_profile
from .curves import (
    BondCurve,
    DiscountedCurve,
    MaturityGrid,
    PortfolioMeasure,
    dual_norm,
    sobolev_norm,
)
from .errors import BudgetExceeded, PreconditionError, SingularHedgeMatrix
from .models import GaussianVol, PathBundle, simulate, step_states

__all__ = [
    "ZcbCall",
    "BasketPayout",
    "CustomPayout",
    "CarryInstruction",
    "modified_payout",
    "arrears_payout",
    "payout_subgradient",
    "validate_lipschitz",
    "prehedge",
    "price_claim",
    "bump_revalue",
    "CompletedStrategy",
    "self_financing_complete",
    "HedgeReport",
    "finite_factor_hedge",
    "replicate",
    "SupportVerdict",
    "support_check",
    "GapReport",
    "uniqueness_gap",
]


# ---------------------------------------------------------------------------
# payout catalog


@dataclass(frozen=True)
class ZcbCall:
    """Call with strike K, expiry T, on the zero-coupon bond maturing at T_1.

    The discounted modified payoff is (x(T_1) - K x(T))^+; the subgradient
    indicator uses the right-continuous convention at the kink.
    """

    expiry: float
    underlying: float
    strike: float
    arrears: float = 0.0

    def __post_init__(self):
        if not self.expiry < self.underlying:
            raise PreconditionError("underlying bond must outlive the option")
        if self.strike <= 0 or self.arrears < 0:
            raise PreconditionError("bad strike or arrears offset")

    @property
    def longest_underlying(self) -> float:
        return self.underlying

    def atom_maturities(self) -> list[float]:
        return [self.underlying, self.expiry]

    def modified_batch(self, x: np.ndarray, grid: MaturityGrid) -> np.ndarray:
        i1, i0 = grid.node_index(self.underlying), grid.node_index(self.expiry)
        return np.maximum(x[..., i1] - self.strike * x[..., i0], 0.0)

    def subgradient_dense(self, x: np.ndarray, grid: MaturityGrid) -> np.ndarray:
        i1, i0 = grid.node_index(self.underlying), grid.node_index(self.expiry)
        itm = (x[..., i1] >= self.strike * x[..., i0]).astype(float)
        out = np.zeros(x.shape)
        out[..., i1] = itm
        out[..., i0] = -self.strike * itm
        return out

    def fixing(self, x: np.ndarray, grid: MaturityGrid) -> np.ndarray:
        """Raw payout at expiry from bond-price ratios."""
        i1, i0 = grid.node_index(self.underlying), grid.node_index(self.expiry)
        return np.maximum(x[..., i1] / x[..., i0] - self.strike, 0.0)

    def lipschitz_bound(self, grid: MaturityGrid) -> float:
        w = np.zeros(grid.n_nodes)
        w[grid.node_index(self.underlying)] = 1.0
        w[grid.node_index(self.expiry)] = -self.strike
        return dual_norm(w, grid)


@dataclass(frozen=True)
class BasketPayout:
    """g(P_T(T_1), .., P_T(T_n)) for a smooth g with supplied gradient."""

    expiry: float
    maturities: tuple
    fn: Callable
    grad: Callable
    lipschitz: float | None = None
    arrears: float = 0.0

    def __post_init__(self):
        mats = tuple(sorted(float(m) for m in self.maturities))
        object.__setattr__(self, "maturities", mats)
        if mats[0] < self.expiry:
            raise PreconditionError("underlying maturities must not precede expiry")

    @property
    def longest_underlying(self) -> float:
        return self.maturities[-1]

    def atom_maturities(self) -> list[float]:
        return list(self.maturities) + [self.expiry]

    def _ratios(self, x: np.ndarray, grid: MaturityGrid):
        i0 = grid.node_index(self.expiry)
        idx = [grid.node_index(m) for m in self.maturities]
        x0 = x[..., i0]
        return x0, np.stack([x[..., i] / x0 for i in idx], axis=-1), idx, i0

    def modified_batch(self, x: np.ndarray, grid: MaturityGrid) -> np.ndarray:
        x0, u, _, _ = self._ratios(x, grid)
        vals = np.apply_along_axis(lambda row: self.fn(*row), -1, u)
        return x0 * vals

    def subgradient_dense(self, x: np.ndarray, grid: MaturityGrid) -> np.ndarray:
        x0, u, idx, i0 = self._ratios(x, grid)
        out = np.zeros(x.shape)
        g_of_u = np.apply_along_axis(lambda row: self.fn(*row), -1, u)
        grads = np.apply_along_axis(lambda row: np.atleast_1d(self.grad(*row)), -1, u)
        for j, i in enumerate(idx):
            out[..., i] += grads[..., j]
        out[..., i0] += g_of_u - np.sum(grads * u, axis=-1)
        return out

    def fixing(self, x: np.ndarray, grid: MaturityGrid) -> np.ndarray:
        _, u, _, _ = self._ratios(x, grid)
        return np.apply_along_axis(lambda row: self.fn(*row), -1, u)


@dataclass(frozen=True)
class CustomPayout:
    """Arbitrary Lipschitz functional of the terminal discounted curve."""

    expiry: float
    longest: float
    value_fn: Callable
    subgrad_fn: Callable
    lipschitz: float | None = None
    arrears: float = 0.0

    @property
    def longest_underlying(self) -> float:
        return self.longest

    def atom_maturities(self) -> list[float]:
        return []

    def modified_batch(self, x, grid):
        return self.value_fn(x, grid)

    def subgradient_dense(self, x, grid):
        return self.subgrad_fn(x, grid)


def modified_payout(payout, curve: DiscountedCurve) -> float:
    """Discounted payoff read off one terminal curve."""
    x = curve.values
    i0 = curve.grid.node_index(payout.expiry)
    if x[i0] <= 0:
        raise PreconditionError("curve must be positive at the payout expiry")
    return float(payout.modified_batch(x, curve.grid))


@dataclass(frozen=True)
class CarryInstruction:
    """Hold ``units`` of the bond maturing at ``bond_maturity`` until settlement."""

    bond_maturity: float
    units: float


def arrears_payout(payout, curve: DiscountedCurve) -> tuple[float, CarryInstruction]:
    """Value and carry rule for settlement ``arrears`` after the expiry fixing.

    The claim fixes at expiry but pays later; replicating the modified value
    below and then carrying the fixing in the settlement-maturity bond
    reproduces the deferred payout.
    """
    grid = curve.grid
    settle = payout.expiry + payout.arrears
    if settle > grid.s_max:
        raise PreconditionError("settlement date beyond the maturity grid")
    x = curve.values
    i0 = grid.node_index(payout.expiry)
    if x[i0] <= 0:
        raise PreconditionError("curve must be positive at the payout expiry")
    fixing = float(payout.fixing(x, grid))
    value = float(curve.value_at(settle)) * fixing
    return value, CarryInstruction(settle, fixing)


def payout_subgradient(payout, curve: DiscountedCurve) -> PortfolioMeasure:
    """Subgradient of the modified payoff as an atomic measure."""
    x = curve.values
    if x[curve.grid.node_index(payout.expiry)] <= 0:
        raise PreconditionError("curve must be positive at the payout expiry")
    dense = payout.subgradient_dense(x, curve.grid)
    return PortfolioMeasure.dense(curve.grid, dense)


def validate_lipschitz(payout, grid: MaturityGrid, base: np.ndarray,
                       n_pairs: int = 200, seed: int = 0) -> float:
    """Largest sampled ratio |g~(x) - g~(y)| / ||x - y||; must not exceed the bound."""
    g = rngmod.stream(seed, rngmod.SAMPLER, 1)
    s = grid.nodes
    worst = 0.0
    for _ in range(n_pairs):
        tilts = []
        for _ in range(2):
            a = g.normal(0.0, 0.3, size=3)
            b = g.uniform(0.05, 0.5, size=3)
            tilts.append(sum(ai * np.exp(-bi * s) for ai, bi in zip(a, b)))
        x = base * np.exp(tilts[0])
        y = base * np.exp(tilts[1])
        den = sobolev_norm(x - y, grid, "f1v")
        if den < 1e-14:
            continue
        num = abs(float(payout.modified_batch(x, grid)) - float(payout.modified_batch(y, grid)))
        worst = max(worst, num / den)
    return worst


# ---------------------------------------------------------------------------
# pre-hedging by nested Monte Carlo


def _inner_increments(seed, outer_id, t_idx, n_inner, dts_tail, n_factors):
    dw = rngmod.block_increments(seed, outer_id, t_idx, n_inner, dts_tail.size,
                                 n_factors, 1.0)
    return dw * np.sqrt(dts_tail)[None, :, None]


def prehedge(model, payout, times, t_idx: int, state: np.ndarray, n_inner: int,
             seed: int, outer_id: int = 0) -> PortfolioMeasure:
    """Pre-hedging portfolio at one (time, state) by nested Monte Carlo.

    Inner paths run from the state to the payout expiry (the last grid time);
    the payout subgradient at each inner terminal curve is pulled back
    through the transposed one-step variation maps onto time-t atoms.
    """
    times = np.asarray(times, dtype=float)
    if abs(times[-1] - payout.expiry) > 1e-12:
        raise PreconditionError("time grid must end at the payout expiry")
    grid = model.grid
    dts = np.diff(times)
    dw = _inner_increments(seed, outer_id, t_idx, n_inner, dts[t_idx:], model.n_factors)
    x = np.broadcast_to(np.asarray(state, dtype=float), (n_inner, grid.n_nodes)).copy()
    ctxs = []
    for k, ell in enumerate(range(t_idx, times.size - 1)):
        t = float(times[ell])
        ctxs.append(model.step_context(t, x, dw[:, k]))
        x, _ = step_states(model, t, x, dw[:, k], float(dts[ell]))
    rho = payout.subgradient_dense(x, grid)
    for ctx in reversed(ctxs):
        rho = rho + model.variation_pullback(ctx, rho)
    weights = rho.mean(axis=0)
    se = rho.std(axis=0, ddof=1) / np.sqrt(n_inner)
    return PortfolioMeasure.dense(grid, weights, se)


def prehedge_norm_bound(payout, grid: MaturityGrid, lipschitz_model: float,
                        horizon: float) -> float:
    """A priori dual-norm cap C_1 * exp(C^2 (T - t) / 2) on the pre-hedge."""
    c1 = payout.lipschitz_bound(grid) if hasattr(payout, "lipschitz_bound") \
        else (payout.lipschitz or np.inf)
    return float(c1 * np.exp(0.5 * lipschitz_model ** 2 * horizon))


def price_claim(model, payout, times, state: np.ndarray, n_paths: int, seed: int,
                stream_tag: int = rngmod.INNER, outer_id: int = 0,
                increments: np.ndarray | None = None) -> tuple[float, float]:
    """Monte Carlo discounted price of the claim from a time-grid start state."""
    times = np.asarray(times, dtype=float)
    grid = model.grid
    dts = np.diff(times)
    if increments is None:
        increments = _inner_increments(seed, outer_id, 0, n_paths, dts, model.n_factors)
    x = np.broadcast_to(np.asarray(state, dtype=float), (n_paths, grid.n_nodes)).copy()
    for ell in range(dts.size):
        x, _ = step_states(model, float(times[ell]), x, increments[:, ell],
                           float(dts[ell]))
    vals = payout.modified_batch(x, grid)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_paths))


def bump_revalue(model, payout, times, state: np.ndarray, direction: np.ndarray,
                 eps: float, n_paths: int, seed: int) -> tuple[float, float]:
    """Central-difference directional price derivative with common random numbers."""
    if eps <= 0:
        raise PreconditionError("bump size must be positive")
    times = np.asarray(times, dtype=float)
    dts = np.diff(times)
    dw = _inner_increments(seed, 0, 0, n_paths, dts, model.n_factors)
    h = np.asarray(direction, dtype=float)
    grid = model.grid

    def terminal_values(x0):
        x = np.broadcast_to(x0, (n_paths, grid.n_nodes)).copy()
        for ell in range(dts.size):
            x, _ = step_states(model, float(times[ell]), x, dw[:, ell],
                               float(dts[ell]))
        return payout.modified_batch(x, grid)

    diff = (terminal_values(np.asarray(state) + eps * h)
            - terminal_values(np.asarray(state) - eps * h)) / (2.0 * eps)
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_paths))


# ---------------------------------------------------------------------------
# self-financing completion


@dataclass(eq=False)
class CompletedStrategy:
    """Bond atoms plus the cash position expressed as the just-maturing bond."""

    bonds: PortfolioMeasure
    cash_time: float
    cash_weight: float

    def value(self, bonds_curve: BondCurve) -> float:
        return self.bonds.pair(bonds_curve) \
            + self.cash_weight * bonds_curve.value_at(self.cash_time)


def self_financing_complete(phi: PortfolioMeasure, wealth: float,
                            bonds_curve: BondCurve) -> CompletedStrategy:
    """Top up a pre-hedge with the cash bond so the portfolio is worth ``wealth``."""
    t = bonds_curve.as_of
    at_t = bonds_curve.value_at(t)
    if abs(at_t - 1.0) > 1e-12:
        raise PreconditionError("bond curve must be normalized at its valuation time")
    gap = wealth - phi.pair(bonds_curve)
    return CompletedStrategy(phi, t, gap)


# ---------------------------------------------------------------------------
# hedge reports


@dataclass(eq=False)
class HedgeReport:
    """Weights, initial wealth and terminal replication errors of a backtest."""

    grid: MaturityGrid
    rebalance_times: np.ndarray
    weights: np.ndarray        # (n_rebalance, n_paths, n_atoms)
    stderr: np.ndarray         # same shape; inner-MC errors (zero when analytic)
    atom_idx: np.ndarray       # (n_atoms,) node indices
    v0: float
    v0_se: float
    terminal_errors: np.ndarray
    payoff_std: float
    seed: int
    budget: dict = field(default_factory=dict)

    @property
    def rel_rms(self) -> float:
        rms = float(np.sqrt(np.mean(self.terminal_errors ** 2)))
        return rms / self.payoff_std if self.payoff_std > 0 else np.inf

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.terminal_errors ** 2)))

    def mean_measure(self, k: int) -> PortfolioMeasure:
        """Cross-path mean measure at rebalance time k with its standard error."""
        w = self.weights[k].mean(axis=0)
        n = self.weights.shape[1]
        if n > 1:
            se = self.weights[k].std(axis=0, ddof=1) / np.sqrt(n)
        else:
            se = self.stderr[k, 0]
        return PortfolioMeasure(self.grid, self.atom_idx, w, se)

    def path_measure(self, k: int, p: int) -> PortfolioMeasure:
        return PortfolioMeasure(self.grid, self.atom_idx, self.weights[k, p],
                                self.stderr[k, p])

    def weight_rows(self):
        """(t, maturity, weight, stderr) rows of the cross-path mean weights."""
        for k, t in enumerate(self.rebalance_times):
            m = self.mean_measure(k)
            for i, w, s in zip(m.node_idx, m.weights, m.stderr):
                yield float(t), float(self.grid.nodes[i]), float(w), float(s)

    def summary(self) -> dict:
        return {
            "v0": self.v0, "v0_se": self.v0_se, "rms": self.rms,
            "rel_rms": self.rel_rms, "payoff_std": self.payoff_std,
            "n_paths": int(self.terminal_errors.size),
            "n_rebalance": int(self.rebalance_times.size), "seed": self.seed,
            "budget": self.budget,
        }


# ---------------------------------------------------------------------------
# finite-factor replication with prescribed hedge maturities


def finite_factor_hedge(model: GaussianVol, payout: ZcbCall,
                        hedge_maturities: Sequence[float], times,
                        state0: np.ndarray | None, n_paths: int, seed: int, *,
                        cond_cap: float = 1e8, bundle: PathBundle | None = None,
                        max_report_times: int = 64) -> HedgeReport:
    """Replicate the call with bonds of arbitrary prescribed maturities.

    At every step the exact integrand of the discounted payoff is mapped to
    portfolio weights through the square system of the hedge bonds' own
    volatilities.  All hedge maturities must lie beyond the expiry; the
    system must stay well conditioned for the weights to exist.  Weights are
    recorded on a thinned subset of rebalance times to bound memory.
    """
    grid = model.grid
    times = np.asarray(times, dtype=float)
    if abs(times[-1] - payout.expiry) > 1e-12:
        raise PreconditionError("time grid must end at the payout expiry")
    mats = [float(m) for m in hedge_maturities]
    if len(mats) != model.n_factors:
        raise PreconditionError("need as many hedge bonds as driving factors")
    if min(mats) <= payout.expiry:
        raise PreconditionError("hedge maturities must lie beyond the expiry")
    idx = np.array([grid.node_index(m) for m in mats])
    if bundle is None:
        if state0 is None:
            raise PreconditionError("pass an initial state or a simulated bundle")
        bundle = simulate(model, state0, times, n_paths, seed)
    states = bundle.states
    n_paths = states.shape[0]
    L = times.size - 1
    stride = max(1, L // max_report_times)
    report_idx = np.arange(0, L, stride)

    vols = total_volatility_profile(model, times, payout.expiry, payout.underlying)
    v0 = float(call_price(states[0, 0, grid.node_index(payout.underlying)],
                          states[0, 0, grid.node_index(payout.expiry)],
                          payout.strike, float(vols[0])))
    wealth = np.full(n_paths, v0)
    weights = np.empty((report_idx.size, n_paths, idx.size))
    worst_cond = 0.0
    r = 0
    for ell in range(L):
        t = float(times[ell])
        x = states[:, ell]
        alpha = call_integrand(model, t, x, payout.expiry, payout.underlying,
                               payout.strike, vol=float(vols[ell]))
        loads = np.stack([model.integrate_tau(t, t, m) for m in mats])  # (d, N)
        sig = x[:, idx, None] * loads[None, :, :]                        # (P, d, N)
        worst_cond = max(worst_cond, float(np.linalg.cond(sig).max()))
        if worst_cond > cond_cap:
            raise SingularHedgeMatrix(
                f"hedge-bond volatility matrix condition {worst_cond:.3g} exceeds "
                f"{cond_cap:.3g} at t={t}")
        phi = np.linalg.solve(np.swapaxes(sig, 1, 2), alpha)
        if r < report_idx.size and ell == report_idx[r]:
            weights[r] = phi
            r += 1
        dp = states[:, ell + 1][:, idx] - x[:, idx]
        wealth += np.einsum("pd,pd->p", phi, dp)
    payoff = payout.modified_batch(states[:, -1], grid)
    return HedgeReport(
        grid=grid, rebalance_times=times[report_idx], weights=weights,
        stderr=np.zeros_like(weights), atom_idx=idx, v0=v0, v0_se=0.0,
        terminal_errors=payoff - wealth, payoff_std=float(payoff.std(ddof=1)),
        seed=seed, budget={"n_paths": n_paths, "n_steps": int(L),
                           "worst_cond": worst_cond},
    )


# ---------------------------------------------------------------------------
# generic replication backtest


def _nested_cost(n_outer: int, rebalance_idx: np.ndarray, L: int, n_inner: int,
                 n_nodes: int, n_factors: int) -> float:
    steps = sum(L - int(k) for k in rebalance_idx)
    return 2.0 * n_outer * n_inner * steps * n_nodes * (n_factors + 4)


def replicate(model, payout, times, state0: np.ndarray, n_outer: int,
              n_inner: int, seed: int, *, rebalance_stride: int = 1,
              integrand: str = "nested", cost_cap: float = 5e11,
              n_price: int | None = None) -> HedgeReport:
    """Backtest of the pre-hedging strategy along outer paths.

    ``integrand='nested'`` re-estimates the pre-hedge at every rebalance by
    nested Monte Carlo; ``'gaussian'`` uses the closed-form call deltas
    (deterministic-vol models only).  Discounted wealth accrues through the
    pairing of the weights with discounted price moves.
    """
    grid = model.grid
    times = np.asarray(times, dtype=float)
    if abs(times[-1] - payout.expiry) > 1e-12:
        raise PreconditionError("time grid must end at the payout expiry")
    L = times.size - 1
    rebalance_idx = np.arange(0, L, rebalance_stride)
    if integrand == "nested":
        cost = _nested_cost(n_outer, rebalance_idx, L, n_inner, grid.n_nodes,
                            model.n_factors)
        if cost_cap is not None and cost > cost_cap:
            raise BudgetExceeded(
                f"nested replication cost estimate {cost:.3g} exceeds cap "
                f"{cost_cap:.3g}; reduce budgets or raise mc.cost_cap")
    bundle = simulate(model, state0, times, n_outer, seed)

    if n_price is None:
        n_price = max(4 * n_inner, 4096)
    v0, v0_se = price_claim(model, payout, times, state0, n_price, seed,
                            outer_id=10**6)

    wealth = np.full(n_outer, v0)
    n_reb = rebalance_idx.size
    weights = np.empty((n_reb, n_outer, grid.n_nodes))
    errs = np.empty((n_reb, n_outer, grid.n_nodes))
    if integrand == "gaussian":
        if model.state_dependent:
            raise PreconditionError("gaussian integrand needs a deterministic-vol model")
        profile = total_volatility_profile(model, times, payout.expiry,
                                           payout.underlying)
        vols = {int(k): float(profile[int(k)]) for k in rebalance_idx}
        i1 = grid.node_index(payout.underlying)
        i0 = grid.node_index(payout.expiry)
    for r, k in enumerate(rebalance_idx):
        k = int(k)
        if integrand == "gaussian":
            x = bundle.states[:, k]
            w1, w0 = call_deltas(x[:, i1], x[:, i0], payout.strike, vols[k])
            w = np.zeros((n_outer, grid.n_nodes))
            w[:, i1] = w1
            w[:, i0] = w0
            s = np.zeros_like(w)
        else:
            w = np.empty((n_outer, grid.n_nodes))
            s = np.empty_like(w)
            for p in range(n_outer):
                m = prehedge(model, payout, times, k, bundle.states[p, k],
                             n_inner, seed, outer_id=p)
                w[p] = m.weights
                s[p] = m.stderr
        weights[r] = w
        errs[r] = s
        nxt = int(rebalance_idx[r + 1]) if r + 1 < n_reb else L
        dp = bundle.states[:, nxt] - bundle.states[:, k]
        wealth += np.einsum("pn,pn->p", w, dp)
    payoff = payout.modified_batch(bundle.states[:, -1], grid)
    return HedgeReport(
        grid=grid, rebalance_times=times[rebalance_idx], weights=weights,
        stderr=errs, atom_idx=np.arange(grid.n_nodes), v0=v0, v0_se=v0_se,
        terminal_errors=payoff - wealth, payoff_std=float(payoff.std(ddof=1)),
        seed=seed,
        budget={"n_outer": n_outer, "n_inner": n_inner,
                "n_rebalance": int(n_reb), "integrand": integrand},
    )


# ---------------------------------------------------------------------------
# verdicts


@dataclass
class SupportVerdict:
    passed: bool
    worst_maturity: float | None
    worst_excess: float
    n_offending: int

    def __bool__(self):
        return self.passed


def support_check(measures: Sequence[PortfolioMeasure], t_values: Sequence[float],
                  window_end: float, abs_tol: float = 1e-6) -> SupportVerdict:
    """Check that hedge weight outside [t, window_end] is statistically zero.

    The left endpoint snaps down to the grid node carrying the curve segment
    that contains t; whatever sits at that node still describes live bonds.
    Atoms violating max(abs_tol, 3 se) are offenders.
    """
    worst_m, worst_x, n_off = None, 0.0, 0
    for m, t in zip(measures, t_values):
        grid = m.grid
        left = grid.nodes[grid.interval_of(min(t, grid.s_max))]
        mats = m.maturities()
        outside = (mats > window_end + 1e-12) | (mats < left - 1e-12)
        tol = np.maximum(abs_tol, 3.0 * m.stderr)
        bad = outside & (np.abs(m.weights) > tol)
        n_off += int(bad.sum())
        if np.any(outside):
            excess = np.abs(m.weights[outside]) - tol[outside]
            j = int(np.argmax(excess))
            if excess[j] > worst_x:
                worst_x = float(excess[j])
                worst_m = float(mats[outside][j])
    return SupportVerdict(n_off == 0, worst_m, worst_x, n_off)


@dataclass
class GapReport:
    max_component_z: float
    dual_gap: float
    dual_gap_se: float
    projected_gap: float
    projected_se: float
    passed: bool

    def __bool__(self):
        return self.passed


def uniqueness_gap(a: PortfolioMeasure, b: PortfolioMeasure, model=None,
                   t: float = 0.0, state: np.ndarray | None = None,
                   abs_tol: float = 1e-9) -> GapReport:
    """Distance between two strategies that should hedge the same claim.

    Componentwise the weights must agree within 3 combined standard errors;
    the dual-norm distance and the volatility-projected distance quantify
    the gap in the norms that matter for wealth.
    """
    grid = a.grid
    wa, wb = a.to_dense(), b.to_dense()
    sa = np.zeros(grid.n_nodes)
    np.add.at(sa, a.node_idx, a.stderr ** 2)
    sb = np.zeros(grid.n_nodes)
    np.add.at(sb, b.node_idx, b.stderr ** 2)
    se = np.sqrt(sa + sb)
    diff = wa - wb
    z = np.abs(diff) / np.maximum(3.0 * se, abs_tol)
    max_z = float(z.max())
    gap = dual_norm(diff, grid)
    if gap > 0:
        grad = grid.gram_solve(diff) / gap
        gap_se = float(np.sqrt(np.sum(grad ** 2 * se ** 2)))
    else:
        gap_se = 0.0
    if model is not None and state is not None:
        sig = model.sigma(t, np.asarray(state, dtype=float))
        proj = sig.T @ diff
        projected = float(proj @ proj)
        jac = 2.0 * sig @ proj
        projected_se = float(np.sqrt(np.sum(jac ** 2 * se ** 2)))
    else:
        projected, projected_se = 0.0, 0.0
    passed = bool(max_z <= 1.0 and gap <= 3.0 * gap_se + abs_tol
                  and projected <= 3.0 * projected_se + abs_tol)
    return GapReport(max_z, gap, gap_se, projected, projected_se, passed)
