"""Closed-form prices and deltas for bond calls under deterministic vol.

With deterministic proportional volatility the discounted prices of the
underlying bond and of the strike-paying bond are lognormal martingales, so
the call on their ratio has an exchange-option closed form.  These formulas
are the independent oracle used against the Monte Carlo hedging estimators.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import norm

from .errors import PreconditionError
from .models import GaussianVol

__all__ = ["call_price", "call_deltas", "total_volatility", "call_integrand"]


def _d12(p_under, p_numer, strike, vol):
    d1 = (np.log(p_under / (strike * p_numer)) + 0.5 * vol * vol) / vol
    return d1, d1 - vol


def call_price(p_under, p_numer, strike: float, vol: float):
    """E (X_1 - K X_2)^+ for lognormal martingales with relative total vol ``vol``.

    Works equally with discounted or spot bond prices as long as both legs
    use the same numeraire.
    """
    p_under = np.asarray(p_under, dtype=float)
    p_numer = np.asarray(p_numer, dtype=float)
    if vol < 0:
        raise PreconditionError("total volatility must be nonnegative")
    if vol == 0.0:
        return np.maximum(p_under - strike * p_numer, 0.0)
    d1, d2 = _d12(p_under, p_numer, strike, vol)
    return p_under * norm.cdf(d1) - strike * p_numer * norm.cdf(d2)


def call_deltas(p_under, p_numer, strike: float, vol: float):
    """Hedge weights (on the underlying bond, on the strike-maturity bond)."""
    p_under = np.asarray(p_under, dtype=float)
    p_numer = np.asarray(p_numer, dtype=float)
    if vol == 0.0:
        itm = (p_under >= strike * p_numer).astype(float)
        return itm, -strike * itm
    d1, d2 = _d12(p_under, p_numer, strike, vol)
    return norm.cdf(d1), -strike * norm.cdf(d2)


def total_volatility(model: GaussianVol, t: float, expiry: float,
                     underlying: float, n_quad: int = 257) -> float:
    """sqrt of int_t^T |I(u, T_1) - I(u, T)|^2 du for the model's term vols."""
    if expiry <= t:
        return 0.0
    us = np.linspace(t, expiry, n_quad)
    vals = np.empty(n_quad)
    for i, u in enumerate(us):
        diff = model.integrate_tau(u, u, underlying) - model.integrate_tau(u, u, expiry)
        vals[i] = float(diff @ diff)
    return float(np.sqrt(np.trapezoid(vals, us)))


def total_volatility_profile(model: GaussianVol, times, expiry: float,
                             underlying: float) -> np.ndarray:
    """Remaining total volatility at every grid time, one quadrature pass.

    Uses the time grid itself as the quadrature partition, so the profile is
    internally consistent across rebalance dates.
    """
    times = np.asarray(times, dtype=float)
    q = np.empty(times.size)
    for i, u in enumerate(times):
        diff = model.integrate_tau(float(u), float(u), underlying) \
            - model.integrate_tau(float(u), float(u), expiry)
        q[i] = float(diff @ diff)
    seg = 0.5 * (q[1:] + q[:-1]) * np.diff(times)
    remaining = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    return np.sqrt(np.maximum(remaining, 0.0))


def call_integrand(model: GaussianVol, t: float, states: np.ndarray,
                   expiry: float, underlying: float, strike: float,
                   vol: float | None = None) -> np.ndarray:
    """Exact martingale-representation integrand of the discounted call payoff.

    states: (.., n_nodes) discounted curves at time t.  Returns (.., N).
    """
    grid = model.grid
    i1 = grid.node_index(underlying)
    i0 = grid.node_index(expiry)
    if vol is None:
        vol = total_volatility(model, t, expiry, underlying)
    p1 = np.asarray(states, dtype=float)[..., i1]
    p0 = np.asarray(states, dtype=float)[..., i0]
    w1, w0 = call_deltas(p1, p0, strike, vol)
    load1 = model.integrate_tau(t, t, underlying)
    load0 = model.integrate_tau(t, t, expiry)
    return (w1 * p1)[..., None] * load1 + (w0 * p0)[..., None] * load0
