"""Volatility models and risk-neutral Monte Carlo of the discounted curve.

The state is the discounted bond curve on the maturity grid.  Both model
kinds factor the volatility operator as

    sigma(t, x) = diag(x) * A(t, x)

with ``A`` the matrix of proportional volatilities per (node, factor):

* ``GaussianVol``     A(t) deterministic, integral of factor term vols;
* ``LocalVol``        A(t, x) integrates a bounded function of the forward
                      curve implied by x against orthonormal factor shapes.

Rows of ``A`` for matured nodes (s_i <= t) are identically zero, so matured
discounted prices freeze bit-exactly.  For ``LocalVol`` the row at maturity s
only reads curve values at nodes <= s, which makes the pathwise Jacobian of
the simulation lower triangular: perturbing the curve beyond s never moves
the price at s.  That structural fact is what the hedging layer exploits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .curves import DiscountedCurve, ForwardCurve, MaturityGrid, sobolev_norm
from .errors import ConfigError, PreconditionError, SimulationRejected

__all__ = [
    "TauComponent",
    "GaussianVol",
    "FactorLoadings",
    "ConstKappa",
    "TanhKappa",
    "LocalVol",
    "PathBundle",
    "simulate",
    "simulate_forwards",
    "diagnostics",
    "catalog_model",
]


# ---------------------------------------------------------------------------
# deterministic term volatilities (Gaussian family)


@dataclass(frozen=True)
class TauComponent:
    """One factor's forward-rate volatility amp * exp(-decay * (u - t))."""

    amp: float
    decay: float = 0.0

    def __call__(self, t, u):
        u = np.asarray(u, dtype=float)
        return self.amp * np.exp(-self.decay * np.maximum(u - t, 0.0))


class GaussianVol:
    """Deterministic proportional volatility: sigma(t,x) = diag(x) * I(t).

    ``taus`` are callables tau_j(t, u); ``I(t)[i, j]`` integrates tau_j(t, .)
    from t to node s_i with the trapezoid rule on the node partition (exact
    for the piecewise-linear convention used throughout).
    """

    kind = "gaussian_hjm"
    state_dependent = False

    def __init__(self, grid: MaturityGrid, taus: Sequence[Callable], *,
                 scheme: str = "euler"):
        if not taus:
            raise ConfigError("gaussian model needs at least one factor")
        if scheme not in ("euler", "log_euler"):
            raise ConfigError(f"unknown stepping scheme {scheme!r}")
        self.grid = grid
        self.taus = list(taus)
        self.n_factors = len(self.taus)
        self.scheme = scheme

    def integrate_tau(self, t: float, a: float, b: float) -> np.ndarray:
        """(N,) vector of int_a^b tau_j(t, u) du, trapezoid on the node partition."""
        if b < a:
            raise PreconditionError("integration bounds reversed")
        nodes = self.grid.nodes
        inner = nodes[(nodes > a) & (nodes < b)]
        pts = np.concatenate(([a], inner, [b])) if b > a else np.array([a, a])
        vals = np.stack([tau(t, pts) for tau in self.taus], axis=1)
        seg = 0.5 * (vals[1:] + vals[:-1]) * np.diff(pts)[:, None]
        return seg.sum(axis=0)

    def integrated(self, t: float) -> np.ndarray:
        """I(t): (n_nodes, N) with I[i] = int_t^{s_i} tau(t, u) du, zero rows for s_i <= t."""
        nodes = self.grid.nodes
        live = nodes > t
        out = np.zeros((self.grid.n_nodes, self.n_factors))
        if not np.any(live):
            return out
        pts = np.concatenate(([t], nodes[live]))
        vals = np.stack([tau(t, pts) for tau in self.taus], axis=1)
        seg = 0.5 * (vals[1:] + vals[:-1]) * np.diff(pts)[:, None]
        out[live] = np.cumsum(seg, axis=0)
        return out

    def tau_values(self, t: float) -> np.ndarray:
        """tau_j(t, s_i) on the nodes, zero rows for s_i <= t."""
        nodes = self.grid.nodes
        vals = np.stack([tau(t, nodes) for tau in self.taus], axis=1)
        vals[nodes <= t] = 0.0
        return vals

    def prop_matrix(self, t: float, x: np.ndarray | None = None) -> np.ndarray:
        return self.integrated(t)

    def sigma(self, t: float, x: np.ndarray) -> np.ndarray:
        """(.., n_nodes, N) volatility operator rows for state(s) x."""
        x = np.asarray(x, dtype=float)
        return x[..., :, None] * self.integrated(t)

    # first-variation step pieces -----------------------------------------

    def step_context(self, t: float, x: np.ndarray, dw: np.ndarray) -> dict:
        a = np.einsum("ik,...k->...i", self.integrated(t), dw)
        return {"a": a}

    def variation_apply(self, ctx: dict, y: np.ndarray) -> np.ndarray:
        """(grad sigma [y]) . dw for a batch of directions y (.., n_nodes, n_cols)."""
        return ctx["a"][..., :, None] * y

    def variation_pullback(self, ctx: dict, g: np.ndarray) -> np.ndarray:
        """Transpose action on covectors g (.., n_nodes)."""
        return ctx["a"] * g


# ---------------------------------------------------------------------------
# factor loadings and local (state-dependent) volatility


@dataclass(eq=False)
class FactorLoadings:
    """Square-summable factor scales with shapes orthonormal under grid quadrature."""

    lambdas: np.ndarray
    basis: np.ndarray  # (N, n_nodes) node values

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.basis = np.asarray(self.basis, dtype=float)
        if np.any(self.lambdas <= 0) or np.any(np.diff(self.lambdas) > 0):
            raise ConfigError("factor scales must be positive and non-increasing")

    @classmethod
    def build(cls, grid: MaturityGrid, n_factors: int, *, lambda1: float = 1.0,
              decay: float = 1.0) -> "FactorLoadings":
        """Cosine shapes re-orthonormalized under the grid's trapezoid quadrature."""
        if decay <= 0.5:
            raise ConfigError("scale decay exponent must exceed 1/2")
        s = grid.nodes
        span = grid.s_max
        seeds = [np.ones_like(s) / math.sqrt(span)]
        for k in range(1, n_factors):
            seeds.append(math.sqrt(2.0 / span) * np.cos(k * math.pi * s / span))
        q = np.stack(seeds)
        wq = grid.trapz_weights
        # modified Gram-Schmidt (twice, for orthogonality to near machine precision)
        for _ in range(2):
            for i in range(n_factors):
                for j in range(i):
                    q[i] -= np.dot(q[i] * wq, q[j]) * q[j]
                nrm = math.sqrt(np.dot(q[i] * wq, q[i]))
                if nrm < 1e-12:
                    raise ConfigError("factor shapes degenerate on this grid")
                q[i] /= nrm
        lambdas = lambda1 * (1.0 + np.arange(n_factors)) ** (-decay)
        out = cls(lambdas, q)
        out.check_orthonormal(wq)
        return out

    def check_orthonormal(self, quad_weights: np.ndarray, tol: float = 1e-8) -> None:
        g = (self.basis * quad_weights) @ self.basis.T
        if np.max(np.abs(g - np.eye(len(self.lambdas)))) > tol:
            raise ConfigError("factor shapes are not orthonormal under grid quadrature")

    @property
    def n_factors(self) -> int:
        return len(self.lambdas)


class ConstKappa:
    """Constant forward-rate response."""

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, f):
        return np.full_like(np.asarray(f, dtype=float), self.value)

    def deriv(self, f):
        return np.zeros_like(np.asarray(f, dtype=float))

    @property
    def bound(self):
        return abs(self.value)


class TanhKappa:
    """Bounded Lipschitz response scale * ref * tanh(f / ref)."""

    def __init__(self, scale: float = 0.1, ref: float = 0.1):
        self.scale = float(scale)
        self.ref = float(ref)

    def __call__(self, f):
        return self.scale * self.ref * np.tanh(np.asarray(f, dtype=float) / self.ref)

    def deriv(self, f):
        c = np.cosh(np.asarray(f, dtype=float) / self.ref)
        return self.scale / (c * c)

    @property
    def bound(self):
        return self.scale * self.ref


class LocalVol:
    """State-dependent volatility reading the implied forward curve locally.

    Row for maturity s integrates kappa(forward(u)) against each factor shape
    over [t, s], so it only depends on curve values at maturities <= s.
    """

    kind = "local_hjm"
    state_dependent = True
    scheme = "log_euler"

    def __init__(self, grid: MaturityGrid, loadings: FactorLoadings, kappa):
        if loadings.basis.shape[1] != grid.n_nodes:
            raise ConfigError("loadings were built for a different grid")
        self.grid = grid
        self.loadings = loadings
        self.kappa = kappa
        self.n_factors = loadings.n_factors
        self._deltas = np.diff(grid.nodes)

    # geometry of the clipped shape integrals ------------------------------

    def shape_integrals(self, t: float) -> np.ndarray:
        """(n_intervals, N) integrals of each shape over interval_m intersect [t, inf).

        The shapes are integrated as piecewise-linear interpolants of their
        node values (trapezoid per interval, exact for the interpolant).
        """
        nodes = self.grid.nodes
        psi = self.loadings.basis  # (N, n_nodes)
        full = 0.5 * (psi[:, :-1] + psi[:, 1:]) * self._deltas  # (N, n_intervals)
        out = full.T.copy()
        m_t = self.grid.interval_of(t) if t < self.grid.s_max else self.grid.n_nodes - 2
        out[:m_t] = 0.0
        lo, hi = nodes[m_t], nodes[m_t + 1]
        if t > lo:
            frac = (t - lo) / (hi - lo)
            psi_t = psi[:, m_t] * (1 - frac) + psi[:, m_t + 1] * frac
            out[m_t] = 0.5 * (psi_t + psi[:, m_t + 1]) * (hi - t)
        return out

    def implied_forwards(self, x: np.ndarray) -> np.ndarray:
        """Piecewise-constant forwards per interval from discounted values (batch-safe)."""
        x = np.asarray(x, dtype=float)
        logx = np.log(x)
        return -(logx[..., 1:] - logx[..., :-1]) / self._deltas

    def prop_matrix(self, t: float, x: np.ndarray) -> np.ndarray:
        """A(t, x): (.., n_nodes, N); row i = lambda_k int_t^{s_i} kappa(f) psi_k."""
        x = np.asarray(x, dtype=float)
        f = self.implied_forwards(x)                      # (.., n_intervals)
        w = self.shape_integrals(t)                       # (n_intervals, N)
        kf = self.kappa(f)                                # (.., n_intervals)
        seg = kf[..., :, None] * w                        # (.., n_intervals, N)
        cum = np.cumsum(seg, axis=-2)
        zeros = np.zeros(seg.shape[:-2] + (1, self.n_factors))
        a = np.concatenate([zeros, cum], axis=-2)         # (.., n_nodes, N)
        a = a * self.loadings.lambdas
        a[..., self.grid.nodes <= t, :] = 0.0
        return a

    def sigma(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x[..., :, None] * self.prop_matrix(t, x)

    # first-variation step pieces -----------------------------------------

    def step_context(self, t: float, x: np.ndarray, dw: np.ndarray) -> dict:
        """Everything needed to apply the step's variation map and its transpose."""
        x = np.asarray(x, dtype=float)
        a_mat = self.prop_matrix(t, x)
        a = np.einsum("...ik,...k->...i", a_mat, dw)
        w = self.shape_integrals(t)
        b = np.einsum("mk,...k->...m", w * self.loadings.lambdas, dw)
        f = self.implied_forwards(x)
        q = self.kappa.deriv(f) * b / self._deltas        # (.., n_intervals)
        live = self.grid.nodes > t
        return {"a": a, "q": q, "x": x, "live": live}

    def variation_apply(self, ctx: dict, y: np.ndarray) -> np.ndarray:
        """(grad sigma [y]) . dw columnwise; y has shape (.., n_nodes, n_cols)."""
        a, q, x = ctx["a"], ctx["q"], ctx["x"]
        z = y / x[..., :, None]
        c = q[..., :, None] * (z[..., :-1, :] - z[..., 1:, :])
        cum = np.cumsum(c, axis=-2)
        zeros = np.zeros(c.shape[:-2] + (1,) + c.shape[-1:])
        cum = np.concatenate([zeros, cum], axis=-2)
        out = a[..., :, None] * y + x[..., :, None] * cum
        out[..., ~ctx["live"], :] = 0.0
        return out

    def variation_pullback(self, ctx: dict, g: np.ndarray) -> np.ndarray:
        """Transpose of variation_apply on covectors g (.., n_nodes)."""
        a, q, x = ctx["a"], ctx["q"], ctx["x"]
        gm = np.where(ctx["live"], g, 0.0)
        gx = gm * x
        tail = np.cumsum(gx[..., ::-1], axis=-1)[..., ::-1]   # tail[i] = sum_{j >= i} gx_j
        s = tail[..., 1:]                                      # S_m = sum_{i > m} gx_i
        qs = q * s                                             # (.., n_intervals)
        out = a * gm
        out[..., :-1] += qs / x[..., :-1]
        out[..., 1:] -= qs / x[..., 1:]
        return out


# ---------------------------------------------------------------------------
# simulation


@dataclass(eq=False)
class PathBundle:
    """Simulated discounted-curve trajectories with their driving increments."""

    grid: MaturityGrid
    times: np.ndarray
    states: np.ndarray        # (n_paths, n_steps + 1, n_nodes)
    increments: np.ndarray    # (n_paths, n_steps, n_factors)
    seed: int
    flagged: np.ndarray       # paths that breached positivity (bool per path)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    def state(self, path: int, step: int) -> DiscountedCurve:
        return DiscountedCurve(self.grid, self.states[path, step],
                               as_of=float(self.times[step]))

    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]


def _check_times(grid: MaturityGrid, times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
        raise PreconditionError("time grid must be strictly increasing with >= 2 points")
    if times[0] < 0 or times[-1] > grid.s_max:
        raise PreconditionError("time grid must lie inside the maturity grid")
    return times


def step_states(model, t: float, x: np.ndarray, dw: np.ndarray, dt: float
                ) -> tuple[np.ndarray, np.ndarray]:
    """One stepping-scheme update for a batch of states; returns (next, breached)."""
    a_mat = model.prop_matrix(t, x)
    if model.state_dependent:
        load = np.einsum("pik,pk->pi", a_mat, dw)
    else:
        load = np.einsum("ik,pk->pi", a_mat, dw)
    if model.scheme == "euler":
        nxt = x * (1.0 + load)
        bad = np.any(nxt <= 0, axis=-1)
        if np.any(bad):
            nxt[bad] = x[bad]  # freeze breached paths; callers count them
        return nxt, bad
    var = np.einsum("...ik,...ik->...i", a_mat, a_mat) * dt
    return x * np.exp(load - 0.5 * var), np.zeros(x.shape[0], dtype=bool)


def simulate(model, p0: np.ndarray | DiscountedCurve, times, n_paths: int,
             seed: int, *, stream_tag: int = rngmod.OUTER,
             increments: np.ndarray | None = None,
             max_flagged_frac: float = 1e-3) -> PathBundle:
    """Risk-neutral paths of the discounted curve.

    Gaussian models step with Euler-Maruyama; local models take the exact
    exponential step for the frozen proportional row, which preserves
    positivity and the per-step martingale property.  Identical
    (model, p0, times, n_paths, seed) always produce bit-identical bundles.
    """
    grid = model.grid
    times = _check_times(grid, times)
    x0 = p0.values if isinstance(p0, DiscountedCurve) else np.asarray(p0, dtype=float)
    if np.any(x0 <= 0):
        raise PreconditionError("initial discounted curve must be positive")
    L = times.size - 1
    dts = np.diff(times)
    if increments is None:
        increments = rngmod.bundle_increments(seed, stream_tag, n_paths, L,
                                              model.n_factors, 1.0)
        increments *= np.sqrt(dts)[None, :, None]
    states = np.empty((n_paths, L + 1, grid.n_nodes))
    states[:, 0] = x0
    flagged = np.zeros(n_paths, dtype=bool)
    for ell in range(L):
        states[:, ell + 1], bad = step_states(model, float(times[ell]),
                                              states[:, ell], increments[:, ell],
                                              float(dts[ell]))
        flagged |= bad
    frac = flagged.mean() if n_paths else 0.0
    if frac > max_flagged_frac:
        raise SimulationRejected(
            f"{int(flagged.sum())} of {n_paths} paths breached positivity "
            f"({100 * frac:.3f}% > {100 * max_flagged_frac:.3f}%)")
    return PathBundle(grid, times, states, increments, seed, flagged)


@dataclass(eq=False)
class ForwardBundle:
    grid: MaturityGrid
    times: np.ndarray
    rates: np.ndarray         # (n_paths, n_steps + 1, n_nodes)
    increments: np.ndarray
    seed: int


def simulate_forwards(model: GaussianVol, f0: np.ndarray | ForwardCurve, times,
                      n_paths: int, seed: int, *,
                      stream_tag: int = rngmod.OUTER,
                      increments: np.ndarray | None = None) -> ForwardBundle:
    """Forward-rate paths under the no-arbitrage drift for deterministic taus.

    Shares the increment streams of :func:`simulate`, so the two routes can
    be compared pathwise on the same Brownian draws.
    """
    if model.state_dependent:
        raise PreconditionError("forward-rate simulation requires a deterministic-vol model")
    grid = model.grid
    times = _check_times(grid, times)
    r0 = f0.values if isinstance(f0, ForwardCurve) else np.asarray(f0, dtype=float)
    L = times.size - 1
    dts = np.diff(times)
    if increments is None:
        increments = rngmod.bundle_increments(seed, stream_tag, n_paths, L,
                                              model.n_factors, 1.0)
        increments *= np.sqrt(dts)[None, :, None]
    rates = np.empty((n_paths, L + 1, grid.n_nodes))
    rates[:, 0] = r0
    for ell in range(L):
        t = float(times[ell])
        tau_vals = model.tau_values(t)              # (n_nodes, N), masked
        i_mat = model.integrated(t)                 # (n_nodes, N), masked
        drift = np.sum(tau_vals * i_mat, axis=1)    # HJM no-arbitrage drift
        shock = np.einsum("ik,pk->pi", tau_vals, increments[:, ell])
        rates[:, ell + 1] = rates[:, ell] + drift * dts[ell] - shock
    return ForwardBundle(grid, times, rates, increments, seed)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class DiagnosticsReport:
    lipschitz_est: float
    locality_pass: bool
    locality_worst: float
    min_singular: dict
    integrability_mean: float

    def min_singular_value(self, t: float) -> float:
        return self.min_singular[t]


def hs_norm(grid: MaturityGrid, op: np.ndarray) -> float:
    """Hilbert-Schmidt norm of a (n_nodes, N) operator into the first-difference space."""
    return float(np.sqrt(sum(sobolev_norm(op[:, k], grid, "f1v") ** 2
                             for k in range(op.shape[1]))))


def _sample_states(grid: MaturityGrid, base: np.ndarray, g: np.random.Generator,
                   n: int, spread: float = 0.3) -> np.ndarray:
    """Random positive curves around ``base`` with smooth lognormal tilts."""
    out = np.empty((n, grid.n_nodes))
    s = grid.nodes
    for i in range(n):
        a = g.normal(0.0, spread, size=3)
        b = g.uniform(0.05, 0.5, size=3)
        tilt = sum(ai * np.exp(-bi * s) for ai, bi in zip(a, b))
        out[i] = base * np.exp(tilt - tilt[0])
    return out


def diagnostics(model, base_state: np.ndarray, *, t_list: Sequence[float] = (0.0,),
                seed: int = 0, n_pairs: int = 120) -> DiagnosticsReport:
    """Structural checks: Lipschitz estimate, locality, restricted rank.

    ``lipschitz_est`` is the max ratio of operator HS-distance to state
    distance over random pairs (both distant pairs and local directional
    bumps).  ``min_singular`` maps each t to the smallest singular value of
    the live-node volatility rows at sampled states.  ``integrability_mean``
    is the sample mean of the curve-regularity integrand used as a model
    sanity metric, not asserted against anything.
    """
    grid = model.grid
    g = rngmod.stream(seed, rngmod.SAMPLER)
    states = _sample_states(grid, np.asarray(base_state, dtype=float), g, n_pairs)
    lip = 0.0
    for t in t_list:
        for i in range(0, n_pairs - 1, 2):
            x, y = states[i], states[i + 1]
            num = hs_norm(grid, model.sigma(t, x) - model.sigma(t, y))
            den = sobolev_norm(x - y, grid, "f1v")
            if den > 1e-14:
                lip = max(lip, num / den)
            h = 1e-4 * states[i] * g.standard_normal(grid.n_nodes)
            num = hs_norm(grid, model.sigma(t, x + h) - model.sigma(t, x - h)) / 2
            den = sobolev_norm(h, grid, "f1v")
            if den > 1e-14:
                lip = max(lip, num / den)

    worst = 0.0
    for t in t_list:
        x = states[0]
        for s_idx in range(grid.n_nodes):
            s = grid.nodes[s_idx]
            if s <= t:
                continue
            row = model.sigma(t, x)[s_idx]
            pert = x.copy()
            # nodes whose interpolation support lies entirely outside [t, s]
            outside = np.array([
                (j + 1 < grid.n_nodes and grid.nodes[j + 1] <= t)
                or (j - 1 >= 0 and grid.nodes[j - 1] >= s and grid.nodes[j] > s)
                for j in range(grid.n_nodes)])
            pert[outside] *= 1.5
            row2 = model.sigma(t, pert)[s_idx]
            worst = max(worst, float(np.max(np.abs(row2 - row))) if row.size else 0.0)

    minsv = {}
    for t in t_list:
        vals = []
        live = grid.nodes > t
        for x in states[:8]:
            sig = model.sigma(t, x)[live]
            vals.append(np.linalg.svd(sig, compute_uv=False)[-1])
        minsv[t] = float(min(vals))

    # curve-regularity integrand sampled at the states (reported only)
    integ = []
    for t in t_list:
        for x in states[:8]:
            dc = DiscountedCurve(grid, x, as_of=t)
            att = dc.value_at(t)
            m = grid.interval_of(t)
            slope = (x[m + 1] - x[m]) / (grid.nodes[m + 1] - grid.nodes[m])
            hsn = hs_norm(grid, model.sigma(t, x))
            integ.append(abs(slope) * sobolev_norm(x, grid, "f2w") / att ** 2
                         + (1.0 + att ** -2) * hsn ** 2)

    return DiagnosticsReport(
        lipschitz_est=float(lip),
        locality_pass=bool(worst < 1e-12),
        locality_worst=float(worst),
        min_singular=minsv,
        integrability_mean=float(np.mean(integ)),
    )


# ---------------------------------------------------------------------------
# catalog


def catalog_model(name: str, grid: MaturityGrid):
    """The fixed model catalog exercised by the verification suite."""
    if name == "ho_lee":
        return GaussianVol(grid, [TauComponent(0.01, 0.0)])
    if name == "gauss3":
        return GaussianVol(grid, [TauComponent(0.008, 0.0),
                                  TauComponent(0.006, 0.25),
                                  TauComponent(0.004, 0.5)])
    if name == "local10":
        return LocalVol(grid, FactorLoadings.build(grid, 10), TanhKappa(0.1, 0.1))
    raise ConfigError(f"unknown catalog model {name!r}")
