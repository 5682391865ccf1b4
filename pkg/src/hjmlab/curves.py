"""Discrete curve spaces, conversions and portfolio pairings.

Conventions used throughout the package:

* maturities and times are in years, rates are per-year decimals;
* a curve is a vector of values on the nodes of a ``MaturityGrid``;
* forward rates are piecewise constant between nodes, so the integral of a
  forward curve over whole intervals is the left-endpoint sum and the
  conversions bonds <-> forwards round-trip exactly at the nodes;
* beyond the last node every curve is pinned to zero at an implicit ghost
  node ``s_M + tail`` (a bond that never matures is worthless), which makes
  the first-difference Sobolev norm positive definite.

The two weighted norms are the discrete analogues of first- and
second-derivative weighted L2 norms with weights ``v`` and ``w``.  Their
finiteness constants (``c_v``, ``c_w``, ``c_vw``) are computed numerically at
grid construction and double as the bounds in the evaluation and embedding
properties exercised by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import integrate
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, PreconditionError

__all__ = [
    "MaturityGrid",
    "ForwardCurve",
    "BondCurve",
    "DiscountedCurve",
    "PortfolioMeasure",
    "power_weight",
    "weight_constants",
    "sobolev_norm",
    "dual_norm",
    "deriv_dual_norm",
    "bonds_from_forwards",
    "forwards_from_bonds",
    "yield_curve",
    "split_numeraire",
    "initial_discounted",
    "pair",
]


def power_weight(p: float) -> Callable[[np.ndarray], np.ndarray]:
    """Weight s -> (1+s)**p, the default polynomial family."""

    def w(s):
        return (1.0 + np.asarray(s, dtype=float)) ** p

    w.power = p  # type: ignore[attr-defined]
    return w


def _improper_integral(fn: Callable[[np.ndarray], np.ndarray], start: float,
                       name: str) -> float:
    """Integrate fn on [start, inf), rejecting divergent configurations.

    Partial integrals over geometrically growing windows must decay; if the
    window contributions fail to shrink the partial sums are not Cauchy and
    the configuration is rejected before the adaptive rule is trusted.
    """
    uppers = start + 10.0 * 2.0 ** np.arange(0, 14)
    partial = 0.0
    lo = start
    pieces = []
    for hi in uppers:
        piece, _ = integrate.quad(fn, lo, hi, limit=200)
        partial += piece
        pieces.append(abs(piece))
        lo = hi
    scale = max(1.0, abs(partial))
    if pieces[-1] > 1e-12 * scale and pieces[-1] > 0.9 * pieces[-3]:
        raise ConfigError(f"weight integral {name} does not converge")
    whole, _ = integrate.quad(fn, start, np.inf, limit=400)
    return float(whole)


def weight_constants(grid: "MaturityGrid") -> tuple[float, float, float]:
    """Numerical values of the three weight integrals (c_v, c_w, c_vw).

    c_v  = int 1/v,  c_w = int (1+u^2)/w,  c_vw = int_0^inf int_0^s v(u)/w(s) du ds.
    Raises ConfigError when any of them diverges for the configured weights.
    """
    v, w = grid.weight_v, grid.weight_w
    c_v = _improper_integral(lambda s: 1.0 / v(s), 0.0, "c_v")
    c_w = _improper_integral(lambda u: (1.0 + u * u) / w(u), 0.0, "c_w")

    def inner(s):  # int_0^s v(u) du, a finite integral
        val, _ = integrate.quad(v, 0.0, s, limit=200)
        return val

    c_vw = _improper_integral(np.vectorize(lambda s: inner(s) / w(s)), 0.0, "c_vw")
    return float(c_v), float(c_w), float(c_vw)


@dataclass(eq=False)
class MaturityGrid:
    """Strictly increasing maturity nodes s_0 = 0 < ... < s_M plus weights.

    Immutable after construction (treat all arrays as read-only).
    """

    nodes: np.ndarray
    weight_v: Callable[[np.ndarray], np.ndarray] = field(default_factory=lambda: power_weight(2.0))
    weight_w: Callable[[np.ndarray], np.ndarray] = field(default_factory=lambda: power_weight(5.0))
    tail: float = 10.0

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim != 1 or self.nodes.size < 3:
            raise ConfigError("grid needs at least 3 nodes")
        if self.nodes[0] != 0.0:
            raise ConfigError("first node must be 0")
        if np.any(np.diff(self.nodes) <= 0):
            raise ConfigError("nodes must be strictly increasing")
        if self.tail <= 0:
            raise ConfigError("ghost tail must be positive")
        self.constants = weight_constants(self)  # rejects divergent weights

    @classmethod
    def uniform(cls, s_max: float, n_intervals: int, *, tail: float = 10.0,
                v_power: float = 2.0, w_power: float = 5.0) -> "MaturityGrid":
        return cls(np.linspace(0.0, s_max, n_intervals + 1),
                   power_weight(v_power), power_weight(w_power), tail)

    # -- cached geometry --------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def s_max(self) -> float:
        return float(self.nodes[-1])

    @cached_property
    def ext_nodes(self) -> np.ndarray:
        """Nodes plus the ghost node where curves are pinned to zero."""
        return np.append(self.nodes, self.nodes[-1] + self.tail)

    @cached_property
    def ext_deltas(self) -> np.ndarray:
        return np.diff(self.ext_nodes)

    @cached_property
    def ext_mids(self) -> np.ndarray:
        return 0.5 * (self.ext_nodes[:-1] + self.ext_nodes[1:])

    @cached_property
    def trapz_weights(self) -> np.ndarray:
        """Trapezoid quadrature weights on the nodes (used for basis inner products)."""
        w = np.zeros(self.n_nodes)
        d = np.diff(self.nodes)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
        return w

    @cached_property
    def _grad_gram(self):
        """Cholesky factor of the first-difference Gram matrix D'VD.

        D maps node values to first differences on all intervals including
        the ghost interval; V holds v(midpoint) * length quadrature weights.
        """
        n = self.n_nodes
        deltas = self.ext_deltas
        d = np.zeros((n, n))  # one row per interval, ghost interval included
        for i in range(n - 1):
            d[i, i] = -1.0 / deltas[i]
            d[i, i + 1] = 1.0 / deltas[i]
        d[n - 1, n - 1] = -1.0 / deltas[n - 1]  # ghost interval, value 0 at ghost node
        vq = self.weight_v(self.ext_mids) * deltas
        gram = d.T @ (vq[:, None] * d)
        return cho_factor(gram)

    def gram_solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self._grad_gram, rhs)

    # -- lookups ----------------------------------------------------------

    def node_index(self, s: float) -> int:
        """Index of the node equal to s; PreconditionError when s is off-grid."""
        i = int(np.argmin(np.abs(self.nodes - s)))
        if abs(self.nodes[i] - s) > 1e-9:
            raise PreconditionError(f"maturity {s} is not a grid node")
        return i

    def interval_of(self, t: float) -> int:
        """Index i with nodes[i] <= t < nodes[i+1] (last interval at the right end)."""
        if t < 0 or t > self.s_max:
            raise PreconditionError(f"time {t} outside grid range [0, {self.s_max}]")
        i = int(np.searchsorted(self.nodes, t, side="right") - 1)
        return min(i, self.n_nodes - 2)


# ---------------------------------------------------------------------------
# curve containers


def _interp_linear(grid: MaturityGrid, values: np.ndarray, s: float) -> float:
    return float(np.interp(s, grid.nodes, values))


def _interp_loglinear(grid: MaturityGrid, values: np.ndarray, s: float) -> float:
    if np.any(values <= 0):
        raise PreconditionError("log-linear interpolation needs positive values")
    return float(np.exp(np.interp(s, grid.nodes, np.log(values))))


@dataclass(eq=False)
class ForwardCurve:
    """Instantaneous forward rates f_t(s_i), piecewise constant between nodes."""

    grid: MaturityGrid
    values: np.ndarray
    as_of: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_nodes,):
            raise PreconditionError("forward values must match the grid")
        if not np.all(np.isfinite(self.values)):
            raise PreconditionError("forward values must be finite")

    def rate_at(self, u: float) -> float:
        """Piecewise-constant value at u (flat beyond the last node)."""
        if u >= self.grid.s_max:
            return float(self.values[-1])
        return float(self.values[self.grid.interval_of(u)])


@dataclass(eq=False)
class BondCurve:
    """Zero-coupon bond prices P_t(s_i); P_t(t) = 1."""

    grid: MaturityGrid
    values: np.ndarray
    as_of: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(self.values <= 0):
            raise PreconditionError("bond prices must be positive")

    def value_at(self, s: float) -> float:
        return _interp_loglinear(self.grid, self.values, s)


@dataclass(eq=False)
class DiscountedCurve:
    """Numeraire-discounted bond prices; the model state.

    Nodes with s_i <= as_of hold their frozen (matured) values, equal to the
    inverse bank account at the node's own maturity.
    """

    grid: MaturityGrid
    values: np.ndarray
    as_of: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_nodes,):
            raise PreconditionError("discounted values must match the grid")
        if np.any(self.values <= 0):
            raise PreconditionError("discounted prices must be positive")

    def value_at(self, s: float) -> float:
        return _interp_loglinear(self.grid, self.values, s)

    def numeraire(self) -> float:
        """Bank account value B_t = 1 / value_at(t)."""
        return 1.0 / self.value_at(self.as_of)


# ---------------------------------------------------------------------------
# norms


def sobolev_norm(x, grid: MaturityGrid | None = None, space: str = "f1v") -> float:
    """Weighted Sobolev norm of a curve given by node values.

    ``f1v`` uses first differences against weight v, ``f2w`` second
    differences against weight w.  Both append the ghost node (value 0), and
    ``f2w`` additionally pins the slope to zero beyond the ghost node so the
    norm vanishes only for the zero curve.
    """
    if grid is None:
        grid = x.grid
        x = x.values
    x = np.asarray(x, dtype=float)
    xe = np.append(x, 0.0)
    deltas = grid.ext_deltas
    d1 = np.diff(xe) / deltas  # slope on each interval, at the midpoints
    if space == "f1v":
        vq = grid.weight_v(grid.ext_mids)
        return float(np.sqrt(np.sum(d1 * d1 * vq * deltas)))
    if space == "f2w":
        if grid.n_nodes < 3:
            raise PreconditionError("f2w norm needs at least 3 nodes")
        mids = grid.ext_mids
        # second differences at interior nodes s_1..s_M
        gaps = np.diff(mids)
        d2 = np.diff(d1) / gaps
        pts = grid.ext_nodes[1:-1]
        total = np.sum(d2 * d2 * grid.weight_w(pts) * gaps)
        # tail kink: the slope must return to zero beyond the ghost node
        tail_gap = grid.tail
        d2_tail = (0.0 - d1[-1]) / tail_gap
        total += d2_tail * d2_tail * grid.weight_w(grid.ext_nodes[-1]) * tail_gap
        return float(np.sqrt(total))
    raise PreconditionError(f"unknown space {space!r}")


def dual_norm(weights: np.ndarray, grid: MaturityGrid) -> float:
    """Norm of a node-supported functional in the dual of the first-difference space."""
    w = np.asarray(weights, dtype=float)
    return float(np.sqrt(w @ grid.gram_solve(w)))


def deriv_dual_norm(grid: MaturityGrid, node: int) -> float:
    """Dual norm of the discrete point-differentiation functional at a node.

    Uses the forward difference across the interval starting at ``node``.
    This quantity grows without bound under grid refinement, which is the
    reason strategies are restricted to the first-difference dual space.
    """
    n = grid.n_nodes
    if node >= n - 1:
        raise PreconditionError("need a node with an interval to its right")
    ell = np.zeros(n)
    h = grid.nodes[node + 1] - grid.nodes[node]
    ell[node] = -1.0 / h
    ell[node + 1] = 1.0 / h
    return dual_norm(ell, grid)


# ---------------------------------------------------------------------------
# conversions


def _integral_pc(grid: MaturityGrid, f_values: np.ndarray, a: float, b: float) -> float:
    """Integral of the piecewise-constant forward interpolant from a to b (a <= b)."""
    if a > b:
        raise PreconditionError("integration bounds reversed")
    nodes = grid.nodes
    total = 0.0
    pos = a
    while pos < b - 1e-15:
        if pos >= nodes[-1]:  # flat extrapolation beyond the last node
            total += f_values[-1] * (b - pos)
            break
        i = grid.interval_of(pos)
        upper = min(nodes[i + 1], b)
        total += f_values[i] * (upper - pos)
        pos = upper
    return total


def bonds_from_forwards(f: ForwardCurve, t: float) -> BondCurve:
    """Bond curve P_t(s) = exp(-int_t^s f) under the piecewise-constant convention.

    Exact inverse of :func:`forwards_from_bonds` at the nodes.  For s < t the
    formula extension exp(+int_s^t f) is returned.
    """
    grid = f.grid
    if t < 0 or t > grid.s_max:
        raise PreconditionError(f"valuation time {t} outside grid")
    vals = np.empty(grid.n_nodes)
    for i, s in enumerate(grid.nodes):
        if s >= t:
            vals[i] = np.exp(-_integral_pc(grid, f.values, t, s))
        else:
            vals[i] = np.exp(_integral_pc(grid, f.values, s, t))
    return BondCurve(grid, vals, as_of=t)


def forwards_from_bonds(p: BondCurve, t: float | None = None) -> ForwardCurve:
    """Forward rates from log-price differences; flat at the last node."""
    grid = p.grid
    if np.any(p.values <= 0):
        raise PreconditionError("bond prices must be positive")
    logp = np.log(p.values)
    f = np.empty(grid.n_nodes)
    f[:-1] = -np.diff(logp) / np.diff(grid.nodes)
    f[-1] = f[-2]
    return ForwardCurve(grid, f, as_of=p.as_of if t is None else t)


def yield_curve(f: ForwardCurve, t: float, T: float) -> float:
    """Average forward rate over [t, T], trapezoid rule on the node values.

    The integrand here is the piecewise-linear interpolant of the node
    values, which is a descriptive statistic; pricing uses the
    piecewise-constant convention instead.
    """
    if T <= t:
        raise PreconditionError("yield needs T > t")
    grid, vals = f.grid, f.values

    def lin(u):
        return np.interp(u, grid.nodes, vals)

    knots = grid.nodes[(grid.nodes > t) & (grid.nodes < T)]
    pts = np.concatenate(([t], knots, [T]))
    return float(np.trapezoid(lin(pts), pts) / (T - t))


def split_numeraire(pt: DiscountedCurve) -> tuple[float, BondCurve]:
    """Recover (bank account B_t, bond curve P_t) from the discounted state.

    P_t(s) = discounted(s) / discounted(t) for every node; under the frozen
    convention this equals B_s^{-1} B_t for matured nodes as well.
    """
    att = pt.value_at(pt.as_of)
    if att <= 0:
        raise PreconditionError("discounted curve must be positive at the valuation time")
    bank = 1.0 / att
    return bank, BondCurve(pt.grid, pt.values * bank, as_of=pt.as_of)


def initial_discounted(f0: ForwardCurve) -> DiscountedCurve:
    """Time-zero discounted state from an initial forward curve (B_0 = 1)."""
    p0 = bonds_from_forwards(f0, 0.0)
    return DiscountedCurve(f0.grid, p0.values, as_of=0.0)


# ---------------------------------------------------------------------------
# portfolio measures


@dataclass(eq=False)
class PortfolioMeasure:
    """Atomic measure sum_i c_i delta_{s_i} supported on grid nodes.

    ``stderr`` carries per-atom Monte Carlo standard errors when the weights
    are estimated (zeros when they are exact).
    """

    grid: MaturityGrid
    node_idx: np.ndarray
    weights: np.ndarray
    stderr: np.ndarray | None = None

    def __post_init__(self):
        self.node_idx = np.asarray(self.node_idx, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.node_idx.shape != self.weights.shape:
            raise PreconditionError("atom indices and weights must align")
        if self.node_idx.size and (self.node_idx.min() < 0
                                   or self.node_idx.max() >= self.grid.n_nodes):
            raise PreconditionError("atom off-grid")
        if self.stderr is None:
            self.stderr = np.zeros_like(self.weights)
        else:
            self.stderr = np.asarray(self.stderr, dtype=float)

    @classmethod
    def from_atoms(cls, grid: MaturityGrid,
                   atoms: Iterable[tuple[float, float]]) -> "PortfolioMeasure":
        idx, wts = [], []
        for s, c in atoms:
            idx.append(grid.node_index(s))
            wts.append(float(c))
        return cls(grid, np.array(idx, dtype=int), np.array(wts))

    @classmethod
    def dense(cls, grid: MaturityGrid, weights: np.ndarray,
              stderr: np.ndarray | None = None) -> "PortfolioMeasure":
        return cls(grid, np.arange(grid.n_nodes), weights, stderr)

    def to_dense(self) -> np.ndarray:
        w = np.zeros(self.grid.n_nodes)
        np.add.at(w, self.node_idx, self.weights)
        return w

    def maturities(self) -> np.ndarray:
        return self.grid.nodes[self.node_idx]

    @property
    def support_interval(self) -> tuple[float, float] | None:
        live = np.abs(self.weights) > 0
        if not np.any(live):
            return None
        mats = self.maturities()[live]
        return float(mats.min()), float(mats.max())

    def pair(self, curve) -> float:
        """Duality pairing sum c_i x(s_i) against a curve (array or container)."""
        vals = curve.values if hasattr(curve, "values") else np.asarray(curve, dtype=float)
        return float(np.dot(self.weights, vals[self.node_idx]))

    def dual_norm(self) -> float:
        return dual_norm(self.to_dense(), self.grid)


def pair(phi: PortfolioMeasure, curve) -> float:
    return phi.pair(curve)
