"""Pathwise first variation, Malliavin derivatives and Clark-Ocone machinery.

The first-variation operator maps a perturbation of the discounted curve at
time t to the induced perturbation of the terminal curve, following the same
Brownian increments as the simulated path.  Everything is a plain matrix on
the maturity grid; the factor dimension only ever appears contracted against
increments.

The second half of the module is a test harness for the martingale
representation itself: functionals of the driving Brownian path with known
pathwise derivatives, a nested Monte Carlo estimator of the conditional
expectation of those derivatives, reconstruction residuals, and the
integration-by-parts identity that the estimators must satisfy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .curves import MaturityGrid, sobolev_norm
from .errors import PreconditionError
from .models import PathBundle

__all__ = [
    "FirstVariationOperator",
    "first_variation",
    "variation_path",
    "picard_first_variation",
    "picard_decay",
    "malliavin_derivative_curve",
    "BrownianPaths",
    "LinearWiener",
    "SquaredEndpoint",
    "ExpMartingale",
    "SmoothFunctional",
    "clark_ocone_integrand",
    "reconstruct",
    "integration_by_parts_check",
]


@dataclass(eq=False)
class FirstVariationOperator:
    """Matrix Y mapping curve perturbations at t_start to perturbations at t_end.

    Rows and columns of matured nodes act as the identity: a perturbation of
    a frozen price stays exactly where it is.
    """

    grid: MaturityGrid
    matrix: np.ndarray  # (.., n_nodes, n_nodes)
    t_start: float
    t_end: float

    def apply(self, h: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(h, dtype=float)

    def pullback(self, mu: np.ndarray) -> np.ndarray:
        """Transpose action on a dense covector of node weights."""
        return np.swapaxes(self.matrix, -1, -2) @ np.asarray(mu, dtype=float)


def _span(times: np.ndarray, t_idx: int, end_idx: int | None) -> int:
    last = times.size - 1 if end_idx is None else int(end_idx)
    if not 0 <= t_idx <= last <= times.size - 1:
        raise PreconditionError("anchor indices outside the simulated time grid")
    return last


def variation_path(model, states: np.ndarray, increments: np.ndarray,
                   times: np.ndarray, t_idx: int, end_idx: int | None = None,
                   keep_all: bool = False):
    """Evolve Y along simulated states (batched over leading axes).

    states: (.., L+1, n_nodes); increments: (.., L, N).  Returns the terminal
    matrix (.., n, n), or the whole trajectory (.., span+1, n, n) when
    ``keep_all`` is set.
    """
    last = _span(times, t_idx, end_idx)
    n = model.grid.n_nodes
    lead = states.shape[:-2]
    y = np.broadcast_to(np.eye(n), lead + (n, n)).copy()
    traj = np.empty(lead + (last - t_idx + 1, n, n)) if keep_all else None
    if keep_all:
        traj[..., 0, :, :] = y
    for ell in range(t_idx, last):
        ctx = model.step_context(float(times[ell]), states[..., ell, :],
                                 increments[..., ell, :])
        y = y + model.variation_apply(ctx, y)
        if keep_all:
            traj[..., ell - t_idx + 1, :, :] = y
    return traj if keep_all else y


def first_variation(model, bundle: PathBundle, t_idx: int, path: int | None = None,
                    end_idx: int | None = None) -> FirstVariationOperator:
    """Y_{t, T} for one path (or all paths when ``path`` is None)."""
    if path is None:
        states, incr = bundle.states, bundle.increments
    else:
        states, incr = bundle.states[path], bundle.increments[path]
    last = _span(bundle.times, t_idx, end_idx)
    y = variation_path(model, states, incr, bundle.times, t_idx, last)
    return FirstVariationOperator(model.grid, y, float(bundle.times[t_idx]),
                                  float(bundle.times[last]))


def picard_first_variation(model, bundle: PathBundle, t_idx: int, n_iters: int,
                           end_idx: int | None = None) -> list[np.ndarray]:
    """Picard iterates of the first-variation equation.

    Returns [Y^0, ..., Y^n] as whole-trajectory arrays of shape
    (n_paths, span+1, n, n); iterate n+1 integrates the step maps against
    iterate n.
    """
    times = bundle.times
    last = _span(times, t_idx, end_idx)
    span = last - t_idx
    n = model.grid.n_nodes
    p = bundle.n_paths
    ident = np.broadcast_to(np.eye(n), (p, span + 1, n, n)).copy()
    iterates = [ident]
    ctxs = [model.step_context(float(times[ell]), bundle.states[:, ell, :],
                               bundle.increments[:, ell, :])
            for ell in range(t_idx, last)]
    for _ in range(n_iters):
        prev = iterates[-1]
        cur = np.empty_like(prev)
        cur[:, 0] = np.eye(n)
        acc = np.zeros((p, n, n))
        for k, ctx in enumerate(ctxs):
            acc = acc + model.variation_apply(ctx, prev[:, k])
            cur[:, k + 1] = np.eye(n) + acc
        iterates.append(cur)
    return iterates


def picard_decay(model, bundle: PathBundle, t_idx: int, n_iters: int,
                 probe: np.ndarray, lipschitz: float,
                 end_idx: int | None = None) -> dict:
    """Factorial-decay diagnostics of the Picard scheme.

    For each iteration the Monte Carlo mean of sup_s ||(Y^{n+1} - Y^n) x||^2
    is recorded together with the theoretical ratio bound C^2 (T-t) / n.
    """
    times = bundle.times
    last = _span(times, t_idx, end_idx)
    horizon = float(times[last] - times[t_idx])
    iterates = picard_first_variation(model, bundle, t_idx, n_iters, end_idx)
    grid = model.grid
    sup_means = []
    for prev, cur in zip(iterates, iterates[1:]):
        diff = (cur - prev) @ probe          # (P, span+1, n)
        sups = np.empty(diff.shape[0])
        for p in range(diff.shape[0]):
            sups[p] = max(sobolev_norm(diff[p, k], grid, "f1v") ** 2
                          for k in range(diff.shape[1]))
        sup_means.append(float(sups.mean()))
    ratios = [b / a if a > 0 else 0.0 for a, b in zip(sup_means, sup_means[1:])]
    bounds = [lipschitz ** 2 * horizon / n for n in range(1, len(ratios) + 1)]
    return {"sup_means": sup_means, "ratios": ratios, "ratio_bounds": bounds,
            "horizon": horizon, "lipschitz": lipschitz,
            "converged": sup_means[-1] <= sup_means[0] or sup_means[-1] < 1e-30}


def malliavin_derivative_curve(model, bundle: PathBundle, t_idx: int,
                               path: int | None = None) -> np.ndarray:
    """D_t of the terminal curve: Y_{t,T} sigma(t, state_t), a (.., n, N) matrix."""
    y = first_variation(model, bundle, t_idx, path).matrix
    t = float(bundle.times[t_idx])
    x = bundle.states[:, t_idx, :] if path is None else bundle.states[path, t_idx, :]
    sig = model.sigma(t, x)
    return y @ sig


# ---------------------------------------------------------------------------
# Brownian-path functionals (the representation-theorem test harness)


@dataclass(eq=False)
class BrownianPaths:
    """A batch of discretized Brownian paths."""

    times: np.ndarray
    dW: np.ndarray  # (n_paths, L, N)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.dW = np.asarray(self.dW, dtype=float)

    @classmethod
    def generate(cls, times, n_paths: int, n_factors: int, seed: int,
                 stream_tag: int = rngmod.OUTER) -> "BrownianPaths":
        times = np.asarray(times, dtype=float)
        dts = np.diff(times)
        dw = rngmod.bundle_increments(seed, stream_tag, n_paths, dts.size,
                                      n_factors, 1.0)
        dw *= np.sqrt(dts)[None, :, None]
        return cls(times, dw)

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def n_factors(self) -> int:
        return self.dW.shape[2]

    def levels(self) -> np.ndarray:
        """W at the grid times, (n_paths, L+1, N), starting from zero."""
        w = np.zeros((self.n_paths, self.times.size, self.n_factors))
        np.cumsum(self.dW, axis=1, out=w[:, 1:])
        return w


class LinearWiener:
    """X = int <h_t, dW_t> for deterministic h; D_t X = h_t."""

    def __init__(self, h: Callable[[float], np.ndarray]):
        self.h = h

    def hmat(self, times: np.ndarray) -> np.ndarray:
        return np.stack([np.atleast_1d(self.h(float(t))) for t in times[:-1]])

    def value(self, paths: BrownianPaths) -> np.ndarray:
        return np.einsum("lk,plk->p", self.hmat(paths.times), paths.dW)

    def mean_value(self) -> float:
        return 0.0

    def d_path(self, paths: BrownianPaths, t_idx: int) -> np.ndarray:
        h = np.atleast_1d(self.h(float(paths.times[t_idx])))
        return np.broadcast_to(h, (paths.n_paths, h.size)).copy()

    def integrand(self, paths: BrownianPaths, t_idx: int) -> np.ndarray:
        return self.d_path(paths, t_idx)

    def integrand_all(self, paths: BrownianPaths) -> np.ndarray:
        h = self.hmat(paths.times)
        return np.broadcast_to(h, (paths.n_paths,) + h.shape)


class SquaredEndpoint:
    """X = (W_T . e_k)^2; D_t X = 2 W_T e_k, E{D_t X | F_t} = 2 W_t e_k."""

    def __init__(self, component: int = 0):
        self.k = component

    def value(self, paths: BrownianPaths) -> np.ndarray:
        return paths.levels()[:, -1, self.k] ** 2

    def mean_value_at(self, paths: BrownianPaths) -> float:
        return float(paths.times[-1] - paths.times[0])

    def d_path(self, paths: BrownianPaths, t_idx: int) -> np.ndarray:
        out = np.zeros((paths.n_paths, paths.n_factors))
        out[:, self.k] = 2.0 * paths.levels()[:, -1, self.k]
        return out

    def integrand(self, paths: BrownianPaths, t_idx: int) -> np.ndarray:
        out = np.zeros((paths.n_paths, paths.n_factors))
        out[:, self.k] = 2.0 * paths.levels()[:, t_idx, self.k]
        return out

    def integrand_all(self, paths: BrownianPaths) -> np.ndarray:
        out = np.zeros(paths.dW.shape)
        out[:, :, self.k] = 2.0 * paths.levels()[:, :-1, self.k]
        return out


class ExpMartingale:
    """X = exp(int <h, dW> - 1/2 int |h|^2 dt); D_t X = X h_t.

    The running value M_t makes the exact integrand M_t h_t available for
    reconstruction studies.
    """

    def __init__(self, h: Callable[[float], np.ndarray]):
        self.h = h

    def hmat(self, times: np.ndarray) -> np.ndarray:
        return np.stack([np.atleast_1d(self.h(float(t))) for t in times[:-1]])

    def running(self, paths: BrownianPaths) -> np.ndarray:
        """M at every grid time, (n_paths, L+1)."""
        h = self.hmat(paths.times)
        dts = np.diff(paths.times)
        incr = np.einsum("lk,plk->pl", h, paths.dW) \
            - 0.5 * np.sum(h * h, axis=1) * dts
        out = np.ones((paths.n_paths, paths.times.size))
        np.cumsum(incr, axis=1, out=out[:, 1:])
        np.exp(out[:, 1:], out=out[:, 1:])
        return out

    def value(self, paths: BrownianPaths) -> np.ndarray:
        return self.running(paths)[:, -1]

    def mean_value(self) -> float:
        return 1.0

    def d_path(self, paths: BrownianPaths, t_idx: int) -> np.ndarray:
        h = np.atleast_1d(self.h(float(paths.times[t_idx])))
        return self.value(paths)[:, None] * h[None, :]

    def integrand(self, paths: BrownianPaths, t_idx: int) -> np.ndarray:
        h = np.atleast_1d(self.h(float(paths.times[t_idx])))
        return self.running(paths)[:, t_idx, None] * h[None, :]

    def integrand_all(self, paths: BrownianPaths) -> np.ndarray:
        return self.running(paths)[:, :-1, None] * self.hmat(paths.times)[None, :, :]


class SmoothFunctional:
    """X = kappa(Z_1, .., Z_n) with Z_i = int <h_i, dW>; D_t X = sum_i d_i kappa h_i(t)."""

    def __init__(self, kappa: Callable, grad: Callable,
                 hs: Sequence[Callable[[float], np.ndarray]]):
        self.kappa = kappa
        self.grad = grad
        self.hs = list(hs)

    def _z(self, paths: BrownianPaths) -> np.ndarray:
        hmats = [np.stack([np.atleast_1d(h(float(t))) for t in paths.times[:-1]])
                 for h in self.hs]
        return np.stack([np.einsum("lk,plk->p", hm, paths.dW) for hm in hmats],
                        axis=1)  # (P, n)

    def value(self, paths: BrownianPaths) -> np.ndarray:
        return np.apply_along_axis(lambda z: self.kappa(*z), 1, self._z(paths))

    def d_path(self, paths: BrownianPaths, t_idx: int) -> np.ndarray:
        z = self._z(paths)
        grads = np.apply_along_axis(lambda zz: np.atleast_1d(self.grad(*zz)), 1, z)
        t = float(paths.times[t_idx])
        hs_t = np.stack([np.atleast_1d(h(t)) for h in self.hs])  # (n, N)
        return grads @ hs_t


def clark_ocone_integrand(functional, paths: BrownianPaths, path_id: int,
                          t_idx: int, n_inner: int, seed: int
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Nested Monte Carlo estimate of E{D_t X | F_t} on one outer path.

    Inner continuations reuse the outer increments up to t and draw fresh
    ones after it, keyed deterministically by (seed, path, time index).
    """
    if n_inner < 2:
        raise PreconditionError("need at least two inner paths for a standard error")
    times = paths.times
    L = times.size - 1
    dts = np.diff(times)
    inner = rngmod.block_increments(seed, path_id, t_idx, n_inner, L - t_idx,
                                    paths.n_factors, 1.0)
    inner *= np.sqrt(dts[t_idx:])[None, :, None]
    full = np.empty((n_inner, L, paths.n_factors))
    full[:, :t_idx] = paths.dW[path_id, :t_idx]
    full[:, t_idx:] = inner
    cont = BrownianPaths(times, full)
    d = functional.d_path(cont, t_idx)
    alpha = d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / np.sqrt(n_inner)
    return alpha, se


@dataclass
class ReconstructionReport:
    residuals: np.ndarray
    rms: float
    rel_rms: float
    value_std: float


def reconstruct(functional, paths: BrownianPaths,
                integrand: Callable[[BrownianPaths, int], np.ndarray] | None = None,
                mean: float | None = None) -> ReconstructionReport:
    """Residual of the explicit martingale representation per path.

    residual = X - E{X} - sum_l <alpha_{t_l}, dW_l> with alpha from the given
    integrand source (the functional's own analytic integrand by default).
    """
    x = functional.value(paths)
    if mean is None:
        mean = functional.mean_value() if hasattr(functional, "mean_value") \
            else float(x.mean())
    if integrand is None and hasattr(functional, "integrand_all"):
        acc = np.einsum("plk,plk->p", functional.integrand_all(paths), paths.dW)
    else:
        src = integrand if integrand is not None else functional.integrand
        acc = np.zeros(paths.n_paths)
        for ell in range(paths.times.size - 1):
            acc += np.einsum("pk,pk->p", src(paths, ell), paths.dW[:, ell])
    res = x - mean - acc
    rms = float(np.sqrt(np.mean(res ** 2)))
    std = float(x.std(ddof=1))
    return ReconstructionReport(res, rms, rms / std if std > 0 else np.inf, std)


@dataclass
class IbpResult:
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def se_combined(self) -> float:
        return float(np.hypot(self.se_lhs, self.se_rhs))

    @property
    def within_3se(self) -> bool:
        return self.gap <= 3.0 * self.se_combined + 1e-12


def integration_by_parts_check(functional, beta, times, n_paths: int,
                               n_factors: int, seed: int) -> IbpResult:
    """Monte Carlo check of E int <D_t X, beta_t> dt = E[X int <beta, dW>].

    ``beta(paths, l)`` must be adapted: it may only read increments before l.
    """
    paths = BrownianPaths.generate(times, n_paths, n_factors, seed)
    dts = np.diff(paths.times)
    lhs_acc = np.zeros(n_paths)
    rhs_int = np.zeros(n_paths)
    for ell in range(dts.size):
        b = beta(paths, ell)
        lhs_acc += np.einsum("pk,pk->p", functional.d_path(paths, ell), b) * dts[ell]
        rhs_int += np.einsum("pk,pk->p", b, paths.dW[:, ell])
    x = functional.value(paths)
    rhs_acc = x * rhs_int
    return IbpResult(
        lhs=float(lhs_acc.mean()), rhs=float(rhs_acc.mean()),
        se_lhs=float(lhs_acc.std(ddof=1) / np.sqrt(n_paths)),
        se_rhs=float(rhs_acc.std(ddof=1) / np.sqrt(n_paths)),
    )
