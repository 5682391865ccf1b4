"""Deterministic random-number streams.

Every stochastic routine in the package draws from a counter-based Philox
generator keyed by (seed, stream tag, ids...).  The same (seed, key) always
yields the same numbers, independent of how work is batched or scheduled,
which is what makes reports bit-reproducible.
"""

from __future__ import annotations

import numpy as np

# Stream tags.  Keep values stable: they are part of the reproducibility contract.
OUTER = 1       # outer simulation paths
INNER = 2       # nested (conditional-expectation) paths
BUMP = 3        # common-random-number bump pricing
SAMPLER = 4     # random state/curve sampling for diagnostics
PROBE = 5       # probe directions for norm/bound checks


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the sub-stream identified by ``key`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def path_increments(seed: int, stream_tag: int, path_id: int,
                    n_steps: int, n_factors: int, dt: float) -> np.ndarray:
    """Brownian increments (n_steps, n_factors) for one path, a pure function of the key."""
    g = stream(seed, stream_tag, path_id)
    return g.standard_normal((n_steps, n_factors)) * np.sqrt(dt)


def bundle_increments(seed: int, stream_tag: int, n_paths: int,
                      n_steps: int, n_factors: int, dt: float) -> np.ndarray:
    """Stack per-path increments into (n_paths, n_steps, n_factors).

    Generated path by path so that adding or removing paths never changes
    the draws of the remaining ones.
    """
    out = np.empty((n_paths, n_steps, n_factors))
    for p in range(n_paths):
        out[p] = path_increments(seed, stream_tag, p, n_steps, n_factors, dt)
    return out


def block_increments(seed: int, outer_id: int, time_idx: int,
                     n_paths: int, n_steps: int, n_factors: int, dt: float) -> np.ndarray:
    """Increments for a nested block keyed by (seed, outer path, time index)."""
    g = stream(seed, INNER, outer_id, time_idx)
    return g.standard_normal((n_paths, n_steps, n_factors)) * np.sqrt(dt)
