"""Seeded Brownian paths with exact coarsening by block summation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from holosde.errors import InvalidResolution


def _rng(seed: int, stream_id) -> np.random.Generator:
    key = tuple(np.atleast_1d(stream_id).astype(np.uint64).tolist())
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def coarsen(increments: np.ndarray, factor: int, axis: int = 0) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` increments along ``axis``.

    Power-of-two factors are reduced by repeated pairwise addition, so that
    coarsening by ``a`` then ``b`` gives the same floating-point result as
    coarsening by ``a*b`` directly.
    """
    x = np.moveaxis(np.asarray(increments), axis, 0)
    if factor < 1 or x.shape[0] % factor:
        raise InvalidResolution(f"cannot coarsen {x.shape[0]} increments by {factor}")
    if factor & (factor - 1) == 0:
        while factor > 1:
            x = x[0::2] + x[1::2]
            factor //= 2
    elif factor > 1:
        x = x.reshape((x.shape[0] // factor, factor) + x.shape[1:]).sum(axis=1)
    return np.moveaxis(x, 0, axis)


@dataclass(frozen=True, eq=False)
class BrownianPath:
    ell: int
    horizon: float
    n_max: int
    fine_increments: np.ndarray
    seed: int
    stream_id: int

    def increments_at(self, n: int) -> np.ndarray:
        return increments_at(self, n)

    @property
    def terminal(self) -> np.ndarray:
        return self.fine_increments.sum(axis=0)


def sample_path(ell: int, T: float, n_max: int, seed: int, stream_id: int = 0) -> BrownianPath:
    """Draw ``n_max`` increments of an ``ell``-dimensional Brownian motion on ``[0, T]``.

    The generator is keyed by ``(seed, stream_id)``; different streams are
    statistically independent and need no shared state.
    """
    if n_max < 1:
        raise InvalidResolution("n_max must be at least 1")
    if T <= 0:
        raise ValueError("horizon must be positive")
    inc = _rng(seed, stream_id).standard_normal((n_max, ell)) * np.sqrt(T / n_max)
    inc.flags.writeable = False
    return BrownianPath(ell, float(T), int(n_max), inc, int(seed), int(stream_id))


def increments_at(path: BrownianPath, n: int) -> np.ndarray:
    """Increments on the uniform grid with ``n`` steps, shape ``(n, ell)``."""
    if n < 1 or path.n_max % n:
        raise InvalidResolution(f"resolution {n} does not divide n_max={path.n_max}")
    if n == path.n_max:
        return path.fine_increments
    return coarsen(path.fine_increments, path.n_max // n)


def sample_increments(ell: int, T: float, n_max: int, seed: int, streams) -> np.ndarray:
    """Fine increments for several streams stacked as ``(len(streams), n_max, ell)``.

    Each slice equals ``sample_path(ell, T, n_max, seed, s).fine_increments``.
    """
    out = np.empty((len(streams), n_max, ell))
    for i, s in enumerate(streams):
        out[i] = _rng(seed, s).standard_normal((n_max, ell))
    out *= np.sqrt(T / n_max)
    return out
