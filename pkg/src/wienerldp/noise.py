"""White-noise sampling on a grid, control shifts, and Gaussian process paths.

Random streams are derived from ``(seed, *key)`` with numpy's SeedSequence
spawn keys. Monte Carlo work is cut into fixed-size batches and batch ``b``
always draws from the stream keyed by ``b``, so results do not depend on how
many workers process the batches.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .grid import ConfigError, Grid, GridFn, l2_inner

BATCH_SIZE = 8192
THREADS_ENV = "WIENERLDP_THREADS"


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Realized cell increments; ``increments`` has shape ``(..., m)`` (a batch of paths)."""

    grid: Grid
    increments: np.ndarray
    seed: int | None = None
    stream: tuple = ()

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape[-1:] != (self.grid.size,):
            raise ConfigError("increments must end with one entry per cell")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.increments.shape[:-1]


@dataclass(frozen=True, eq=False)
class Control:
    """Deterministic control u; its measure is ``nu(cell) = u(cell) * cell_measure``."""

    u: GridFn

    @classmethod
    def zero(cls, grid: Grid) -> "Control":
        return cls(GridFn.constant(grid, 0.0))

    @classmethod
    def from_values(cls, grid: Grid, values) -> "Control":
        return cls(GridFn(grid, values))

    @property
    def grid(self) -> Grid:
        return self.u.grid

    @property
    def values(self) -> np.ndarray:
        return self.u.values

    @cached_property
    def norm_sq(self) -> float:
        return l2_inner(self.u, self.u)

    @cached_property
    def cell_mass(self) -> np.ndarray:
        m = self.values * self.grid.cell_measure
        m.setflags(write=False)
        return m

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


def standard_increments(grid: Grid, rng: np.random.Generator, size=None) -> np.ndarray:
    shape = (grid.size,) if size is None else tuple(np.atleast_1d(size)) + (grid.size,)
    return rng.standard_normal(shape) * np.sqrt(grid.cell_measure)


def sample_white_noise(grid: Grid, seed: int, size=None, stream: Sequence[int] = ()) -> NoisePath:
    """Independent centered Gaussian increments with variance equal to the cell measure."""
    rng = rng_for(seed, *stream)
    return NoisePath(grid, standard_increments(grid, rng, size), seed, tuple(stream))


def map_batches(fn: Callable[[np.random.Generator, int, int], object], n_samples: int, seed: int,
                stream: Sequence[int] = (), threads: int | None = None,
                batch_size: int = BATCH_SIZE) -> list:
    """Run ``fn(rng, count, batch_index)`` over fixed batches; results come back in batch order."""
    if n_samples < 1:
        raise ConfigError("need at least one sample")
    counts = [batch_size] * (n_samples // batch_size)
    if n_samples % batch_size:
        counts.append(n_samples % batch_size)
    jobs = [(rng_for(seed, *stream, b), c, b) for b, c in enumerate(counts)]
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(jobs) == 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def shift_noise(path: NoisePath, u: Control, eps: float) -> NoisePath:
    """Per-cell value ``eps * increment + u(cell) * cell_measure``."""
    path.grid.check_same(u.grid)
    return NoisePath(path.grid, eps * path.increments + u.cell_mass, path.seed, path.stream)


def isonormal(path: NoisePath, h: GridFn) -> np.ndarray:
    """``X(h) = sum_cells h * increment`` (one value per path in the batch)."""
    path.grid.check_same(h.grid)
    return path.increments @ h.values


def fbm_covariance(times, hurst: float) -> np.ndarray:
    """``R_H(t, s) = (t^2H + s^2H - |t - s|^2H) / 2``."""
    if not 0 < hurst < 1:
        raise ConfigError("Hurst exponent must lie in (0, 1)")
    t = np.asarray(times, dtype=float)
    h2 = 2.0 * hurst
    return 0.5 * (t[:, None] ** h2 + t[None, :] ** h2 - np.abs(t[:, None] - t[None, :]) ** h2)


def fbm_generator(times, hurst: float, jitter: float = 1e-12) -> np.ndarray:
    """Lower-triangular factor L with ``L @ L.T = R_H`` on the given time points."""
    cov = fbm_covariance(times, hurst)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
    except np.linalg.LinAlgError as exc:
        raise ConfigError("fBm covariance is not positive definite after regularization") from exc


def brownian_generator(times) -> np.ndarray:
    """Factor of ``min(t, s)``: entry (i, j) is ``sqrt(t_j - t_{j-1})`` for j <= i."""
    t = np.asarray(times, dtype=float)
    steps = np.sqrt(np.diff(np.concatenate([[0.0], t])))
    return np.tril(np.broadcast_to(steps, (len(t), len(t))))


def sample_fbm(times, hurst: float, seed: int, size=None) -> np.ndarray:
    """Centered Gaussian vector(s) with covariance ``R_H`` at ``times`` (all > 0)."""
    t = np.asarray(times, dtype=float)
    if np.any(t <= 0):
        raise ConfigError("fBm time points must be positive")
    L = fbm_generator(t, hurst)
    rng = rng_for(seed)
    shape = (len(t),) if size is None else (int(size), len(t))
    z = rng.standard_normal(shape)
    return z @ L.T
