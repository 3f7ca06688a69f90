"""Discretized parameter space: a box grid over [0, T] x E with per-cell measures.

Cells are axis-aligned boxes. The time axis comes first; up to two space axes
follow. Cells are flattened in C order (time-major), so a grid with shape
``(nt, nx)`` has ``nt * nx`` cells and cell ``i * nx + j`` covers time cell
``i`` and space cell ``j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid construction parameters (counts, weights, shapes)."""


class GridMismatchError(ValueError):
    """Two objects that must live on the same grid do not."""


@dataclass(frozen=True, eq=False)
class Grid:
    time_edges: np.ndarray
    space_edges: tuple[np.ndarray, ...]
    cell_measure: np.ndarray

    def __post_init__(self):
        if np.any(~np.isfinite(self.cell_measure)) or np.any(self.cell_measure <= 0):
            raise ConfigError("cell measures must be finite and strictly positive")
        if self.cell_measure.size != int(np.prod(self.shape)):
            raise ConfigError("cell_measure length does not match the cell count")
        for a in (self.time_edges, self.cell_measure, *self.space_edges):
            a.setflags(write=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return (len(self.time_edges) - 1,) + tuple(len(e) - 1 for e in self.space_edges)

    @property
    def time_cells(self) -> int:
        return len(self.time_edges) - 1

    @property
    def space_cells(self) -> tuple[int, ...]:
        return self.shape[1:]

    @property
    def size(self) -> int:
        return self.cell_measure.size

    @property
    def ndim(self) -> int:
        return 1 + len(self.space_edges)

    @property
    def total_measure(self) -> float:
        return float(self.cell_measure.sum())

    @cached_property
    def cell_bounds(self) -> np.ndarray:
        """Array of shape (size, ndim, 2) with the [lo, hi] range per axis."""
        axes = (self.time_edges, *self.space_edges)
        lo = np.meshgrid(*[e[:-1] for e in axes], indexing="ij")
        hi = np.meshgrid(*[e[1:] for e in axes], indexing="ij")
        out = np.stack([np.stack([l.ravel() for l in lo], axis=-1),
                        np.stack([h.ravel() for h in hi], axis=-1)], axis=-1)
        out.setflags(write=False)
        return out

    @cached_property
    def centers(self) -> np.ndarray:
        """Cell midpoints, shape (size, ndim)."""
        c = self.cell_bounds.mean(axis=-1)
        c.setflags(write=False)
        return c

    def same_as(self, other: "Grid") -> bool:
        if self is other:
            return True
        if self.shape != other.shape:
            return False
        return (np.array_equal(self.time_edges, other.time_edges)
                and all(np.array_equal(a, b) for a, b in zip(self.space_edges, other.space_edges))
                and np.array_equal(self.cell_measure, other.cell_measure))

    def check_same(self, other: "Grid") -> None:
        if not self.same_as(other):
            raise GridMismatchError("objects live on different grids")

    def refine(self, factor: int) -> "Grid":
        """Split every cell into ``factor`` pieces along each axis.

        The density of the measure is preserved, so integrals of piecewise
        constant functions are unchanged.
        """
        if factor < 1:
            raise ConfigError("refinement factor must be >= 1")
        axes = (self.time_edges, *self.space_edges)
        fine = [_split_edges(e, factor) for e in axes]
        density = self.cell_measure.reshape(self.shape) / _box_volumes(axes)
        for ax in range(self.ndim):
            density = np.repeat(density, factor, axis=ax)
        measure = density * _box_volumes(fine)
        return Grid(fine[0], tuple(fine[1:]), measure.ravel())

    def parent_index(self, coarse: "Grid", factor: int) -> np.ndarray:
        """For a grid made by ``coarse.refine(factor)``, the coarse cell of each fine cell."""
        idx = np.arange(coarse.size).reshape(coarse.shape)
        for ax in range(coarse.ndim):
            idx = np.repeat(idx, factor, axis=ax)
        return idx.ravel()


def _split_edges(edges: np.ndarray, factor: int) -> np.ndarray:
    pieces = [np.linspace(a, b, factor + 1)[:-1] for a, b in zip(edges[:-1], edges[1:])]
    return np.concatenate(pieces + [edges[-1:]])


def _box_volumes(axes: Sequence[np.ndarray]) -> np.ndarray:
    widths = [np.diff(e) for e in axes]
    vol = widths[0]
    for w in widths[1:]:
        vol = np.multiply.outer(vol, w)
    return np.asarray(vol, dtype=float)


def build_grid(time_cells: int, space_spec=None, measure_spec=None, t_max: float = 1.0) -> Grid:
    """Build a uniform box grid on [0, t_max] x E.

    ``space_spec`` is None (no space dimension) or a list with one entry per
    space axis: either a cell count (axis [0, 1]) or ``(cells, lo, hi)``.

    ``measure_spec`` rescales the reference measure. It may be None (Lebesgue),
    a positive scalar density, an array with one weight per cell (multiplying
    the box volume), or a callable of the cell centers returning densities.
    """
    if int(time_cells) != time_cells or time_cells < 1:
        raise ConfigError(f"time_cells must be a positive integer, got {time_cells!r}")
    if not t_max > 0:
        raise ConfigError("t_max must be positive")
    space_spec = list(space_spec or [])
    if len(space_spec) > 2:
        raise ConfigError("at most two space dimensions are supported")
    space_edges = []
    for s in space_spec:
        cells, lo, hi = (s, 0.0, 1.0) if np.isscalar(s) else s
        if int(cells) != cells or cells < 1:
            raise ConfigError(f"space cell count must be a positive integer, got {cells!r}")
        if not hi > lo:
            raise ConfigError("space axis bounds must satisfy lo < hi")
        space_edges.append(np.linspace(lo, hi, int(cells) + 1))
    time_edges = np.linspace(0.0, float(t_max), int(time_cells) + 1)
    volume = _box_volumes([time_edges, *space_edges]).ravel()

    if measure_spec is None:
        weights = np.ones_like(volume)
    elif callable(measure_spec):
        probe = Grid(time_edges, tuple(space_edges), volume.copy())
        weights = np.asarray(measure_spec(probe.centers), dtype=float).reshape(-1)
    else:
        weights = np.broadcast_to(np.asarray(measure_spec, dtype=float), volume.shape).copy()
    if weights.shape != volume.shape:
        raise ConfigError("measure weights must have one entry per cell")
    if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
        raise ConfigError("measure weights must be strictly positive")
    return Grid(time_edges, tuple(space_edges), weights * volume)


@dataclass(frozen=True, eq=False)
class GridFn:
    """A piecewise-constant function on a grid (one value per cell)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.size:
            raise ConfigError(f"expected {self.grid.size} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ConfigError("grid function values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "GridFn":
        return cls(grid, np.full(grid.size, float(c)))

    @classmethod
    def from_callable(cls, grid: Grid, fn: Callable) -> "GridFn":
        """Evaluate ``fn`` at the cell centers (columns: time, then space axes)."""
        c = grid.centers
        return cls(grid, np.asarray(fn(*c.T), dtype=float))

    @classmethod
    def indicator(cls, grid: Grid, lo, hi) -> "GridFn":
        """Indicator of the box [lo, hi], averaged over each cell.

        ``lo``/``hi`` give one bound per leading axis; trailing axes are
        unrestricted. Cells straddling the boundary get the covered fraction,
        which keeps integrals against the indicator exact.
        """
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        b = grid.cell_bounds
        frac = np.ones(grid.size)
        for ax in range(len(lo)):
            a0, a1 = b[:, ax, 0], b[:, ax, 1]
            overlap = np.clip(np.minimum(a1, hi[ax]) - np.maximum(a0, lo[ax]), 0.0, None)
            frac *= overlap / (a1 - a0)
        return cls(grid, frac)

    def prolong(self, fine: Grid, factor: int) -> "GridFn":
        """Same function seen on ``self.grid.refine(factor)``."""
        return GridFn(fine, self.values[fine.parent_index(self.grid, factor)])

    def __add__(self, other: "GridFn") -> "GridFn":
        self.grid.check_same(other.grid)
        return GridFn(self.grid, self.values + other.values)

    def __sub__(self, other: "GridFn") -> "GridFn":
        self.grid.check_same(other.grid)
        return GridFn(self.grid, self.values - other.values)

    def __mul__(self, c) -> "GridFn":
        if isinstance(c, GridFn):
            self.grid.check_same(c.grid)
            return GridFn(self.grid, self.values * c.values)
        return GridFn(self.grid, self.values * float(c))

    __rmul__ = __mul__

    def __neg__(self) -> "GridFn":
        return GridFn(self.grid, -self.values)


def l2_inner(a: GridFn, b: GridFn) -> float:
    a.grid.check_same(b.grid)
    return float(np.sum(a.values * b.values * a.grid.cell_measure))


def l2_norm(a: GridFn) -> float:
    return float(np.sqrt(l2_inner(a, a)))


@dataclass(frozen=True, eq=False)
class SiteSet:
    """Finite set of evaluation points z in K = [0, 1]^d."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[1] not in (1, 2):
            raise ConfigError("sites must be points of dimension 1 or 2")
        if p.shape[0] == 0:
            raise ConfigError("site set is empty")
        if np.any(p < 0) or np.any(p > 1):
            raise ConfigError("site coordinates must lie in [0, 1]")
        if len(np.unique(p, axis=0)) != len(p):
            raise ConfigError("sites must be pairwise distinct")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return len(self.points)
