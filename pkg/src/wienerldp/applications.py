"""Kernel families for concrete models: Skorohod integrals and linear
Skorohod equations, Wick-Ito integrals against a basis, box-adapted
(martingale) kernels and the Wick exponential."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import ConfigError, Grid, GridFn, SiteSet, l2_norm
from .kernels import (DENSE_MAX_ORDER, DenseSym, Kernel, KernelFamily, SeparableSum,
                      symmetrize_last)

GRAM_TOL = 1e-8


def _zero_fill(grid: Grid, kernels: dict, n_max: int) -> list:
    return [kernels.get(n, SeparableSum.zero(grid, n)) for n in range(1, n_max + 1)]


def _dense(grid: Grid, arr: np.ndarray) -> Kernel:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim > DENSE_MAX_ORDER:
        raise ConfigError(f"dense kernels are limited to order {DENSE_MAX_ORDER}")
    return DenseSym.from_full(grid, arr, atol=1e-9)


# ---------------------------------------------------------------------------
# exponential functional


def exponential_functional_kernels(h: GridFn, n_max: int, sites: SiteSet | None = None) -> KernelFamily:
    """Chaos kernels ``h^(x)n / n!`` of ``exp(W(h) - ||h||^2 / 2)`` (the same at every site)."""
    if not l2_norm(h) > 0:
        raise ConfigError("h must have positive norm")
    if n_max < 0:
        raise ConfigError("n_max must be nonnegative")
    sites = sites or SiteSet(np.array([0.0]))
    row = [SeparableSum.rank_one(h, n, 1.0 / math.factorial(n)) for n in range(1, n_max + 1)]
    return KernelFamily(sites, np.ones(len(sites)), [row] * len(sites))


# ---------------------------------------------------------------------------
# adapted kernels


def _box_restrict(k, ind: np.ndarray, grid: Grid, n: int) -> Kernel:
    if np.isscalar(k) or isinstance(k, (int, float)):
        return SeparableSum(grid, n, np.array([float(k)]), np.tile(ind, (1, n, 1)))
    grid.check_same(k.grid)
    if k.order != n:
        raise ConfigError(f"base kernel at position {n} has order {k.order}")
    if isinstance(k, SeparableSum):
        return SeparableSum(grid, n, k.coefs, k.factors * ind)
    full = np.asarray(k.full)
    for ax in range(n):
        shape = [1] * n
        shape[ax] = -1
        full = full * ind.reshape(shape)
    return DenseSym.from_full(grid, full)


def adapted_kernels(base: Sequence, sites: SiteSet, grid: Grid | None = None) -> KernelFamily:
    """Restrict ``f_n`` to the box ``[0, z]^n`` for each site z.

    ``base[0]`` is the order-0 value and ``base[n]`` an order-n kernel or a
    real constant (the constant kernel). The box acts on the leading grid
    axes, one per site coordinate. A grid must be given when every entry is
    a constant.
    """
    base = list(base)
    if not base:
        raise ConfigError("empty base kernel list")
    if grid is None:
        grids = [k.grid for k in base[1:] if not np.isscalar(k)]
        if not grids:
            raise ConfigError("a grid is required when all base kernels are constants")
        grid = grids[0]
    if sites.dim > grid.ndim:
        raise ConfigError("site dimension exceeds the grid dimension")
    n_max = len(base) - 1
    f0 = float(base[0])
    rows = []
    for z in sites.points:
        ind = GridFn.indicator(grid, np.zeros(sites.dim), z).values
        rows.append([_box_restrict(base[n], ind, grid, n) for n in range(1, n_max + 1)])
    return KernelFamily(sites, np.full(len(sites), f0), rows)


# ---------------------------------------------------------------------------
# divergence (Skorohod) and Wick-Ito kernels


@dataclass(frozen=True, eq=False)
class SiteIndexedExpansion:
    """Chaos expansion of a random field ``Y_{t_1..t_k}`` on the grid.

    ``orders[n]`` has shape ``(m,) * k + (m,) * n``: the first ``k`` axes are
    the extra (site) arguments, the rest the order-n kernel, symmetric in
    those trailing axes.
    """

    grid: Grid
    k: int
    orders: tuple

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("need at least one extra argument")
        m = self.grid.size
        arrs = []
        for n, a in enumerate(self.orders):
            a = np.asarray(a, dtype=float)
            if a.shape != (m,) * (self.k + n):
                raise ConfigError(f"order-{n} entry must have shape {(m,) * (self.k + n)}")
            arrs.append(a)
        if not arrs:
            raise ConfigError("empty expansion")
        object.__setattr__(self, "orders", tuple(arrs))

    @property
    def n_max(self) -> int:
        return len(self.orders) - 1


def _as_family(grid: Grid, kernels: dict, n_max: int, sites: SiteSet | None) -> KernelFamily:
    sites = sites or SiteSet(np.array([0.0]))
    row = _zero_fill(grid, kernels, n_max)
    return KernelFamily(sites, np.zeros(len(sites)), [row] * len(sites))


def divergence_kernels(Y: SiteIndexedExpansion, k: int | None = None,
                       sites: SiteSet | None = None) -> KernelFamily:
    """Kernels of the k-fold divergence ``delta^k(Y)``.

    The order-n part of Y moves to order n + k after symmetrizing the k
    extra arguments in one at a time. The divergence has mean zero, so the
    order-0 value and orders below k vanish.
    """
    k = Y.k if k is None else int(k)
    if k != Y.k:
        raise ConfigError(f"iteration count {k} does not match the {Y.k} extra arguments of Y")
    n_out = Y.n_max + k
    if n_out > DENSE_MAX_ORDER:
        raise ConfigError(f"output order {n_out} exceeds the dense limit {DENSE_MAX_ORDER}")
    out = {}
    for n, arr in enumerate(Y.orders):
        for j in range(k):
            # axes: (extras still free..., next extra, kernel args...)
            arr = symmetrize_last(arr, lead=k - 1 - j)
        out[n + k] = _dense(Y.grid, arr)
    return _as_family(Y.grid, out, n_out, sites)


@dataclass(frozen=True, eq=False)
class BasisPair:
    """Orthonormal functions ``xi_k`` and their images ``M xi_k`` under a fixed operator."""

    grid: Grid
    xi: np.ndarray  # (K, m)
    m_xi: np.ndarray  # (K, m)

    def __post_init__(self):
        xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        mx = np.atleast_2d(np.asarray(self.m_xi, dtype=float))
        if xi.size == 0 or xi.shape[0] == 0:
            raise ConfigError("empty basis")
        if xi.shape != mx.shape or xi.shape[1] != self.grid.size:
            raise ConfigError("basis arrays must have shape (K, cells) and match")
        gram = (xi * self.grid.cell_measure) @ xi.T
        if np.max(np.abs(gram - np.eye(len(xi)))) > GRAM_TOL:
            raise ConfigError("basis functions are not orthonormal")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "m_xi", mx)

    @property
    def K_basis(self) -> int:
        return self.xi.shape[0]

    def truncated(self, K: int) -> "BasisPair":
        return BasisPair(self.grid, self.xi[:K], self.m_xi[:K])

    @classmethod
    def identity(cls, grid: Grid, xi: np.ndarray) -> "BasisPair":
        return cls(grid, xi, xi)


def cell_basis(grid: Grid) -> np.ndarray:
    """Normalized cell indicators ``1_c / sqrt(mu(c))``: a complete basis of grid functions."""
    return np.diag(1.0 / np.sqrt(grid.cell_measure))


def hermite_function_basis(grid: Grid, K: int, scale: float | None = None) -> np.ndarray:
    """First K Hermite functions of the (centered, rescaled) time coordinate,
    orthonormalized on the grid in order, so the spans are nested."""
    if not 1 <= K <= grid.size:
        raise ConfigError("basis size must lie in [1, cells]")
    t = grid.centers[:, 0]
    t_max = grid.time_edges[-1]
    scale = scale or 6.0 / t_max
    x = (t - 0.5 * t_max) * scale
    psi = [np.pi ** -0.25 * np.exp(-0.5 * x * x)]
    if K > 1:
        psi.append(math.sqrt(2.0) * x * psi[0])
    for j in range(1, K - 1):
        psi.append(math.sqrt(2.0 / (j + 1)) * x * psi[j] - math.sqrt(j / (j + 1)) * psi[j - 1])
    raw = np.array(psi[:K]) * np.sqrt(grid.cell_measure)
    q, r = np.linalg.qr(raw.T)
    if np.min(np.abs(np.diag(r))) < 1e-12 * np.max(np.abs(np.diag(r))):
        raise ConfigError("Hermite functions are numerically dependent on this grid")
    q = q * np.sign(np.diag(r))
    return q.T / np.sqrt(grid.cell_measure)


def wick_kernels(f: SiteIndexedExpansion, basis: BasisPair, sites: SiteSet | None = None) -> KernelFamily:
    """Kernels of the Wick-Ito integral ``int Y_s dW^M_s``.

    ``g_n(.., t) = sum_k xi_k(t) int f_{n-1}^s(..) M xi_k(s) ds``, then
    symmetrized; the sum runs over the basis functions given.
    """
    if f.k != 1:
        raise ConfigError("Wick-Ito kernels need a field with one extra argument")
    f.grid.check_same(basis.grid)
    n_out = f.n_max + 1
    if n_out > DENSE_MAX_ORDER:
        raise ConfigError(f"output order {n_out} exceeds the dense limit {DENSE_MAX_ORDER}")
    # P[t, s] = sum_k xi_k(t) M xi_k(s) mu(s)
    P = basis.xi.T @ (basis.m_xi * f.grid.cell_measure)
    out = {}
    for n, arr in enumerate(f.orders):
        G = np.tensordot(P, arr, axes=(1, 0))
        out[n + 1] = _dense(f.grid, symmetrize_last(G) if n else G)
    return _as_family(f.grid, out, n_out, sites)


# ---------------------------------------------------------------------------
# linear Skorohod equation X_t = x0(t) + int a^t(s) X_s dW_s


SiteFn = Callable[[float], object]


def _site_values(a, grid: Grid, t: float) -> np.ndarray:
    v = a(t) if callable(a) else a
    if isinstance(v, GridFn):
        grid.check_same(v.grid)
        return v.values
    return np.broadcast_to(np.asarray(v, dtype=float), (grid.size,)).astype(float)


def _scalar(x0, t: float) -> float:
    return float(x0(t) if callable(x0) else x0)


def skorohod_product_kernel(a, x0, grid: Grid, t: float, n: int) -> np.ndarray:
    """Unsymmetrized ``a^t(t_n) a^{t_n}(t_{n-1}) ... a^{t_2}(t_1) x0(t_1)`` as an (m,)*n array.

    Inner times ``t_j`` are read at cell centers.
    """
    if n < 1:
        raise ConfigError("order must be >= 1")
    centers = grid.centers[:, 0]
    A = np.array([_site_values(a, grid, c) for c in centers])  # A[s, r] = a^{s}(r)
    X0 = np.array([_scalar(x0, c) for c in centers])
    arr = X0
    for _ in range(n - 1):
        # new last axis t_{j+1}: multiply by a^{t_{j+1}}(t_j)
        arr = arr[..., None] * np.moveaxis(A, 0, 1).reshape((1,) * (arr.ndim - 1) + A.shape)
    return arr * _site_values(a, grid, t).reshape((1,) * (n - 1) + (-1,))


def skorohod_equation_kernels(a, x0, n_max: int, sites: SiteSet, grid: Grid) -> KernelFamily:
    """Chaos kernels of the solution of the linear Skorohod equation.

    ``a`` maps a time t to the coefficient function ``a^t`` on the grid (a
    GridFn, an array, or a scalar), or is a scalar itself; ``x0`` maps t to
    the initial value or is a scalar. The kernels follow the recursion
    ``f_n^t = sym(s -> a^t(s) f_{n-1}^s)`` with ``f_0^t = x0(t)``. Constant
    data give the separable kernels ``a^n x0``; otherwise the recursion runs
    over cell-center times and is limited to order 3.
    """
    if grid.ndim != 1:
        raise ConfigError("Skorohod equations are built on time-only grids")
    if sites.dim != 1:
        raise ConfigError("Skorohod equation sites are times")
    if n_max < 0:
        raise ConfigError("n_max must be nonnegative")
    pts = sites.points[:, 0]
    f0 = np.array([_scalar(x0, t) for t in pts])
    if not callable(a) and np.isscalar(a) and not callable(x0):
        one = GridFn.constant(grid, 1.0)
        row = [SeparableSum.rank_one(one, n, float(a) ** n * float(x0)) for n in range(1, n_max + 1)]
        return KernelFamily(sites, f0, [row] * len(sites))
    if n_max > DENSE_MAX_ORDER:
        raise ConfigError(f"non-constant Skorohod kernels are limited to order {DENSE_MAX_ORDER}")
    centers = grid.centers[:, 0]
    A = np.array([_site_values(a, grid, c) for c in centers])
    X0 = np.array([_scalar(x0, c) for c in centers])
    rows = [[] for _ in pts]
    F = X0  # internal f_{n-1}^s, first axis s
    for n in range(1, n_max + 1):
        for i, t in enumerate(pts):
            at = _site_values(a, grid, t)
            G = at.reshape((-1,) + (1,) * (n - 1)) * F
            rows[i].append(_dense(grid, symmetrize_last(G) if n > 1 else G))
        if n < n_max:
            G = A.reshape(A.shape + (1,) * (n - 1)) * F[None, ...]
            F = symmetrize_last(G, lead=1) if n > 1 else G
    return KernelFamily(sites, f0, rows)
