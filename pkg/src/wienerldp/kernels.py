"""Symmetric kernels on a grid, kernel families, and the deterministic checks
on their norms (exponential type, weighted series bound, modulus profile).

Two storage forms are supported:

* ``DenseSym`` keeps one value per orbit of multi-indices (sorted
  ``i1 <= ... <= in``); only orders n <= 3 are allowed.
* ``SeparableSum`` keeps a list of ``(coef, g_1, ..., g_n)`` terms read with
  symmetric semantics, i.e. each term stands for the average of
  ``g_1 (x) ... (x) g_n`` over all argument permutations.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .grid import ConfigError, Grid, GridFn, GridMismatchError, SiteSet

DENSE_MAX_ORDER = 3
DENSE_MAX_TERMS = 10**7


@lru_cache(maxsize=32)
def _sorted_indices(m: int, n: int) -> np.ndarray:
    if n == 0:
        out = np.zeros((1, 0), dtype=np.intp)
    else:
        out = np.array(list(itertools.combinations_with_replacement(range(m), n)), dtype=np.intp)
    out.setflags(write=False)
    return out


def symmetrize_axes(a: np.ndarray, n: int) -> np.ndarray:
    """Average ``a`` over all permutations of its trailing ``n`` axes."""
    lead = a.ndim - n
    perms = list(itertools.permutations(range(n)))
    out = np.zeros_like(a, dtype=float)
    for p in perms:
        out += np.transpose(a, tuple(range(lead)) + tuple(lead + i for i in p))
    return out / len(perms)


@dataclass(frozen=True, eq=False)
class DenseSym:
    grid: Grid
    order: int
    packed: np.ndarray

    def __post_init__(self):
        if self.order > DENSE_MAX_ORDER:
            raise ConfigError(f"dense kernels are limited to order {DENSE_MAX_ORDER}")
        p = np.asarray(self.packed, dtype=float).reshape(-1)
        expected = math.comb(self.grid.size + self.order - 1, self.order)
        if p.size != expected:
            raise ConfigError(f"order-{self.order} packed kernel needs {expected} values, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise ConfigError("kernel values must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "packed", p)

    @classmethod
    def from_full(cls, grid: Grid, full: np.ndarray, atol: float = 1e-12) -> "DenseSym":
        full = np.asarray(full, dtype=float)
        n = full.ndim
        if full.shape != (grid.size,) * n:
            raise ConfigError(f"full kernel must have shape {(grid.size,) * n}, got {full.shape}")
        if n >= 2:
            scale = max(1.0, float(np.max(np.abs(full))))
            if np.max(np.abs(symmetrize_axes(full, n) - full)) > atol * scale:
                raise ConfigError("dense kernel payload is not symmetric")
        idx = _sorted_indices(grid.size, n)
        packed = full[tuple(idx.T)] if n else full.reshape(1)
        return cls(grid, n, packed)

    @cached_property
    def full(self) -> np.ndarray:
        n, m = self.order, self.grid.size
        if n == 0:
            out = np.array(self.packed[0])
        else:
            out = np.empty((m,) * n)
            idx = _sorted_indices(m, n)
            for p in itertools.permutations(range(n)):
                out[tuple(idx[:, list(p)].T)] = self.packed
        out.setflags(write=False)
        return out

    def value(self, index: Sequence[int]) -> float:
        return float(self.full[tuple(index)])


@dataclass(frozen=True, eq=False)
class SeparableSum:
    grid: Grid
    order: int
    coefs: np.ndarray
    factors: np.ndarray  # (terms, order, cells)

    def __post_init__(self):
        c = np.asarray(self.coefs, dtype=float).reshape(-1)
        f = np.asarray(self.factors, dtype=float).reshape(c.size, self.order, self.grid.size)
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(f))):
            raise ConfigError("kernel values must be finite")
        c.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "coefs", c)
        object.__setattr__(self, "factors", f)

    @classmethod
    def zero(cls, grid: Grid, order: int) -> "SeparableSum":
        return cls(grid, order, np.zeros(0), np.zeros((0, order, grid.size)))

    @classmethod
    def rank_one(cls, g: GridFn, order: int, coef: float = 1.0) -> "SeparableSum":
        return cls(g.grid, order, np.array([coef]), np.tile(g.values, (1, order, 1)))

    @property
    def n_terms(self) -> int:
        return self.coefs.size

    def term_is_power(self, t: int) -> bool:
        f = self.factors[t]
        return self.order <= 1 or bool(np.all(f == f[0]))

    def value(self, index: Sequence[int]) -> float:
        n = self.order
        if n == 0:
            return float(self.coefs.sum())
        total = 0.0
        for c, f in zip(self.coefs, self.factors):
            a = f[:, list(index)]
            total += c * _permanent(a) / math.factorial(n)
        return float(total)


Kernel = Union[DenseSym, SeparableSum]


def _permanent(a: np.ndarray) -> float:
    """Permanent by Ryser's formula."""
    n = a.shape[0]
    if n == 0:
        return 1.0
    if n == 1:
        return float(a[0, 0])
    if n == 2:
        return float(a[0, 0] * a[1, 1] + a[0, 1] * a[1, 0])
    total = 0.0
    for mask in range(1, 1 << n):
        cols = [j for j in range(n) if mask >> j & 1]
        total += (-1) ** len(cols) * np.prod(a[:, cols].sum(axis=1))
    return float((-1) ** n * total)


def construct_kernel(grid: Grid, order: int, payload) -> Kernel:
    """Build a kernel from a scalar (order 0), a dense array, or separable terms.

    Separable terms are ``[(coef, [g_1, ..., g_n]), ...]`` with GridFn or
    array factors. Dense payloads are the full symmetric array of shape
    ``(m,) * n`` or, for n >= 2, the packed orbit values.
    """
    if order < 0:
        raise ConfigError("order must be nonnegative")
    if order == 0:
        if not np.isscalar(payload) and np.size(payload) != 1:
            raise ConfigError("order-0 kernels take a single real value")
        return DenseSym(grid, 0, np.array([float(np.asarray(payload).reshape(-1)[0])]))
    if isinstance(payload, np.ndarray):
        if payload.ndim == 1 and order >= 2:
            return DenseSym(grid, order, payload)
        if payload.ndim != order:
            raise ConfigError(f"dense payload of ndim {payload.ndim} for order {order}")
        return DenseSym.from_full(grid, payload)
    coefs, factors = [], []
    for coef, fs in payload:
        if len(fs) != order:
            raise ConfigError(f"separable term has {len(fs)} factors, order is {order}")
        row = []
        for g in fs:
            if isinstance(g, GridFn):
                grid.check_same(g.grid)
                row.append(g.values)
            else:
                v = np.asarray(g, dtype=float).reshape(-1)
                if v.size != grid.size:
                    raise ConfigError("factor length does not match the grid")
                row.append(v)
        coefs.append(float(coef))
        factors.append(row)
    return SeparableSum(grid, order, np.array(coefs), np.array(factors).reshape(len(coefs), order, grid.size))


def to_dense(k: Kernel) -> DenseSym:
    if isinstance(k, DenseSym):
        return k
    n, m = k.order, k.grid.size
    if n > DENSE_MAX_ORDER or m**n > DENSE_MAX_TERMS:
        raise ConfigError(f"cannot densify an order-{n} kernel on {m} cells")
    if n == 0:
        return DenseSym(k.grid, 0, np.array([k.coefs.sum()]))
    full = np.zeros((m,) * n)
    for c, f in zip(k.coefs, k.factors):
        t = f[0]
        for j in range(1, n):
            t = np.multiply.outer(t, f[j])
        full += c * t
    return DenseSym.from_full(k.grid, symmetrize_axes(full, n))


def scaled(k: Kernel, c: float) -> Kernel:
    if isinstance(k, DenseSym):
        return DenseSym(k.grid, k.order, k.packed * c)
    return SeparableSum(k.grid, k.order, k.coefs * c, k.factors)


def combine(a: Kernel, b: Kernel, cb: float = 1.0) -> Kernel:
    """``a + cb * b`` in the cheapest common representation."""
    a.grid.check_same(b.grid)
    if a.order != b.order:
        raise ConfigError("cannot add kernels of different orders")
    if isinstance(a, SeparableSum) and isinstance(b, SeparableSum):
        return SeparableSum(a.grid, a.order, np.concatenate([a.coefs, cb * b.coefs]),
                            np.concatenate([a.factors, b.factors]))
    da, db = to_dense(a), to_dense(b)
    return DenseSym(a.grid, a.order, da.packed + cb * db.packed)


def _orbit_weights(grid: Grid, n: int) -> np.ndarray:
    """Per packed entry: size of the permutation orbit times the product of cell measures."""
    if n == 0:
        return np.ones(1)
    idx = _sorted_indices(grid.size, n)
    meas = np.prod(grid.cell_measure[idx], axis=1)
    # sorted rows: multiplicities are run lengths of equal neighbours
    counts = np.full(len(idx), float(math.factorial(n)))
    run = np.ones(len(idx))
    for j in range(1, n):
        same = idx[:, j] == idx[:, j - 1]
        run = np.where(same, run + 1, 1.0)
        counts /= np.where(same, run, 1.0)
    return counts * meas


def kernel_inner(a: Kernel, b: Kernel) -> float:
    a.grid.check_same(b.grid)
    if a.order != b.order:
        raise ConfigError("kernels of different orders")
    n = a.order
    if isinstance(a, SeparableSum) and isinstance(b, SeparableSum):
        if n == 0:
            return float(a.coefs.sum() * b.coefs.sum())
        w = a.grid.cell_measure
        total = 0.0
        for i in range(a.n_terms):
            for j in range(b.n_terms):
                if a.term_is_power(i) and b.term_is_power(j):
                    s = np.sum(a.factors[i, 0] * b.factors[j, 0] * w) ** n
                else:
                    gram = (a.factors[i] * w) @ b.factors[j].T
                    s = _permanent(gram) / math.factorial(n)
                total += a.coefs[i] * b.coefs[j] * s
        return float(total)
    da, db = to_dense(a), to_dense(b)
    return float(np.sum(da.packed * db.packed * _weights_cached(a.grid, n)))


_WEIGHT_CACHE: dict = {}


def _weights_cached(grid: Grid, n: int) -> np.ndarray:
    key = (id(grid), n)
    hit = _WEIGHT_CACHE.get(key)
    if hit is None or hit[0] is not grid:
        hit = (grid, _orbit_weights(grid, n))
        _WEIGHT_CACHE[key] = hit
    return hit[1]


def kernel_norm(k: Kernel) -> float:
    """L2 norm on T^n under the product of the cell measures."""
    return float(np.sqrt(max(kernel_inner(k, k), 0.0)))


def kernel_lp_norm(k: Kernel, p: float) -> float:
    d = to_dense(k)
    if d.order == 0:
        return float(abs(d.packed[0]))
    w = _weights_cached(k.grid, d.order)
    if math.isinf(p):
        return float(np.max(np.abs(d.packed)))
    return float(np.sum(np.abs(d.packed) ** p * w) ** (1.0 / p))


def kernel_diff_norm(a: Kernel, b: Kernel, p: float = 2.0) -> float:
    if p == 2.0:
        return kernel_norm(combine(a, b, -1.0))
    return kernel_lp_norm(combine(a, b, -1.0), p)


# ---------------------------------------------------------------------------
# symmetrization of site-indexed kernels


@dataclass(frozen=True, eq=False)
class SiteSeparable:
    """Site-indexed kernel ``t -> sum_T c_T w_T(t) sym(g_T1 (x) ... (x) g_Tn)``."""

    grid: Grid
    order: int
    coefs: np.ndarray
    factors: np.ndarray  # (terms, order, cells)
    site_factors: np.ndarray  # (terms, cells)


def _site_kernels_to_array(site_indexed, grid: Grid | None, sites: SiteSet | None) -> np.ndarray:
    kernels = list(site_indexed)
    if not kernels:
        raise ConfigError("empty site-indexed kernel list")
    grid = grid or kernels[0].grid
    n = kernels[0].order
    for k in kernels:
        grid.check_same(k.grid)
        if k.order != n:
            raise ConfigError("site-indexed kernels must share one order")
    stack = np.stack([np.asarray(to_dense(k).full) for k in kernels])
    if sites is None:
        if len(kernels) != grid.size:
            raise GridMismatchError("site-indexed kernels must be given per cell or with their sites")
        return stack
    if len(sites) != len(kernels):
        raise ConfigError("one kernel per site is required")
    # piecewise-constant read-out: each cell takes the nearest site
    coords = grid.centers[:, : sites.dim]
    dist = np.linalg.norm(coords[:, None, :] - sites.points[None, :, :], axis=-1)
    return stack[np.argmin(dist, axis=1)]


def symmetrize(site_indexed, sites: SiteSet | None = None, grid: Grid | None = None) -> Kernel:
    """Turn a site-indexed order-n kernel ``t -> f^t`` into a symmetric order-(n+1) kernel.

    ``out(t_1..t_n, t) = (f^t(t_1..t_n) + sum_i f^{t_i}(.., t in slot i, ..)) / (n + 1)``.

    Accepted inputs: a ``SiteSeparable``; an array of shape ``(m,) + (m,) * n``
    whose first axis is the site cell; or a sequence of kernels, one per cell
    or one per entry of ``sites`` (read piecewise-constantly).
    """
    if isinstance(site_indexed, SiteSeparable):
        s = site_indexed
        if grid is not None:
            grid.check_same(s.grid)
        factors = np.concatenate([np.asarray(s.factors).reshape(len(s.coefs), s.order, s.grid.size),
                                  np.asarray(s.site_factors)[:, None, :]], axis=1)
        return SeparableSum(s.grid, s.order + 1, s.coefs, factors)
    if isinstance(site_indexed, np.ndarray):
        if grid is None:
            raise ConfigError("a grid is required for array input")
        arr = np.asarray(site_indexed, dtype=float)
    else:
        arr = _site_kernels_to_array(site_indexed, grid, sites)
        grid = grid or list(site_indexed)[0].grid
    m = grid.size
    n = arr.ndim - 1
    if arr.shape != (m,) * (n + 1):
        raise GridMismatchError("site-indexed array does not match the grid")
    if n + 1 > DENSE_MAX_ORDER:
        raise ConfigError("dense symmetrization is limited to output order 3")
    return DenseSym.from_full(grid, symmetrize_last(arr))


def symmetrize_last(arr: np.ndarray, lead: int = 0) -> np.ndarray:
    """Dense core of ``symmetrize`` with ``lead`` extra leading axes left untouched.

    ``arr`` has axes ``(lead..., site, arg_1..arg_n)``; the result has axes
    ``(lead..., arg_1..arg_n, site)`` averaged over the position of the site.
    """
    n = arr.ndim - lead - 1
    b = np.moveaxis(arr, lead, -1)
    out = b.copy()
    last = b.ndim - 1
    for i in range(n):
        perm = list(range(b.ndim))
        perm[lead + i], perm[last] = perm[last], perm[lead + i]
        out = out + np.transpose(b, perm)
    return out / (n + 1)


# ---------------------------------------------------------------------------
# families and assumption checks


@dataclass(frozen=True, eq=False)
class KernelFamily:
    """Kernels ``f_n^z`` for every site z and orders 0..N_max.

    ``f0`` holds the order-0 reals per site; ``kernels[s][n - 1]`` is the
    order-n kernel at site ``s``.
    """

    sites: SiteSet
    f0: np.ndarray
    kernels: tuple

    def __post_init__(self):
        f0 = np.asarray(self.f0, dtype=float).reshape(-1)
        if f0.size != len(self.sites):
            raise ConfigError("one order-0 value per site is required")
        ks = tuple(tuple(row) for row in self.kernels)
        if len(ks) != len(self.sites):
            raise ConfigError("one kernel list per site is required")
        n_max = len(ks[0])
        grid = None
        for row in ks:
            if len(row) != n_max:
                raise ConfigError("all sites must carry the same number of orders")
            for n, k in enumerate(row, start=1):
                if k.order != n:
                    raise ConfigError("kernel orders must be contiguous from 1")
                if grid is None:
                    grid = k.grid
                else:
                    grid.check_same(k.grid)
        object.__setattr__(self, "f0", f0)
        object.__setattr__(self, "kernels", ks)

    @property
    def n_max(self) -> int:
        return len(self.kernels[0])

    @property
    def grid(self) -> Grid | None:
        return self.kernels[0][0].grid if self.n_max else None

    def kernel(self, site: int, n: int) -> Kernel:
        return self.kernels[site][n - 1]

    @cached_property
    def norms(self) -> np.ndarray:
        """``norms[s, n]`` = L2 norm of the order-n kernel at site s (n = 0 uses |f0|)."""
        out = np.zeros((len(self.sites), self.n_max + 1))
        out[:, 0] = np.abs(self.f0)
        for s, row in enumerate(self.kernels):
            for n, k in enumerate(row, start=1):
                out[s, n] = kernel_norm(k)
        out.setflags(write=False)
        return out

    def is_first_chaos(self, site: int | None = None) -> bool:
        rows = range(len(self.sites)) if site is None else [site]
        return all(np.all(self.norms[s, 2:] == 0) for s in rows)


@dataclass(frozen=True)
class ModulusSpec:
    """Modulus of continuity ``omega(s) = C * s**gamma`` with ``0 < alpha0 < gamma < 1``."""

    C: float
    gamma: float
    alpha0: float

    def __post_init__(self):
        if not self.C > 0:
            raise ConfigError("modulus constant must be positive")
        if not 0 < self.gamma < 1:
            raise ConfigError("modulus exponent must lie in (0, 1)")
        if not 0 < self.alpha0 < self.gamma:
            raise ConfigError("alpha0 must lie in (0, gamma)")

    def __call__(self, s):
        return self.C * np.asarray(s, dtype=float) ** self.gamma


def check_exponential_type(fam: KernelFamily) -> tuple[float, bool]:
    """Smallest Delta with ``||f_n^z|| <= Delta^n / n!`` over the stored orders n >= 1."""
    if fam.n_max < 1:
        return 0.0, True
    norms = fam.norms[:, 1:]
    n = np.arange(1, fam.n_max + 1)
    log_fact = np.array([math.lgamma(k + 1) for k in n])
    with np.errstate(divide="ignore"):
        logs = (np.log(norms) + log_fact) / n
    delta = float(np.exp(np.max(logs))) if np.any(norms > 0) else 0.0
    return delta, bool(np.isfinite(delta))


def weighted_tail(delta: float, kappa: float, n_max: int, tol: float = 1e-18) -> float:
    """``sum_{n > n_max} (kappa * delta)^n / sqrt(n!)``."""
    x = kappa * delta
    if x == 0:
        return 0.0
    total, n = 0.0, n_max + 1
    log_x = math.log(x)
    while True:
        term = math.exp(n * log_x - 0.5 * math.lgamma(n + 1))
        total += term
        # terms decrease once sqrt(n+1) > x; stop when the geometric remainder is negligible
        if n > x * x and term < tol * max(total, 1e-300):
            break
        n += 1
        if n > 100000:
            return math.inf
    return total


def series_bound(fam: KernelFamily, kappa: float, delta: float | None = None,
                 finite: bool = False, n_max: int | None = None) -> float:
    """``sup_z sum_{n <= N_max} sqrt(n!) kappa^n ||f_n^z||`` plus a tail estimate past N_max.

    ``n_max`` truncates the stored orders (default: all of them). The tail
    ``sum_{n > N_max} (kappa Delta)^n / sqrt(n!)`` uses the exponential-type
    constant (fitted over the stored orders unless ``delta`` is given) and is
    skipped for families declared ``finite``. Returns ``inf`` when no
    exponential-type certificate exists.
    """
    if not kappa > 0:
        raise ConfigError("kappa must be positive")
    n_max = fam.n_max if n_max is None else int(n_max)
    if not 0 <= n_max <= fam.n_max:
        raise ConfigError("n_max exceeds the stored orders")
    n = np.arange(n_max + 1)
    w = np.exp(0.5 * np.array([math.lgamma(k + 1) for k in n]) + n * math.log(kappa))
    partial = fam.norms[:, : n_max + 1] * w
    head = float(np.max(partial.sum(axis=1)))
    if finite:
        return head
    if delta is None:
        delta, ok = check_exponential_type(fam)
        if not ok:
            return math.inf
    return head + weighted_tail(delta, kappa, n_max)


@dataclass(frozen=True)
class ModulusProfile:
    kappa: float
    pairs: np.ndarray  # (k, 2) site indices
    distance: np.ndarray
    lhs: np.ndarray
    bound: np.ndarray
    worst_margin: float
    exponent: float
    passed: bool


def modulus_profile(fam: KernelFamily, kappa: float, spec: ModulusSpec,
                    q: float | None = None) -> ModulusProfile:
    """Check ``sum_n sqrt(n!) kappa^n ||f_n^z - f_n^y|| <= omega(|z - y|)`` on all site pairs.

    With ``q > 2`` the kernel differences are measured in ``L^{2q/(q-2)}``,
    the norm that controls the site-dependent factor after a Holder split.
    The fitted exponent is the slope of a log-log regression of the left
    side against the site distance.
    """
    if len(fam.sites) < 2:
        raise ConfigError("modulus profile needs at least two sites")
    p = 2.0 if q is None else 2.0 * q / (q - 2.0)
    if q is not None and not q > 2:
        raise ConfigError("q must exceed 2")
    pts = fam.sites.points
    pairs = np.array(list(itertools.combinations(range(len(pts)), 2)))
    dist = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    weights = [math.sqrt(math.factorial(n)) * kappa**n for n in range(fam.n_max + 1)]
    lhs = np.empty(len(pairs))
    for r, (y, z) in enumerate(pairs):
        total = weights[0] * abs(fam.f0[z] - fam.f0[y])
        for n in range(1, fam.n_max + 1):
            total += weights[n] * kernel_diff_norm(fam.kernel(z, n), fam.kernel(y, n), p)
        lhs[r] = total
    bound = spec(dist)
    margin = bound - lhs
    ok = lhs > 0
    if ok.sum() >= 2:
        exponent = float(np.polyfit(np.log(dist[ok]), np.log(lhs[ok]), 1)[0])
    else:
        exponent = math.nan
    return ModulusProfile(kappa, pairs, dist, lhs, bound, float(margin.min()), exponent,
                          bool(np.all(margin >= -1e-12)))


# ---------------------------------------------------------------------------
# file loading


def load_dense_kernel(path, grid: Grid, order: int) -> DenseSym:
    """Load a dense kernel from CSV rows ``i1,...,in,value`` or a ``.npy`` array.

    CSV rows may list any permutation of a multi-index; missing orbits are
    zero. A ``.npy`` file holds either the packed orbit values or the full
    symmetric array.
    """
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        return construct_kernel(grid, order, arr)
    idx = _sorted_indices(grid.size, order)
    lookup = {tuple(r): i for i, r in enumerate(idx)}
    packed = np.zeros(len(idx))
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                key = tuple(sorted(int(v) for v in row[:order]))
                val = float(row[order])
            except ValueError:
                continue  # header line
            if len(row) != order + 1 or key not in lookup:
                raise ConfigError(f"bad kernel row {row!r}")
            packed[lookup[key]] = val
    return DenseSym(grid, order, packed)
