"""Rate function: the cheapest control whose skeleton hits a target.

``Lambda(psi) = inf { ||u||^2 / 2 : X^u = psi on the sites }``, searched over
piecewise-constant controls on the grid. Internally the control is written
as ``v = u * sqrt(cell_measure)`` so the cost is ``|v|^2 / 2``.

Solution paths, in order of preference:

* first-chaos specs are linear constraints: least-norm solution in closed form;
* specs whose kernels at the constrained sites are all built from one
  direction h (tensor powers of h) reduce to a polynomial in ``<h, u>``:
  real roots give the exact value, no roots certify infeasibility;
* everything else goes through an augmented-Lagrangian continuation with
  multi-start. A quadratic range argument certifies infeasibility for specs
  of order <= 2.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .assembly import ChaosSpec, PathValue, skeleton_site
from .grid import ConfigError, GridFn
from .kernels import DenseSym, SeparableSum, to_dense
from .noise import Control

INF = math.inf
N_STAGES = 6
PENALTY_GROWTH = 10.0
DEFAULT_STARTS = 8


@dataclass(frozen=True, eq=False)
class RateResult:
    lam: float
    u_star: Control | None
    residual: float
    iterations: int
    converged: bool
    certificate: str | None = None
    method: str = ""
    alternatives: tuple = field(default_factory=tuple)

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.lam)


# ---------------------------------------------------------------------------
# skeleton gradient


def _kernel_gradient(k, nu: np.ndarray) -> np.ndarray:
    n = k.order
    if n == 0:
        return np.zeros_like(nu)
    if isinstance(k, SeparableSum):
        if k.n_terms == 0:
            return np.zeros_like(nu)
        a = k.factors @ nu  # (terms, n)
        out = np.zeros_like(nu)
        for c, f, at in zip(k.coefs, k.factors, a):
            for j in range(n):
                out += c * np.prod(np.delete(at, j)) * f[j]
        return out
    val = to_dense(k).full
    for _ in range(n - 1):
        val = val @ nu
    return n * np.asarray(val)


def skeleton_gradient(spec: ChaosSpec, u: Control, z: int) -> GridFn:
    """Gradient of ``u -> X^u(z)`` in the ``L2(mu)`` inner product."""
    grid = spec.family.grid
    grid.check_same(u.grid)
    nu = u.cell_mass
    g = np.zeros(grid.size)
    for n in range(1, spec.n_max + 1):
        g += _kernel_gradient(spec.family.kernel(z, n), nu)
    return GridFn(grid, g)


# ---------------------------------------------------------------------------
# helpers


def _site_index(spec: ChaosSpec, z) -> int:
    if isinstance(z, (int, np.integer)):
        if not 0 <= z < len(spec.sites):
            raise ConfigError(f"site index {z} out of range")
        return int(z)
    pt = np.atleast_1d(np.asarray(z, dtype=float))
    hit = np.where(np.all(np.isclose(spec.sites.points, pt), axis=1))[0]
    if len(hit) != 1:
        raise ConfigError(f"no site at {z!r}")
    return int(hit[0])


def _control(spec: ChaosSpec, v: np.ndarray) -> Control:
    grid = spec.family.grid
    return Control.from_values(grid, v / np.sqrt(grid.cell_measure))


def _tol(targets: np.ndarray, tol: float | None) -> float:
    return tol if tol is not None else 1e-8 * max(1.0, float(np.max(np.abs(targets))))


def _first_chaos(spec: ChaosSpec, sites: list, targets: np.ndarray, tol: float) -> RateResult:
    grid = spec.family.grid
    sq = np.sqrt(grid.cell_measure)
    A = np.array([to_dense(spec.family.kernel(s, 1)).full for s in sites]) * sq
    b = targets - spec.family.f0[sites]
    v, *_ = np.linalg.lstsq(A, b, rcond=None)
    res = float(np.max(np.abs(A @ v - b))) if len(b) else 0.0
    if res > tol:
        return RateResult(INF, None, res, 0, True, "linear constraints are inconsistent", "closed_form")
    return RateResult(0.5 * float(v @ v), _control(spec, v), res, 0, True, None, "closed_form")


def _common_direction(spec: ChaosSpec, sites: list):
    """If every kernel at ``sites`` is a combination of powers of one h, return
    (h, coefficient rows) with ``X^u(z_s) = sum_n coef[s, n] <h, u>^n``."""
    vecs = []
    for s in sites:
        for n in range(1, spec.n_max + 1):
            k = spec.family.kernel(s, n)
            if isinstance(k, DenseSym):
                if n != 1:
                    return None
                vecs.append(k.full)
            else:
                vecs.extend(k.factors.reshape(-1, k.grid.size))
    vecs = [v for v in vecs if np.any(v)]
    if not vecs:
        return None
    h = vecs[0]
    hh = float(h @ h)
    for v in vecs[1:]:
        a = float(v @ h) / hh
        if np.max(np.abs(v - a * h)) > 1e-12 * max(1.0, np.max(np.abs(v))):
            return None
    coef = np.zeros((len(sites), spec.n_max + 1))
    for i, s in enumerate(sites):
        coef[i, 0] = spec.family.f0[s]
        for n in range(1, spec.n_max + 1):
            k = spec.family.kernel(s, n)
            if isinstance(k, DenseSym):
                coef[i, 1] += float(k.full @ h) / hh
            else:
                alpha = (k.factors @ h) / hh  # (terms, n)
                coef[i, n] += float(np.sum(k.coefs * np.prod(alpha, axis=1)))
    return h, coef


def _polynomial(spec: ChaosSpec, sites: list, targets: np.ndarray, tol: float, direction) -> RateResult:
    h, coef = direction
    grid = spec.family.grid
    h_norm_sq = float(np.sum(h * h * grid.cell_measure))
    candidates = None
    for i in range(len(sites)):
        p = coef[i].copy()
        p[0] -= targets[i]
        scale = max(1.0, float(np.max(np.abs(p))))
        if np.all(np.abs(p[1:]) == 0):
            if abs(p[0]) > tol:
                return RateResult(INF, None, abs(p[0]), 0, True,
                                  f"site {sites[i]} has a constant skeleton", "polynomial")
            continue
        roots = np.roots(p[::-1])
        real = [float(r.real) for r in roots if abs(r.imag) <= 1e-9 * max(1.0, abs(r))]
        # polish and keep genuine roots
        poly = np.polynomial.Polynomial(p)
        dpoly = poly.deriv()
        good = []
        for r in real:
            for _ in range(3):
                d = dpoly(r)
                if d != 0:
                    r = r - poly(r) / d
            if abs(poly(r)) <= 1e-9 * scale:
                good.append(r)
        if candidates is None:
            candidates = good
        else:
            candidates = [r for r in candidates if any(abs(r - g) <= 1e-8 * max(1.0, abs(r)) for g in good)]
        if not candidates:
            return RateResult(INF, None, math.nan, 0, True,
                              "no real solution of the skeleton polynomial in <h, u>", "polynomial")
    if candidates is None:  # every site constant and matched
        v = np.zeros(grid.size)
        return RateResult(0.0, _control(spec, v), 0.0, 0, True, None, "polynomial")
    best = min(abs(r) for r in candidates)
    chosen = sorted({r for r in candidates if abs(abs(r) - best) <= 1e-10 * max(1.0, best)}, reverse=True)
    controls = [Control.from_values(grid, r * h / h_norm_sq) for r in chosen]
    res = _residual(spec, sites, targets, controls[0])
    return RateResult(float(0.5 * best**2 / h_norm_sq), controls[0], res, 0, True, None, "polynomial",
                      tuple(controls[1:]))


def _quadratic_certificate(spec: ChaosSpec, site: int, r: float) -> str | None:
    """For order <= 2 at one site: certify ``r`` outside the range of the skeleton."""
    if spec.n_max > 2:
        return None
    grid = spec.family.grid
    sq = np.sqrt(grid.cell_measure)
    b = to_dense(spec.family.kernel(site, 1)).full * sq if spec.n_max >= 1 else np.zeros(grid.size)
    if spec.n_max < 2:
        return None
    Q = to_dense(spec.family.kernel(site, 2)).full * np.outer(sq, sq)
    w, V = np.linalg.eigh(Q)
    bt = V.T @ b
    scale = max(1.0, float(np.max(np.abs(w))))
    small = np.abs(w) <= 1e-12 * scale
    if np.any(np.abs(bt[small]) > 1e-12 * max(1.0, np.max(np.abs(bt)))):
        return None  # unbounded both ways
    f0 = float(spec.family.f0[site])
    nz = ~small
    extreme = f0 - 0.25 * float(np.sum(bt[nz] ** 2 / w[nz]))
    if np.all(w[nz] >= 0) and r < extreme - 1e-12 * max(1.0, abs(extreme)):
        return f"skeleton is bounded below by {extreme!r}"
    if np.all(w[nz] <= 0) and r > extreme + 1e-12 * max(1.0, abs(extreme)):
        return f"skeleton is bounded above by {extreme!r}"
    return None


def _residual(spec: ChaosSpec, sites: list, targets: np.ndarray, u: Control) -> float:
    vals = np.array([skeleton_site(spec, u, s) for s in sites])
    return float(np.max(np.abs(vals - targets)))


# ---------------------------------------------------------------------------
# augmented Lagrangian


def _augmented_lagrangian(spec: ChaosSpec, sites: list, targets: np.ndarray, v0: np.ndarray,
                          tol: float, max_extra: int = 60):
    grid = spec.family.grid
    sq = np.sqrt(grid.cell_measure)

    def constraints(v):
        u = _control(spec, v)
        c = np.array([skeleton_site(spec, u, s) for s in sites]) - targets
        J = np.array([skeleton_gradient(spec, u, s).values * sq for s in sites])
        return c, J

    lam = np.zeros(len(sites))
    v = v0.copy()
    iters = 0

    def solve(v, rho):
        nonlocal iters

        def fun(x):
            c, J = constraints(x)
            val = 0.5 * x @ x + lam @ c + 0.5 * rho * c @ c
            return val, x + J.T @ (lam + rho * c)

        r = minimize(fun, v, jac=True, method="L-BFGS-B",
                     options={"gtol": 1e-8, "ftol": 1e-15, "maxiter": 2000})
        iters += int(r.nit)
        return r.x

    rho = 1.0
    for _ in range(N_STAGES):
        v = solve(v, rho)
        c, _ = constraints(v)
        lam = lam + rho * c
        rho *= PENALTY_GROWTH
    rho /= PENALTY_GROWTH
    for _ in range(max_extra):
        c, J = constraints(v)
        kkt = np.max(np.abs(v + J.T @ lam)) if len(lam) else 0.0
        if np.max(np.abs(c)) <= tol and kkt <= 1e-6 * (1.0 + np.max(np.abs(v))):
            break
        v = solve(v, rho)
        c, _ = constraints(v)
        lam = lam + rho * c
    c, J = constraints(v)
    res = float(np.max(np.abs(c)))
    kkt = float(np.max(np.abs(v + J.T @ lam)))
    ok = res <= tol and kkt <= 1e-6 * (1.0 + float(np.max(np.abs(v))))
    return v, res, iters, ok


def _starts(m: int, n_starts: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    out = [np.zeros(m)]
    for i in range(1, n_starts):
        x = rng.standard_normal(m)
        out.append(x / np.linalg.norm(x) * 0.25 * 2.0 ** (i - 1))
    return out


def _iterative(spec: ChaosSpec, sites: list, targets: np.ndarray, tol: float, n_starts: int,
               seed: int, threads: int) -> RateResult:
    m = spec.family.grid.size
    starts = _starts(m, n_starts, seed)
    job = lambda v0: _augmented_lagrangian(spec, sites, targets, v0, tol)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(job, starts))
    else:
        runs = [job(v0) for v0 in starts]
    iters = sum(r[2] for r in runs)
    feasible = [r for r in runs if r[3]]
    if not feasible:
        best = min(runs, key=lambda r: (r[1], 0.5 * r[0] @ r[0]))
        v, res = best[0], best[1]
        return RateResult(0.5 * float(v @ v), _control(spec, v), res, iters, False, None, "augmented_lagrangian")
    best = min(feasible, key=lambda r: 0.5 * r[0] @ r[0])
    v = best[0]
    lam = 0.5 * float(v @ v)
    alts = []
    for cand in [r[0] for r in feasible] + [-v]:
        if abs(0.5 * cand @ cand - lam) > 1e-6 * (1.0 + lam):
            continue
        if np.linalg.norm(cand - v) <= 1e-3 * (1.0 + np.linalg.norm(v)):
            continue
        if any(np.linalg.norm(cand - a) <= 1e-3 * (1.0 + np.linalg.norm(v)) for a in alts):
            continue
        if _residual(spec, sites, targets, _control(spec, cand)) <= tol:
            alts.append(cand)
    return RateResult(lam, _control(spec, v), best[1], iters, True, None, "augmented_lagrangian",
                      tuple(_control(spec, a) for a in alts))


def _solve(spec: ChaosSpec, sites: list, targets: np.ndarray, method: str, tol: float | None,
           n_starts: int, seed: int, threads: int) -> RateResult:
    if spec.family.grid is None:
        raise ConfigError("the spec carries no kernels")
    if method not in ("auto", "iterative"):
        raise ConfigError(f"unknown rate method {method!r}")
    tol = _tol(targets, tol)
    if method == "auto":
        if all(spec.is_first_chaos(s) for s in sites):
            return _first_chaos(spec, sites, targets, tol)
        direction = _common_direction(spec, sites)
        if direction is not None:
            return _polynomial(spec, sites, targets, tol, direction)
    if len(sites) == 1:
        cert = _quadratic_certificate(spec, sites[0], float(targets[0]))
        if cert is not None:
            return RateResult(INF, None, math.nan, 0, True, cert, "quadratic_range")
    return _iterative(spec, sites, targets, tol, n_starts, seed, threads)


def rate_pointwise(spec: ChaosSpec, z, r: float, method: str = "auto", tol: float | None = None,
                   n_starts: int = DEFAULT_STARTS, seed: int = 0, threads: int = 1) -> RateResult:
    """``inf { ||u||^2 / 2 : X^u(z) = r }`` for one site ``z`` (index or coordinates)."""
    s = _site_index(spec, z)
    return _solve(spec, [s], np.array([float(r)]), method, tol, n_starts, seed, threads)


def rate_path(spec: ChaosSpec, psi, method: str = "auto", tol: float | None = None,
              n_starts: int = DEFAULT_STARTS, seed: int = 0, threads: int = 1) -> RateResult:
    """``inf { ||u||^2 / 2 : X^u = psi at every site }``."""
    vals = psi.values if isinstance(psi, PathValue) else psi
    vals = np.asarray(vals, dtype=float).reshape(-1)
    if vals.size != len(spec.sites):
        raise ConfigError("target path needs one value per site")
    return _solve(spec, list(range(len(spec.sites))), vals, method, tol, n_starts, seed, threads)
