"""Multiple Wiener-Ito integrals on a grid, their controlled (shifted) versions,
the mixed integrals over NU/NOISE slot patterns, and deterministic integrals.

Two evaluation semantics coexist:

* ``offdiag`` is the discrete model: slots that carry noise never share a
  cell. NU slots are ordinary (Lebesgue-type) sums and may share cells with
  anything. This is the only semantics for dense kernels.
* ``wick`` is the continuum value of the integral of a separable kernel,
  expressed through Wick products of isonormal values (Hermite polynomials
  for rank-one terms). This is the default for separable kernels.

Both agree as the grid is refined. Every function takes batched paths: the
result carries the batch shape of ``path.increments``.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .grid import ConfigError, GridFn, l2_norm
from .kernels import DenseSym, Kernel, SeparableSum, to_dense
from .noise import Control, NoisePath, isonormal, shift_noise

NU = "NU"
NOISE = "NOISE"
WICK_MAX_DISTINCT_ORDER = 10


@dataclass(frozen=True)
class ThetaPattern:
    mask: tuple

    def __post_init__(self):
        mask = tuple(self.mask)
        if any(s not in (NU, NOISE) for s in mask):
            raise ConfigError("pattern letters must be NU or NOISE")
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return len(self.mask)

    @property
    def k(self) -> int:
        return sum(s == NU for s in self.mask)


def theta_patterns(n: int, k: int | None = None) -> list[ThetaPattern]:
    """All 2^n words over {NU, NOISE}, or the C(n, k) words with exactly k NU letters."""
    out = [ThetaPattern(w) for w in itertools.product((NU, NOISE), repeat=n)]
    return out if k is None else [p for p in out if p.k == k]


# ---------------------------------------------------------------------------
# Hermite / Wick machinery


def hermite_sequence(x, var, n_max: int) -> list:
    """``[H_0, ..., H_{n_max}]`` with ``H_{n+1} = x H_n - n var H_{n-1}``.

    ``H_n(x; s^2) = s^n h_n(x / s)`` for the probabilists' polynomials h_n;
    at ``var = 0`` it reduces to ``x^n``.
    """
    x = np.asarray(x, dtype=float)
    out = [np.ones_like(x)]
    if n_max >= 1:
        out.append(x.copy())
    for n in range(1, n_max):
        out.append(x * out[n] - n * var * out[n - 1])
    return out


def hermite_poly(n: int, x, var: float = 1.0):
    return hermite_sequence(x, var, n)[n]


def hermite_value(n: int, g: GridFn, path: NoisePath):
    """``||g||^n h_n(X(g) / ||g||)``: the order-n integral of ``g^(x)n``."""
    if n < 0:
        raise ConfigError("order must be nonnegative")
    x = isonormal(path, g)
    if n >= 1 and l2_norm(g) == 0:
        return np.zeros_like(x)
    return hermite_poly(n, x, l2_norm(g) ** 2)


def wick_product(x: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """Wick product ``:X_1 ... X_n:`` of jointly Gaussian variables.

    ``x`` has shape (..., n) and ``gram`` holds their covariances. Uses the
    recursion ``:S + j: = X_j :S: - sum_{i in S} G_ij :S - i:`` over subsets.
    """
    n = x.shape[-1]
    if n == 0:
        return np.ones(x.shape[:-1])
    if n > WICK_MAX_DISTINCT_ORDER:
        raise ConfigError(f"Wick products of more than {WICK_MAX_DISTINCT_ORDER} distinct factors are not supported")
    w = {0: np.ones(x.shape[:-1])}
    for j in range(n):
        bit = 1 << j
        new = {}
        for s, val in w.items():
            acc = x[..., j] * val
            for i in range(j):
                if s >> i & 1:
                    acc = acc - gram[i, j] * w[s ^ (1 << i)]
            new[s | bit] = acc
        w.update(new)
    return w[(1 << n) - 1]


def _wick_terms(k: SeparableSum, y: np.ndarray, eps: float, u: Control | None = None,
                nu_slots: int = 0) -> np.ndarray:
    """Separable kernel against noise values ``y = eps * X + <g, u>`` (per factor).

    With ``nu_slots = k`` the result is the mixed integral with k NU slots:
    those slots pair with the control and the rest form a Wick product of
    ``eps * X``.
    """
    n = k.order
    batch = y.shape[:-1]
    if n == 0:
        return np.full(batch, float(k.coefs.sum()))
    out = np.zeros(batch)
    w = k.grid.cell_measure
    for t in range(k.n_terms):
        f = k.factors[t]
        xs = y @ f.T  # (..., n) isonormal values of each factor
        if k.term_is_power(t):
            g = f[0]
            var = eps * eps * float(np.sum(g * g * w))
            if nu_slots:
                a = float(np.sum(g * u.cell_mass))
                val = a**nu_slots * hermite_poly(n - nu_slots, xs[..., 0], var)
            else:
                val = hermite_poly(n, xs[..., 0], var)
        else:
            gram = eps * eps * (f * w) @ f.T
            if nu_slots:
                a = f @ u.cell_mass
                val = np.zeros(batch)
                subsets = list(itertools.combinations(range(n), nu_slots))
                for A in subsets:
                    rest = [j for j in range(n) if j not in A]
                    val = val + np.prod(a[list(A)]) * wick_product(xs[..., rest], gram[np.ix_(rest, rest)])
                val = val / len(subsets)
            else:
                val = wick_product(xs, gram)
        out = out + k.coefs[t] * val
    return out


# ---------------------------------------------------------------------------
# discrete off-diagonal machinery


@lru_cache(maxsize=None)
def _partition_types(n: int) -> tuple:
    """Block-size multisets of the set partitions of {1..n}, with their counts."""
    counts: Counter = Counter()

    def rec(rest, blocks):
        if not rest:
            counts[tuple(sorted(len(b) for b in blocks))] += 1
            return
        first, others = rest[0], rest[1:]
        for r in range(len(others) + 1):
            for chosen in itertools.combinations(others, r):
                remaining = [x for x in others if x not in chosen]
                rec(remaining, blocks + [(first,) + chosen])

    rec(list(range(n)), [])
    return tuple(sorted(counts.items()))


def _cumulants(y: np.ndarray, d: np.ndarray, n: int) -> list:
    """Per-cell weights: ``k_1 = y`` and ``k_r = (-1)^(r-1) (r-1)! d^r`` for r >= 2.

    These turn an unrestricted contraction into one where noise (``d``)
    never appears twice in the same cell.
    """
    out = [None, y]
    for r in range(2, n + 1):
        out.append((-1) ** (r - 1) * math.factorial(r - 1) * d**r)
    return out


_LETTERS = "abcdefgh"


def _dense_contraction(full: np.ndarray, kappa: list, n: int) -> np.ndarray:
    batch = kappa[1].shape[:-1]
    out = np.zeros(batch)
    for sizes, count in _partition_types(n):
        sub, ops, letters = "", [], []
        for b, size in enumerate(sizes):
            sub += _LETTERS[b] * size
            ops.append(kappa[size])
            letters.append("Z" + _LETTERS[b])
        expr = sub + "," + ",".join(letters) + "->Z"
        flat = [o.reshape(-1, o.shape[-1]) for o in ops]
        val = np.einsum(expr, full, *flat, optimize=True)
        out = out + count * val.reshape(batch)
    return out


def _bell(p: list, n: int) -> np.ndarray:
    """Complete Bell polynomial ``B_n(p_1, ..., p_n)`` (sum over set partitions of prod p_|block|)."""
    b = [np.ones_like(p[1])]
    for j in range(1, n + 1):
        acc = np.zeros_like(p[1])
        for i in range(1, j + 1):
            acc = acc + math.comb(j - 1, i - 1) * p[i] * b[j - i]
        b.append(acc)
    return b[n]


def _offdiag(k: Kernel, y: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Contraction of k against ``y`` with noise ``d`` kept off the diagonals."""
    n = k.order
    batch = y.shape[:-1]
    if n == 0:
        val = k.packed[0] if isinstance(k, DenseSym) else k.coefs.sum()
        return np.full(batch, float(val))
    if isinstance(k, SeparableSum) and all(k.term_is_power(t) for t in range(k.n_terms)):
        kap = _cumulants(y, d, n)
        out = np.zeros(batch)
        for c, f in zip(k.coefs, k.factors):
            g = f[0]
            p = [None] + [kap[r] @ g**r for r in range(1, n + 1)]
            out = out + c * _bell(p, n)
        return out
    dense = to_dense(k)
    return _dense_contraction(dense.full, _cumulants(y, d, n), n)


def _resolve_method(k: Kernel, method: str) -> str:
    if method == "auto":
        return "wick" if isinstance(k, SeparableSum) else "offdiag"
    if method not in ("wick", "offdiag"):
        raise ConfigError(f"unknown method {method!r}")
    if method == "wick" and isinstance(k, DenseSym) and k.order > 0:
        raise ConfigError("dense kernels only support the off-diagonal evaluation")
    return method


# ---------------------------------------------------------------------------
# public operations


def multiple_integral(f: Kernel, path: NoisePath, method: str = "auto") -> np.ndarray:
    """``I_n(f)`` for each path in the batch."""
    f.grid.check_same(path.grid)
    method = _resolve_method(f, method)
    inc = path.increments
    if method == "wick":
        return _wick_terms(f, inc, 1.0)
    return _offdiag(f, inc, inc)


def deterministic_integral(f: Kernel, u: Control) -> float:
    """``J_n^u(f)``: full contraction (diagonals included) against ``u * cell_measure``."""
    f.grid.check_same(u.grid)
    nu = u.cell_mass
    n = f.order
    if isinstance(f, SeparableSum):
        if n == 0:
            return float(f.coefs.sum())
        a = f.factors @ nu  # (terms, n)
        return float(np.sum(f.coefs * np.prod(a, axis=1)))
    val = f.full
    for _ in range(n):
        val = val @ nu
    return float(val)


def mixed_integral(f: Kernel, theta: ThetaPattern, path: NoisePath, u: Control, eps: float,
                   method: str = "auto") -> np.ndarray:
    """``m_theta(f)``: NU slots integrate against ``nu``, NOISE slots against ``eps * dW``.

    NOISE slots are kept pairwise off-diagonal; NU slots are unrestricted.
    """
    if theta.n != f.order:
        raise ConfigError(f"pattern of length {theta.n} for an order-{f.order} kernel")
    f.grid.check_same(path.grid)
    f.grid.check_same(u.grid)
    method = _resolve_method(f, method)
    k, n = theta.k, f.order
    batch = path.batch_shape
    if k == n:
        return np.full(batch, deterministic_integral(f, u))
    d = eps * path.increments
    if method == "wick":
        return _wick_terms(f, d, eps, u, nu_slots=k)
    if isinstance(f, SeparableSum) and all(f.term_is_power(t) for t in range(f.n_terms)):
        out = np.zeros(batch)
        for c, g in zip(f.coefs, f.factors[:, 0, :]):
            a = float(g @ u.cell_mass)
            sub = SeparableSum(f.grid, n - k, np.array([c * a**k]), np.tile(g, (1, n - k, 1)))
            out = out + _offdiag(sub, d, d)
        return out
    val = to_dense(f).full
    for _ in range(k):
        val = val @ u.cell_mass
    reduced = DenseSym.from_full(f.grid, np.asarray(val), atol=1e-9)
    return _offdiag(reduced, d, d)


def shifted_multiple_integral(f: Kernel, path: NoisePath, u: Control, eps: float,
                              method: str = "auto") -> np.ndarray:
    """``I_n^{eps,u}(f)``: the integral against the shifted noise ``eps * dW + nu``.

    Evaluated directly on the shifted increments (``shift_noise``); the
    expansion over NU/NOISE patterns (``shifted_integral_by_patterns``) gives
    the same value.
    """
    f.grid.check_same(path.grid)
    method = _resolve_method(f, method)
    shifted = shift_noise(path, u, eps).increments
    if method == "wick":
        return _wick_terms(f, shifted, eps)
    return _offdiag(f, shifted, shifted - u.cell_mass)


def shifted_integral_by_patterns(f: Kernel, path: NoisePath, u: Control, eps: float,
                                 method: str = "auto") -> np.ndarray:
    """Sum of ``mixed_integral`` over all 2^n patterns."""
    out = np.zeros(path.batch_shape)
    for theta in theta_patterns(f.order):
        out = out + mixed_integral(f, theta, path, u, eps, method)
    return out


def theoretical_bound(n: int, k, M: float, p: float, norm: float, eps: float = 1.0) -> float:
    """Moment bounds on the mixed and shifted integrals.

    For an integer ``k`` (number of NU slots):
    ``eps^(n-k) sqrt((n-k)!) M^(k/2) (p-1)^((n-k)/2) norm``.
    For ``k == "ALL"`` (the full shifted integral):
    ``sqrt(n!) (4 (M+1) (p-1))^(n/2) norm``.
    """
    if p < 2:
        raise ConfigError("moment order p must be at least 2")
    if M < 0:
        raise ConfigError("control budget M must be nonnegative")
    if k == "ALL":
        return math.sqrt(math.factorial(n)) * (4.0 * (M + 1.0) * (p - 1.0)) ** (n / 2.0) * norm
    k = int(k)
    if not 0 <= k <= n:
        raise ConfigError("k must lie in [0, n]")
    return (eps ** (n - k) * math.sqrt(math.factorial(n - k)) * M ** (k / 2.0)
            * (p - 1.0) ** ((n - k) / 2.0) * norm)


def brute_force_offdiag(full: np.ndarray, values_per_slot: Sequence[np.ndarray],
                        noise_slots: Sequence[bool]) -> float:
    """Reference nested-loop sum for one path (tests and small grids only).

    ``values_per_slot[j]`` is the per-cell weight used in slot j; tuples where
    two NOISE slots share a cell are skipped.
    """
    n = full.ndim
    m = full.shape[0]
    total = 0.0
    noise_idx = [j for j in range(n) if noise_slots[j]]
    for idx in itertools.product(range(m), repeat=n):
        cells = [idx[j] for j in noise_idx]
        if len(set(cells)) != len(cells):
            continue
        term = full[idx]
        for j in range(n):
            term *= values_per_slot[j][idx[j]]
        total += term
    return float(total)
