"""Truncated chaos processes over a site set: the noisy process, its
controlled version, and the deterministic skeleton."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .chaos import deterministic_integral, multiple_integral, shifted_multiple_integral
from .grid import ConfigError, SiteSet
from .kernels import KernelFamily, SeparableSum, check_exponential_type, weighted_tail
from .noise import Control, NoisePath


@dataclass(frozen=True, eq=False)
class ChaosSpec:
    """A kernel family plus truncation data.

    ``finite`` declares that all orders above the stored ones vanish (the
    truncation is exact). Otherwise ``delta`` is the exponential-type
    certificate used for tail bounds; it is fitted from the stored orders
    when not given. ``eps_family`` optionally maps eps to the eps-dependent
    kernels; ``family`` is then the eps -> 0 limit used by the skeleton.
    """

    family: KernelFamily
    n_max: int | None = None
    finite: bool = False
    delta: float | None = None
    eps_family: Callable[[float], KernelFamily] | None = None
    tail_tolerance: float = 1e-8

    def __post_init__(self):
        n_max = self.family.n_max if self.n_max is None else int(self.n_max)
        if not 0 <= n_max <= self.family.n_max:
            raise ConfigError("truncation order exceeds the stored kernel orders")
        object.__setattr__(self, "n_max", n_max)
        if self.delta is None and not self.finite:
            delta, ok = check_exponential_type(self.family)
            if not ok:
                raise ConfigError("family is not of exponential type and carries no certificate")
            object.__setattr__(self, "delta", delta)

    @property
    def sites(self) -> SiteSet:
        return self.family.sites

    def family_at(self, eps: float) -> KernelFamily:
        return self.family if self.eps_family is None else self.eps_family(eps)

    def is_first_chaos(self, site: int | None = None) -> bool:
        rows = range(len(self.sites)) if site is None else [site]
        return all(np.all(self.family.norms[s, 2:self.n_max + 1] == 0) for s in rows)


@dataclass(frozen=True, eq=False)
class PathValue:
    """Process values at the sites; ``values`` has shape ``(..., n_sites)``."""

    sites: SiteSet
    values: np.ndarray
    tail: float = 0.0
    warning: bool = False


def truncation_tail(spec: ChaosSpec, kappa: float) -> float:
    """Upper bound ``sum_{n > N_max} kappa^n Delta^n / sqrt(n!)`` on the neglected series."""
    if spec.finite and spec.n_max == spec.family.n_max:
        return 0.0
    if spec.delta is None or not math.isfinite(spec.delta):
        raise ConfigError("no exponential-type certificate for the tail bound")
    if kappa < 0:
        raise ConfigError("kappa must be nonnegative")
    return weighted_tail(spec.delta, kappa, spec.n_max)


def _is_zero(k) -> bool:
    return isinstance(k, SeparableSum) and k.n_terms == 0


def _result(spec: ChaosSpec, values: np.ndarray, eps: float) -> PathValue:
    tail = truncation_tail(spec, eps)
    return PathValue(spec.sites, values, tail, tail > spec.tail_tolerance)


def assemble_Xeps(spec: ChaosSpec, path: NoisePath, eps: float) -> PathValue:
    """``f_0^z + sum_{n=1}^{N_max} eps^n I_n(f_n^z)`` at every site."""
    if eps < 0:
        raise ConfigError("eps must be nonnegative")
    fam = spec.family_at(eps)
    out = np.empty(path.batch_shape + (len(fam.sites),))
    for s in range(len(fam.sites)):
        acc = np.full(path.batch_shape, fam.f0[s])
        if eps > 0:
            for n in range(1, spec.n_max + 1):
                k = fam.kernel(s, n)
                if not _is_zero(k):
                    acc = acc + eps**n * multiple_integral(k, path)
        out[..., s] = acc
    return _result(spec, out, eps)


def assemble_controlled(spec: ChaosSpec, path: NoisePath, u: Control, eps: float) -> PathValue:
    """``sum_n I_n^{eps,u}(f_n^z)``: the process driven by ``eps * dW + u dmu``."""
    if u.is_zero:
        return assemble_Xeps(spec, path, eps)
    if eps < 0:
        raise ConfigError("eps must be nonnegative")
    fam = spec.family_at(eps)
    out = np.empty(path.batch_shape + (len(fam.sites),))
    for s in range(len(fam.sites)):
        acc = np.full(path.batch_shape, fam.f0[s])
        for n in range(1, spec.n_max + 1):
            k = fam.kernel(s, n)
            if not _is_zero(k):
                acc = acc + shifted_multiple_integral(k, path, u, eps)
        out[..., s] = acc
    return _result(spec, out, eps)


def skeleton_site(spec: ChaosSpec, u: Control, site: int) -> float:
    fam = spec.family
    total = float(fam.f0[site])
    for n in range(1, spec.n_max + 1):
        k = fam.kernel(site, n)
        if not _is_zero(k):
            total += deterministic_integral(k, u)
    return total


def skeleton(spec: ChaosSpec, u: Control) -> PathValue:
    """``X^u(z) = sum_n J_n^u(f_n^z)`` with the limit kernels."""
    vals = np.array([skeleton_site(spec, u, s) for s in range(len(spec.sites))])
    return PathValue(spec.sites, vals, truncation_tail(spec, math.sqrt(u.norm_sq)), False)
