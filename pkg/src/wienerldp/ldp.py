"""Rare-event probabilities of the noisy process: plain and exponentially
tilted Monte Carlo, scans of the empirical rate over eps, and the mean-square
distance between the controlled process and its skeleton.

Tilting with a control u samples the noise with mean shift ``u * mu / eps``
per cell and reweights by the Gaussian likelihood ratio. Several controls can
be given at once (e.g. the two dominating points of a symmetric event); the
proposal is then the equal-weight mixture of the shifts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .assembly import ChaosSpec, assemble_controlled, assemble_Xeps, skeleton
from .grid import ConfigError
from .noise import Control, NoisePath, map_batches, standard_increments
from .rate import RateResult, rate_path, rate_pointwise

MIN_ESS = 50.0
SPEEDS = ("eps", "eps2")


class EstimationError(RuntimeError):
    """Importance sampling collapsed (too few effective samples)."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class EventSpec:
    """``site_threshold``: ``X(z) >= level`` (or ``<=``); ``sup_ball``:
    ``max_z |X(z) - center(z)| <= radius``; ``all``: the whole space."""

    kind: str
    site: int = 0
    level: float = 0.0
    direction: str = ">="
    center: tuple = ()
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in ("site_threshold", "sup_ball", "all"):
            raise ConfigError(f"unknown event kind {self.kind!r}")
        if self.direction not in (">=", "<="):
            raise ConfigError("direction must be '>=' or '<='")
        if self.kind == "sup_ball" and not self.radius > 0:
            raise ConfigError("ball radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def site_threshold(cls, site: int, level: float, direction: str = ">=") -> "EventSpec":
        return cls("site_threshold", site=int(site), level=float(level), direction=direction)

    @classmethod
    def sup_ball(cls, center, radius: float) -> "EventSpec":
        return cls("sup_ball", center=tuple(np.asarray(center, dtype=float).ravel()), radius=float(radius))

    @classmethod
    def whole_space(cls) -> "EventSpec":
        return cls("all")

    def contains(self, values: np.ndarray) -> np.ndarray:
        """Event indicator for process values of shape ``(..., n_sites)``."""
        if self.kind == "all":
            return np.ones(values.shape[:-1], dtype=bool)
        if self.kind == "site_threshold":
            x = values[..., self.site]
            return x >= self.level if self.direction == ">=" else x <= self.level
        c = np.asarray(self.center)
        if c.size != values.shape[-1]:
            raise ConfigError("ball center needs one value per site")
        return np.max(np.abs(values - c), axis=-1) <= self.radius


@dataclass(frozen=True)
class ProbEstimate:
    p: float
    se: float
    ess: float
    hits: int
    n: int
    tilted: bool
    reliable: bool


def _as_controls(tilt) -> list:
    if tilt is None:
        return []
    if isinstance(tilt, Control):
        return [] if tilt.is_zero else [tilt]
    return [u for u in tilt if not u.is_zero]


def _check_spec(spec: ChaosSpec, event: EventSpec):
    if event.kind == "site_threshold" and not 0 <= event.site < len(spec.sites):
        raise ConfigError("event site out of range")
    if event.kind == "sup_ball" and len(event.center) != len(spec.sites):
        raise ConfigError("ball center needs one value per site")


def estimate_prob(spec: ChaosSpec, event: EventSpec, eps: float, N: int, seed: int,
                  tilt=None, threads: int | None = None, stream: Sequence[int] = ()) -> ProbEstimate:
    """Monte Carlo estimate of ``P(X^eps in event)`` with its standard error.

    ``tilt`` is None, one Control or a list of Controls (mixture proposal).
    Tilted runs whose effective sample size falls below 50 raise
    ``EstimationError``; untilted runs report ``reliable=False`` instead.
    """
    if N < 100:
        raise ConfigError("need at least 100 samples")
    if not eps > 0:
        raise ConfigError("eps must be positive")
    _check_spec(spec, event)
    grid = spec.family.grid
    controls = _as_controls(tilt)
    for u in controls:
        grid.check_same(u.grid)
    shifts = np.array([u.cell_mass / eps for u in controls])  # (J, m)
    drift = np.array([u.values / eps for u in controls])
    half_norm = np.array([0.5 * u.norm_sq / eps**2 for u in controls])

    def batch(rng, count, b):
        inc = standard_increments(grid, rng, count)
        if controls:
            comp = rng.integers(len(controls), size=count)
            inc = inc + shifts[comp]
            log_l = inc @ drift.T - half_norm  # (count, J)
            log_w = -(logsumexp(log_l, axis=1) - math.log(len(controls)))
        else:
            log_w = np.zeros(count)
        x = assemble_Xeps(spec, NoisePath(grid, inc), eps).values
        hit = event.contains(x)
        lw = log_w[hit]
        if lw.size == 0:
            return -math.inf, -math.inf, 0
        return float(logsumexp(lw)), float(logsumexp(2.0 * lw)), int(hit.sum())

    parts = map_batches(batch, N, seed, stream, threads)
    lse1 = float(logsumexp([p[0] for p in parts])) if any(p[2] for p in parts) else -math.inf
    lse2 = float(logsumexp([p[1] for p in parts])) if any(p[2] for p in parts) else -math.inf
    hits = sum(p[2] for p in parts)
    tilted = bool(controls)
    if hits == 0:
        if tilted:
            raise EstimationError("no tilted sample hit the event", {"N": N, "eps": eps, "ess": 0.0})
        return ProbEstimate(0.0, 0.0, 0.0, 0, N, False, False)
    log_p = lse1 - math.log(N)
    p = math.exp(log_p)
    ratio = math.exp(lse2 - math.log(N) - 2.0 * log_p)  # E[(w 1)^2] / p^2 >= 1
    var = N / (N - 1) * p * p * max(ratio - 1.0, 0.0)
    se = math.sqrt(var / N)
    ess = math.exp(2.0 * lse1 - lse2)
    if tilted and ess < MIN_ESS:
        raise EstimationError("effective sample size below threshold",
                              {"N": N, "eps": eps, "ess": ess, "hits": hits, "estimate": p})
    return ProbEstimate(p, se, ess, hits, N, tilted, ess >= MIN_ESS)


# ---------------------------------------------------------------------------
# scans


def speed_factor(eps: float, speed: str) -> float:
    if speed not in SPEEDS:
        raise ConfigError(f"speed must be one of {SPEEDS}")
    return eps if speed == "eps" else eps * eps


@dataclass(frozen=True)
class LdpRow:
    epsilon: float
    estimate: float
    stderr: float
    empirical_rate: float
    theory_rate: float
    tilt_norm: float
    ess: float


@dataclass(frozen=True)
class LdpReport:
    rows: tuple
    theory: float
    speed: str
    certificate: str | None = None
    solver_converged: bool = True
    alternatives: int = 0

    COLUMNS = ("epsilon", "estimate", "stderr", "empirical_rate", "theory_rate", "tilt_norm", "ess")


def event_rate(spec: ChaosSpec, event: EventSpec, **solver) -> RateResult:
    """Rate at the event's dominating point (threshold value or ball center)."""
    _check_spec(spec, event)
    if event.kind == "site_threshold":
        return rate_pointwise(spec, event.site, event.level, **solver)
    if event.kind == "sup_ball":
        return rate_path(spec, np.asarray(event.center), **solver)
    raise ConfigError("the whole space has no dominating point")


def ldp_scan(spec: ChaosSpec, event: EventSpec, eps_list: Sequence[float], speed: str = "eps2",
             N: int = 10**5, seed: int = 0, tilt=None, threads: int | None = None,
             solver: dict | None = None) -> LdpReport:
    """Tilted estimates and empirical rates ``-s(eps) log p`` over a decreasing eps list.

    The tilt defaults to the rate solver's optimal control (mixed with any
    equally cheap alternatives) and is the same for every eps.
    """
    eps_list = [float(e) for e in eps_list]
    if any(not e > 0 for e in eps_list):
        raise ConfigError("eps values must be positive")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("eps list must be strictly decreasing")
    speed_factor(1.0, speed)
    rate = event_rate(spec, event, **(solver or {}))
    if tilt is None and rate.u_star is not None and not rate.is_infinite:
        controls = [rate.u_star, *rate.alternatives]
    else:
        controls = _as_controls(tilt)
    tilt_norm = max((math.sqrt(u.norm_sq) for u in controls), default=0.0)
    rows = []
    for i, eps in enumerate(eps_list):
        est = estimate_prob(spec, event, eps, N, seed, controls or None, threads, stream=(i,))
        emp = -speed_factor(eps, speed) * math.log(est.p) if est.p > 0 else math.inf
        rows.append(LdpRow(eps, est.p, est.se, emp, rate.lam, tilt_norm, est.ess))
    return LdpReport(tuple(rows), rate.lam, speed, rate.certificate, rate.converged, len(rate.alternatives))


@dataclass(frozen=True)
class ProbeRow:
    epsilon: float
    rms: float
    stderr: float


@dataclass(frozen=True)
class ProbeResult:
    rows: tuple
    slope: float


def convergence_probe(spec: ChaosSpec, u: Control, eps_list: Sequence[float], N: int, seed: int,
                      threads: int | None = None) -> ProbeResult:
    """RMS over paths and sites of ``X^{eps,u} - X^u`` for each eps, plus the log-log slope.

    All eps values reuse the same noise samples.
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list or any(not e > 0 for e in eps_list):
        raise ConfigError("eps values must be positive")
    grid = spec.family.grid
    target = skeleton(spec, u).values

    def batch_for(eps):
        def batch(rng, count, b):
            path = NoisePath(grid, standard_increments(grid, rng, count))
            d2 = np.mean((assemble_controlled(spec, path, u, eps).values - target) ** 2, axis=-1)
            return float(d2.sum()), float((d2 * d2).sum())
        return batch

    rows = []
    for eps in eps_list:
        parts = map_batches(batch_for(eps), N, seed, (), threads)
        s1 = math.fsum(p[0] for p in parts)
        s2 = math.fsum(p[1] for p in parts)
        ms = s1 / N
        var = max(s2 / N - ms * ms, 0.0) * N / max(N - 1, 1)
        rms = math.sqrt(ms)
        se = math.sqrt(var / N) / (2.0 * rms) if rms > 0 else 0.0
        rows.append(ProbeRow(eps, rms, se))
    eps_arr = np.array([r.epsilon for r in rows])
    rms_arr = np.array([r.rms for r in rows])
    ok = rms_arr > 0
    slope = float(np.polyfit(np.log(eps_arr[ok]), np.log(rms_arr[ok]), 1)[0]) if ok.sum() >= 2 else math.nan
    return ProbeResult(tuple(rows), slope)
