import math

import numpy as np
import pytest
from scipy.stats import norm

from conftest import rank_one_family
from wienerldp.applications import exponential_functional_kernels
from wienerldp.assembly import ChaosSpec
from wienerldp.grid import ConfigError, GridFn, SiteSet, build_grid
from wienerldp.ldp import (EstimationError, EventSpec, convergence_probe, estimate_prob, event_rate,
                           ldp_scan, speed_factor)
from wienerldp.noise import Control

GRID = build_grid(8)
ONE = GridFn.constant(GRID, 1.0)
U1 = Control(ONE)


def gaussian():
    return ChaosSpec(rank_one_family(ONE, {1: 1.0}), finite=True)


def chi_square():
    return ChaosSpec(rank_one_family(ONE, {2: 1.0}), finite=True)


def exp_functional():
    return ChaosSpec(exponential_functional_kernels(ONE, 14))


def gauss_rate(eps):
    return -eps**2 * norm.logsf(1 / eps)


def chi2_rate(eps):
    return -eps**2 * (math.log(2) + norm.logsf(math.sqrt(1 + eps**-2)))


def exp_rate(eps):
    return -eps**2 * norm.logsf((1 + eps**2 / 2) / eps)


def test_oracle_values():
    # the quoted 0.50975 comes from the leading tail expansion; the exact value is 0.509793
    assert gauss_rate(0.05) == pytest.approx(0.50975, abs=1e-4)
    assert chi2_rate(0.1) == pytest.approx(0.5303, abs=2e-4)  # exact 0.530430
    assert 2 * norm.sf(math.sqrt(5)) == pytest.approx(0.02535, abs=1e-5)


# ---------------------------------------------------------------- estimate_prob

def test_whole_space():
    est = estimate_prob(gaussian(), EventSpec.whole_space(), 0.3, 1000, seed=0)
    assert est.p == 1.0 and est.se == 0.0 and est.hits == 1000


def test_event_validation():
    with pytest.raises(ConfigError):
        EventSpec.sup_ball([0.0], 0.0)
    with pytest.raises(ConfigError):
        EventSpec("box")
    with pytest.raises(ConfigError):
        estimate_prob(gaussian(), EventSpec.site_threshold(3, 1.0), 0.1, 1000, 0)
    with pytest.raises(ConfigError):
        estimate_prob(gaussian(), EventSpec.site_threshold(0, 1.0), 0.1, 10, 0)
    with pytest.raises(ConfigError):
        estimate_prob(gaussian(), EventSpec.site_threshold(0, 1.0), 0.0, 1000, 0)


def test_gaussian_tail_untilted_vs_tilted():
    event = EventSpec.site_threshold(0, 1.0)
    truth = norm.sf(5)
    plain = estimate_prob(gaussian(), event, 0.2, 10**6, seed=1)
    assert not plain.reliable and plain.hits < 50
    tilted = estimate_prob(gaussian(), event, 0.2, 10**5, seed=1, tilt=U1)
    assert tilted.reliable and tilted.tilted
    assert abs(tilted.p - truth) < 3 * tilted.se
    assert tilted.se / tilted.p < 0.02


def test_chi_square_untilted():
    est = estimate_prob(chi_square(), EventSpec.site_threshold(0, 1.0), 0.5, 10**6, seed=2)
    assert est.reliable
    assert abs(est.p - 2 * norm.sf(math.sqrt(5))) < 3 * est.se


def test_tilted_and_untilted_agree_on_common_events():
    spec = gaussian()
    for level, eps in [(1.0, 1.0), (0.5, 0.8)]:
        event = EventSpec.site_threshold(0, level)
        a = estimate_prob(spec, event, eps, 40_000, seed=3)
        b = estimate_prob(spec, event, eps, 40_000, seed=4, tilt=Control(GridFn.constant(GRID, level)))
        assert a.p >= 0.1
        assert abs(a.p - b.p) < 3 * math.hypot(a.se, b.se)


def test_lower_threshold_and_mixture_tilt():
    spec = chi_square()
    event = EventSpec.site_threshold(0, 1.0)
    truth = 2 * norm.sf(math.sqrt(1 + 0.2**-2))
    mix = estimate_prob(spec, event, 0.2, 50_000, seed=5, tilt=[U1, Control(-ONE)])
    assert abs(mix.p - truth) < 3 * mix.se
    low = estimate_prob(gaussian(), EventSpec.site_threshold(0, -1.0, "<="), 0.25, 50_000, seed=6,
                        tilt=Control(-ONE))
    assert abs(low.p - norm.sf(4)) < 3 * low.se


def test_tilted_coverage():
    spec = gaussian()
    event = EventSpec.site_threshold(0, 1.0)
    eps = 1 / 3
    truth = norm.sf(3)
    covered = 0
    for rep in range(50):
        est = estimate_prob(spec, event, eps, 2000, seed=rep, tilt=U1)
        covered += abs(est.p - truth) <= 3 * est.se
    assert covered >= 48  # >= 95% of 50


def test_collapse_raises_with_diagnostics():
    spec = gaussian()
    event = EventSpec.site_threshold(0, 1.0)
    with pytest.raises(EstimationError) as info:
        estimate_prob(spec, event, 0.1, 1000, seed=0, tilt=Control(-ONE))
    assert info.value.diagnostics["ess"] == 0.0
    with pytest.raises(EstimationError) as info:
        estimate_prob(spec, event, 0.1, 1000, seed=0, tilt=Control(GridFn.constant(GRID, 0.75)))
    assert 0 < info.value.diagnostics["ess"] < 50


def test_thread_count_does_not_change_estimate():
    spec = exp_functional()
    event = EventSpec.site_threshold(0, math.e)
    a = estimate_prob(spec, event, 0.2, 30_000, seed=9, tilt=U1, threads=1)
    b = estimate_prob(spec, event, 0.2, 30_000, seed=9, tilt=U1, threads=4)
    assert a == b


def test_sup_ball_event():
    g = build_grid(8)
    spec = ChaosSpec(rank_one_family(GridFn.constant(g, 1.0), {1: 1.0}, sites=SiteSet([0.5, 1.0])),
                     finite=True)
    ev = EventSpec.sup_ball([1.0, 1.0], 0.05)
    rate = event_rate(spec, ev)
    assert rate.lam == pytest.approx(0.5)
    # both sites carry the same W(1); the event is |eps W - 1| <= 0.05
    est = estimate_prob(spec, ev, 0.5, 50_000, seed=1, tilt=rate.u_star)
    truth = norm.cdf(1.05 / 0.5) - norm.cdf(0.95 / 0.5)
    assert abs(est.p - truth) < 3 * est.se


# ---------------------------------------------------------------- ldp_scan

def test_speed_factor():
    assert speed_factor(0.1, "eps") == 0.1
    assert speed_factor(0.1, "eps2") == pytest.approx(0.01)
    with pytest.raises(ConfigError):
        speed_factor(0.1, "log")


def test_gaussian_scan():
    rep = ldp_scan(gaussian(), EventSpec.site_threshold(0, 1.0), [0.05], N=10**5, seed=0)
    row = rep.rows[0]
    assert rep.theory == pytest.approx(0.5)
    assert row.theory_rate == rep.theory and row.tilt_norm == pytest.approx(1.0)
    assert abs(row.empirical_rate - 0.510) <= 0.01
    assert abs(row.empirical_rate - gauss_rate(0.05)) <= 1e-3


def test_chi_square_scan():
    rep = ldp_scan(chi_square(), EventSpec.site_threshold(0, 1.0), [0.1], N=10**5, seed=0)
    assert rep.theory == pytest.approx(0.5) and rep.alternatives == 1
    assert abs(rep.rows[0].empirical_rate - 0.530) <= 0.01


def test_exponential_functional_scan():
    rep = ldp_scan(exp_functional(), EventSpec.site_threshold(0, math.e), [0.05], N=10**5, seed=0)
    assert rep.theory == pytest.approx(0.5)
    assert abs(rep.rows[0].empirical_rate - exp_rate(0.05)) <= 0.02


@pytest.mark.parametrize("make, truth", [(gaussian, gauss_rate), (chi_square, chi2_rate),
                                         (exp_functional, exp_rate)])
def test_empirical_rate_monotone(make, truth):
    level = math.e if make is exp_functional else 1.0
    eps = [0.4, 0.2, 0.1, 0.05]
    rep = ldp_scan(make(), EventSpec.site_threshold(0, level), eps, N=40_000, seed=11)
    gaps = [abs(r.empirical_rate - rep.theory) for r in rep.rows]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    for r in rep.rows:
        assert abs(r.empirical_rate - truth(r.epsilon)) < 5 * speed_factor(r.epsilon, "eps2") * r.stderr / r.estimate


def test_scan_speed_and_ordering():
    event = EventSpec.site_threshold(0, 1.0)
    a = ldp_scan(gaussian(), event, [0.2, 0.1], speed="eps", N=5000, seed=0)
    b = ldp_scan(gaussian(), event, [0.2, 0.1], speed="eps2", N=5000, seed=0)
    for ra, rb in zip(a.rows, b.rows):
        assert ra.estimate == rb.estimate
        assert rb.empirical_rate == pytest.approx(ra.empirical_rate * ra.epsilon)
    with pytest.raises(ConfigError):
        ldp_scan(gaussian(), event, [0.1, 0.2], N=5000)
    with pytest.raises(ConfigError):
        ldp_scan(gaussian(), event, [0.1], speed="lin", N=5000)


def test_infeasible_event_untilted():
    rep = ldp_scan(chi_square(), EventSpec.site_threshold(0, -2.0, "<="), [0.5], N=1000, seed=0)
    assert math.isinf(rep.theory) and rep.certificate
    row = rep.rows[0]
    assert row.estimate == 0.0 and math.isinf(row.empirical_rate) and row.tilt_norm == 0.0


# ---------------------------------------------------------------- convergence probe

def test_probe_first_chaos():
    res = convergence_probe(gaussian(), U1, [0.4, 0.2, 0.1, 0.05], N=20_000, seed=0)
    for row in res.rows:
        assert abs(row.rms / row.epsilon - 1.0) < 3 * row.stderr / row.epsilon + 1e-12
    ratio = res.rows[1].rms / res.rows[0].rms
    assert ratio == pytest.approx(0.5, abs=0.1)
    assert res.slope == pytest.approx(1.0, abs=1e-9)  # common noise: the gap is exactly eps * W


def test_probe_exponential_functional():
    res = convergence_probe(exp_functional(), U1, [0.4, 0.2, 0.1, 0.05], N=20_000, seed=0)
    assert 0.85 <= res.slope <= 1.15
    with pytest.raises(ConfigError):
        convergence_probe(exp_functional(), U1, [0.1, -0.1], N=100, seed=0)
