import math

import numpy as np
import pytest

from conftest import rank_one_family
from wienerldp.applications import exponential_functional_kernels
from wienerldp.assembly import (ChaosSpec, assemble_controlled, assemble_Xeps, skeleton,
                                truncation_tail)
from wienerldp.grid import ConfigError, GridFn, SiteSet, build_grid, l2_inner
from wienerldp.kernels import KernelFamily, SeparableSum
from wienerldp.noise import Control, NoisePath, isonormal, sample_white_noise


@pytest.fixture
def grid():
    return build_grid(16)


def first_chaos(grid, f0=0.0):
    return ChaosSpec(rank_one_family(GridFn.constant(grid, 1.0), {1: 1.0}, f0=f0), finite=True)


def test_first_chaos_is_scaled_brownian(grid):
    spec = first_chaos(grid)
    path = sample_white_noise(grid, 1, size=20)
    w1 = path.increments.sum(axis=1)
    np.testing.assert_allclose(assemble_Xeps(spec, path, 0.3).values[:, 0], 0.3 * w1, rtol=1e-12)
    one = Control(GridFn.constant(grid, 1.0))
    np.testing.assert_allclose(assemble_controlled(spec, path, one, 0.3).values[:, 0], 0.3 * w1 + 1.0, rtol=1e-12)


def test_eps_zero_gives_f0(grid):
    spec = first_chaos(grid, f0=2.5)
    path = sample_white_noise(grid, 1, size=4)
    np.testing.assert_array_equal(assemble_Xeps(spec, path, 0.0).values, 2.5)


def test_exponential_functional_matches_wick_exponential(grid):
    h = GridFn.constant(grid, 1.0)
    spec = ChaosSpec(exponential_functional_kernels(h, 12))
    # increments with W(h) spread over [-4, 4]
    x = np.linspace(-4.0, 4.0, 41)
    path = NoisePath(grid, np.repeat(x[:, None] / grid.size, grid.size, axis=1))
    vals = assemble_Xeps(spec, path, 0.5).values[:, 0]
    exact = np.exp(0.5 * x - 0.125)
    assert np.max(np.abs(vals / exact - 1.0)) <= 1e-6


def test_controlled_with_zero_control_is_bit_identical(grid):
    spec = ChaosSpec(exponential_functional_kernels(GridFn.from_callable(grid, np.cos), 8))
    path = sample_white_noise(grid, 4, size=10)
    a = assemble_Xeps(spec, path, 0.4).values
    b = assemble_controlled(spec, path, Control.zero(grid), 0.4).values
    np.testing.assert_array_equal(a, b)


def test_skeleton_examples(grid):
    h = GridFn.constant(grid, 1.0)
    spec = ChaosSpec(exponential_functional_kernels(h, 12))
    assert skeleton(spec, Control(h)).values[0] == pytest.approx(math.e, abs=1e-8)
    rng = np.random.default_rng(0)
    f = GridFn(grid, rng.standard_normal(16))
    u = Control.from_values(grid, rng.standard_normal(16))
    fc = ChaosSpec(rank_one_family(f, {1: 1.0}, f0=0.7), finite=True)
    assert skeleton(fc, u).values[0] == pytest.approx(0.7 + l2_inner(f, u.u))
    assert skeleton(fc, Control.zero(grid)).values[0] == pytest.approx(0.7)


def test_skeleton_of_exponential_functional_is_exp(grid):
    h = GridFn.from_callable(grid, lambda t: np.sqrt(2.0) * np.sin(np.pi * t))
    spec = ChaosSpec(exponential_functional_kernels(h, 30))
    rng = np.random.default_rng(1)
    for _ in range(10):
        v = rng.standard_normal(16)
        u = Control.from_values(grid, v)
        u = Control.from_values(grid, v * rng.uniform(0, 2) / math.sqrt(u.norm_sq))
        val = skeleton(spec, u)
        assert val.values[0] == pytest.approx(math.exp(l2_inner(h, u.u)), rel=1e-9)


def test_skeleton_continuous_in_control(grid):
    fine = build_grid(256)
    h = GridFn.from_callable(fine, lambda t: 1.0 + t)
    spec = ChaosSpec(exponential_functional_kernels(h, 15))
    u = Control.from_values(fine, (fine.centers[:, 0] > 0.4).astype(float))
    target = skeleton(spec, u).values[0]
    gaps = []
    for width in (0.2, 0.1, 0.05, 0.025):
        # mollify the step with a moving average of the given width
        t = fine.centers[:, 0]
        mol = np.clip((t - 0.4) / width + 0.5, 0.0, 1.0)
        gaps.append(abs(skeleton(spec, Control.from_values(fine, mol)).values[0] - target))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.01


def test_mean_is_f0(grid):
    spec = ChaosSpec(rank_one_family(GridFn.from_callable(grid, np.cos), {1: 1.0, 2: 0.5, 3: 0.2}, f0=1.5),
                     finite=True)
    x = assemble_Xeps(spec, sample_white_noise(grid, 2, size=100_000), 0.8).values[:, 0]
    assert abs(x.mean() - 1.5) < 5 * x.std() / math.sqrt(x.size)


def test_truncation_tail(grid):
    spec = ChaosSpec(exponential_functional_kernels(GridFn.constant(grid, 1.0), 12))
    assert spec.delta == pytest.approx(1.0)
    t1 = truncation_tail(spec, 1.0)
    assert 0 < t1 <= 2.6e-5
    assert truncation_tail(spec, 0.0) == 0.0
    assert truncation_tail(spec, 2.0) > t1
    assert truncation_tail(first_chaos(grid), 5.0) == 0.0


def test_warning_flag(grid):
    spec = ChaosSpec(exponential_functional_kernels(GridFn.constant(grid, 1.0), 3))
    path = sample_white_noise(grid, 0, size=2)
    assert assemble_Xeps(spec, path, 1.0).warning
    assert not assemble_Xeps(ChaosSpec(exponential_functional_kernels(GridFn.constant(grid, 1.0), 20)),
                             path, 0.1).warning


def test_spec_validation(grid):
    fam = rank_one_family(GridFn.constant(grid, 1.0), {1: 1.0})
    with pytest.raises(ConfigError):
        ChaosSpec(fam, n_max=3)
    spec = ChaosSpec(fam, n_max=0, finite=True)
    with pytest.raises(ConfigError):
        truncation_tail(ChaosSpec(fam, n_max=0, finite=True, delta=None), 1.0)
    assert spec.is_first_chaos()


def test_multi_site_values(grid):
    sites = SiteSet([0.25, 0.75])
    rows = [[SeparableSum.rank_one(GridFn.indicator(grid, 0.0, z), 1)] for z in (0.25, 0.75)]
    spec = ChaosSpec(KernelFamily(sites, [0.0, 0.0], rows), finite=True)
    path = sample_white_noise(grid, 3, size=5)
    vals = assemble_Xeps(spec, path, 1.0).values
    assert vals.shape == (5, 2)
    np.testing.assert_allclose(vals[:, 1], isonormal(path, GridFn.indicator(grid, 0.0, 0.75)))
