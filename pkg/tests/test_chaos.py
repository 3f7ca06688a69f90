import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wienerldp.chaos import (NOISE, NU, ThetaPattern, brute_force_offdiag, deterministic_integral,
                             hermite_poly, hermite_value, mixed_integral, multiple_integral,
                             shifted_integral_by_patterns, shifted_multiple_integral, theoretical_bound,
                             theta_patterns, wick_product)
from wienerldp.grid import ConfigError, GridFn, build_grid, l2_inner
from wienerldp.kernels import DenseSym, SeparableSum, symmetrize_axes, to_dense
from wienerldp.noise import Control, NoisePath, isonormal, sample_white_noise, shift_noise


def _random_dense(rng, g, n):
    return DenseSym.from_full(g, symmetrize_axes(rng.standard_normal((g.size,) * n), n))


def test_theta_patterns_counts():
    for n in range(5):
        assert len(theta_patterns(n)) == 2**n
        for k in range(n + 1):
            pats = theta_patterns(n, k)
            assert len(pats) == math.comb(n, k)
            assert all(p.k == k for p in pats)
    with pytest.raises(ConfigError):
        ThetaPattern(("NU", "X"))


def test_hermite_examples():
    x = np.array([-1.3, 0.0, 0.7, 2.0])
    np.testing.assert_allclose(hermite_poly(2, x), x**2 - 1)
    np.testing.assert_allclose(hermite_poly(3, x), x**3 - 3 * x)
    g = build_grid(4)
    path = sample_white_noise(g, 0, size=5)
    h = GridFn.constant(g, 1.0)
    np.testing.assert_allclose(hermite_value(0, h, path), 1.0)
    w = isonormal(path, h)
    np.testing.assert_allclose(hermite_value(2, h, path), w**2 - 1)
    np.testing.assert_allclose(hermite_value(3, GridFn.constant(g, 0.0), path), 0.0)


def test_wick_product_matches_hermite_for_repeated_factor():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(7)
    var = 1.7
    xs = np.repeat(x[:, None], 4, axis=1)
    gram = np.full((4, 4), var)
    np.testing.assert_allclose(wick_product(xs, gram), hermite_poly(4, x, var), rtol=1e-10)


def test_first_order_is_isonormal():
    g = build_grid(8)
    path = sample_white_noise(g, 1, size=10)
    f = GridFn.from_callable(g, np.cos)
    k = SeparableSum.rank_one(f, 1)
    np.testing.assert_allclose(multiple_integral(k, path), isonormal(path, f))
    np.testing.assert_allclose(multiple_integral(to_dense(k), path), isonormal(path, f))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_dense_integral_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    g = build_grid(5, measure_spec=rng.uniform(0.5, 1.5, 5))
    f = _random_dense(rng, g, n)
    path = sample_white_noise(g, seed)
    brute = brute_force_offdiag(f.full, [path.increments] * n, [True] * n)
    assert float(multiple_integral(f, path)) == pytest.approx(brute, rel=1e-10, abs=1e-12)


def test_offdiag_rank_one_matches_dense():
    rng = np.random.default_rng(4)
    g = build_grid(6)
    k = SeparableSum(g, 3, np.array([1.0, -0.5]), rng.standard_normal((2, 3, 6)))
    path = sample_white_noise(g, 2, size=4)
    np.testing.assert_allclose(multiple_integral(k, path, method="offdiag"),
                               multiple_integral(to_dense(k), path), rtol=1e-10)


def test_disjoint_product_factorises():
    g = build_grid(8)
    a, b = GridFn.indicator(g, 0.0, 0.5), GridFn.from_callable(g, lambda t: t * (t > 0.5))
    k = SeparableSum(g, 2, np.array([1.0]), np.array([[a.values, b.values]]))
    path = sample_white_noise(g, 5, size=6)
    expect = isonormal(path, a) * isonormal(path, b)
    for method in ("wick", "offdiag"):
        np.testing.assert_allclose(multiple_integral(k, path, method=method), expect, rtol=1e-12)


def test_wick_is_default_for_separable():
    g = build_grid(16)
    h = GridFn.constant(g, 1.0)
    path = sample_white_noise(g, 3, size=8)
    np.testing.assert_allclose(multiple_integral(SeparableSum.rank_one(h, 3), path), hermite_value(3, h, path))
    with pytest.raises(ConfigError):
        multiple_integral(to_dense(SeparableSum.rank_one(h, 2)), path, method="wick")


def test_deterministic_integral_examples():
    rng = np.random.default_rng(1)
    g = build_grid(6)
    u = Control.from_values(g, rng.standard_normal(6))
    assert deterministic_integral(SeparableSum.rank_one(u.u, 1), u) == pytest.approx(u.norm_sq)
    gg = GridFn(g, rng.standard_normal(6))
    assert deterministic_integral(SeparableSum.rank_one(gg, 2), u) == pytest.approx(l2_inner(gg, u.u) ** 2)
    f = _random_dense(rng, g, 3)
    nu = u.cell_mass
    brute = sum(f.full[i, j, k] * nu[i] * nu[j] * nu[k] for i, j, k in itertools.product(range(6), repeat=3))
    assert deterministic_integral(f, u) == pytest.approx(brute, rel=1e-12)


def test_mixed_integral_examples():
    rng = np.random.default_rng(2)
    g = build_grid(5)
    u = Control.from_values(g, rng.standard_normal(5))
    path = sample_white_noise(g, 7, size=3)
    f = _random_dense(rng, g, 2)
    np.testing.assert_allclose(mixed_integral(f, ThetaPattern((NU, NU)), path, u, 0.4),
                               deterministic_integral(f, u), rtol=1e-12)
    np.testing.assert_allclose(mixed_integral(f, ThetaPattern((NOISE, NOISE)), path, u, 1.0),
                               multiple_integral(f, path), rtol=1e-12)
    # (NU, NOISE) on sym(g (x) h): NU slots are plain sums, brute force over all index pairs
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    k = SeparableSum(g, 2, np.array([1.0]), np.array([[a, b]]))
    val = mixed_integral(k, ThetaPattern((NU, NOISE)), path, u, 1.0, method="offdiag")
    full = to_dense(k).full
    for p in range(3):
        brute = brute_force_offdiag(full, [u.cell_mass, path.increments[p]], [False, True])
        assert val[p] == pytest.approx(brute, rel=1e-10)
    with pytest.raises(ConfigError):
        mixed_integral(f, ThetaPattern((NU,)), path, u, 1.0)


def test_shifted_examples():
    rng = np.random.default_rng(3)
    g = build_grid(6)
    u = Control.from_values(g, rng.standard_normal(6))
    path = sample_white_noise(g, 9, size=4)
    f1 = GridFn(g, rng.standard_normal(6))
    k1 = SeparableSum.rank_one(f1, 1)
    np.testing.assert_allclose(shifted_multiple_integral(k1, path, u, 0.3),
                               0.3 * isonormal(path, f1) + l2_inner(f1, u.u), rtol=1e-12)
    f = _random_dense(rng, g, 3)
    np.testing.assert_allclose(shifted_multiple_integral(f, path, u, 0.0), deterministic_integral(f, u), rtol=1e-12)
    k = SeparableSum.rank_one(f1, 3)
    np.testing.assert_allclose(shifted_multiple_integral(k, path, u, 0.0), deterministic_integral(k, u), rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.sampled_from(["dense", "rank_one", "separable"]), st.floats(0.05, 2.0),
       st.integers(0, 2**31 - 1))
def test_route_a_equals_route_b(n, kind, eps, seed):
    rng = np.random.default_rng(seed)
    g = build_grid(5)
    if kind == "dense":
        f = _random_dense(rng, g, n)
    elif kind == "rank_one":
        f = SeparableSum.rank_one(GridFn(g, rng.standard_normal(5)), n, rng.normal())
    else:
        f = SeparableSum(g, n, rng.standard_normal(2), rng.standard_normal((2, n, 5)))
    u = Control.from_values(g, rng.standard_normal(5))
    path = sample_white_noise(g, seed, size=3)
    for method in ("auto", "offdiag"):
        a = shifted_multiple_integral(f, path, u, eps, method)
        b = shifted_integral_by_patterns(f, path, u, eps, method)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12 * (1 + np.abs(a).max()))


def test_shifted_offdiag_matches_brute_force_on_shifted_increments():
    rng = np.random.default_rng(5)
    g = build_grid(4)
    f = _random_dense(rng, g, 3)
    u = Control.from_values(g, rng.standard_normal(4))
    path = sample_white_noise(g, 1)
    # route (a) with the NU part allowed on the diagonal: expand each slot as eps dW + nu
    val = float(shifted_multiple_integral(f, path, u, 0.7))
    d, nu = 0.7 * path.increments, u.cell_mass
    brute = 0.0
    for mask in itertools.product([True, False], repeat=3):
        brute += brute_force_offdiag(f.full, [d if m else nu for m in mask], list(mask))
    assert val == pytest.approx(brute, rel=1e-10)


def test_theoretical_bound_examples():
    assert theoretical_bound(3, 0, 5.0, 2.0, 1.5) == pytest.approx(math.sqrt(6) * 1.5)
    assert theoretical_bound(1, "ALL", 0.0, 2.0, 1.0) == pytest.approx(2.0)
    assert theoretical_bound(2, "ALL", 1.0, 4.0, 1.0) == pytest.approx(33.94, abs=0.01)
    assert theoretical_bound(2, 1, 4.0, 2.0, 1.0, eps=0.5) == pytest.approx(0.5 * 1 * 2.0)
    with pytest.raises(ConfigError):
        theoretical_bound(2, 0, 1.0, 1.5, 1.0)


def test_isometry_small_budget():
    g = build_grid(32)
    h = GridFn.constant(g, 1.0)
    path = sample_white_noise(g, 12, size=50_000)
    for n in (1, 2, 3):
        x = multiple_integral(SeparableSum.rank_one(h, n), path)
        se = np.sqrt(np.var(x**2) / x.size)
        assert abs(np.mean(x**2) - math.factorial(n)) < 5 * se


def test_batch_shapes():
    g = build_grid(4)
    path = NoisePath(g, np.zeros((2, 3, 4)))
    f = SeparableSum.rank_one(GridFn.constant(g, 1.0), 2)
    assert multiple_integral(f, path).shape == (2, 3)
    assert multiple_integral(to_dense(f), path).shape == (2, 3)
    assert shifted_multiple_integral(f, path, Control.zero(g), 1.0).shape == (2, 3)
    assert shift_noise(path, Control.zero(g), 1.0).batch_shape == (2, 3)
