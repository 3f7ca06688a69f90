import numpy as np
import pytest

from wienerldp.grid import GridFn, SiteSet, build_grid
from wienerldp.kernels import KernelFamily, SeparableSum


@pytest.fixture
def unit_grid():
    return build_grid(16)


def rank_one_family(g: GridFn, orders: dict, f0: float = 0.0, sites=None) -> KernelFamily:
    """Family with kernels ``coef * g^(x)n`` at the listed orders, zero elsewhere."""
    sites = sites or SiteSet(np.array([0.0]))
    n_max = max(orders)
    row = [SeparableSum.rank_one(g, n, orders[n]) if n in orders else SeparableSum.zero(g.grid, n)
           for n in range(1, n_max + 1)]
    return KernelFamily(sites, np.full(len(sites), f0), [row] * len(sites))
