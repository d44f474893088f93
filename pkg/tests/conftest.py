import functools

import numpy as np
import pytest

from aisnap.core import LinearMap
from aisnap.workloads import ConvDiffConfig, SyntheticConfig, build_convdiff, build_synthetic


@functools.lru_cache(maxsize=None)
def synthetic(n=8, alpha=0.9, block_size=1, density=0.0, seed=0, weights=None):
    return build_synthetic(SyntheticConfig(n=n, alpha=alpha, block_size=block_size,
                                           density=density, seed=seed, weights=weights))


@functools.lru_cache(maxsize=None)
def convdiff(grid_n=12, partition=8, dims=3):
    return build_convdiff(ConvDiffConfig(grid_n=grid_n, partition=partition, dims=dims))


@functools.lru_cache(maxsize=None)
def convdiff_map(grid_n=12, partition=8):
    cd = convdiff(grid_n, partition)
    return cd.map_for(cd.zero())


def random_linear(n, sizes, density, rng, sparse_blocks=False):
    from scipy import sparse
    blocks = {}
    for i in range(n):
        for j in range(n):
            if i == j or rng.random() < density:
                m = rng.standard_normal((sizes[i], sizes[j])) * 0.3
                blocks[(i, j)] = sparse.csr_matrix(m) if sparse_blocks else m
    c = [rng.standard_normal(s) for s in sizes]
    return LinearMap(blocks, c)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
