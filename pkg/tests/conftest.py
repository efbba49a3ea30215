"""Shared models and grids for the suite.

Everything here is deliberately small; the expensive shared runs live as
module-scoped fixtures inside the files that need them.
"""
import numpy as np
import pytest

from resflow import build_grid, build_model, make_reaction


@pytest.fixture(scope="session")
def unit_model():
    """Linear-rate model whose stationary density is identically one."""
    return build_model(0.0, 1.0, make_reaction("power", w=1.0, beta=0.0, q=1.0))


@pytest.fixture(scope="session")
def drifty_model():
    """Logarithmic rate, affine drift, unequal wall densities."""
    return build_model(
        0.0, 1.0, make_reaction("log", w=1.2, q=0.3),
        drift=(0.0, 0.3), boundary_density=(1.0, 0.8),
    )


@pytest.fixture(scope="session")
def signed_model():
    """Signed-root rate with a kink at density one."""
    return build_model(
        0.0, 1.0, make_reaction("signed-power", w=1.0, alpha=0.5, q=0.2),
        boundary_density=1.2,
    )


@pytest.fixture(scope="session")
def grid8():
    return build_grid(0.0, 1.0, 8)


@pytest.fixture(scope="session")
def grid16():
    return build_grid(0.0, 1.0, 16)


@pytest.fixture(scope="session")
def grid32():
    return build_grid(0.0, 1.0, 32)


@pytest.fixture
def sine_density(grid16):
    return 1.0 + 0.1 * np.sin(np.pi * grid16.cell_centers)
