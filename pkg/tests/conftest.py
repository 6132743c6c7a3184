import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from homoglab.gaussian_field import (CoefficientMapSpec, TorusGrid, raised_cosine_kernel,
                                     sample_coefficient)

settings.register_profile("homoglab", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("homoglab")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_coefficient(d=2, N=16, L=8.0, seed=0, kind="clipped-sigmoid-isotropic", radius=1.0):
    """Sampled coefficient on a small torus (kernel radius in microscopic units)."""
    grid = TorusGrid(d, N, L)
    kern = raised_cosine_kernel(d, grid.h, radius)
    coef, _ = sample_coefficient(grid, kern, CoefficientMapSpec(kind), seed)
    return coef


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
