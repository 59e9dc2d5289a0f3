"""Shared builders for the rtnlinv tests."""

import numpy as np
import pytest

from rtnlinv.fftops import FFT_COUNTER
from rtnlinv.nlinv import Estimate, Linearization
from rtnlinv.planner import ReconPlan
from rtnlinv.seqsim import CoilModel, MotionSpec, PhantomSpec, TrajectorySpec


def random_complex(rng, shape, scale=1.0):
    return (scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))).astype(
        np.complex64
    )


def random_estimate(plan, channels, rng, coil_dc=None):
    """Estimate with rho near one and coil profiles of order one."""
    G, G_c = plan.grid_size, plan.coil_grid
    rho = (1.0 + random_complex(rng, (G, G), 0.1)).astype(np.complex64)
    coils = random_complex(rng, (channels, G_c, G_c), 0.5)
    # orthonormal W^-1 maps a DC value of G to a profile of one
    coils[:, G_c // 2, G_c // 2] += G if coil_dc is None else coil_dc
    return Estimate(rho, coils)


def linearization(plan, channels, rng):
    lin = Linearization(random_estimate(plan, channels, rng), plan)
    lin.decode(range(channels), "setup")
    return lin


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_plan():
    """N=6 on a 16 grid: gamma 1.33 is allowed by the half-pixel rounding slack."""
    return ReconPlan(image_size=6, grid_size=16)


@pytest.fixture
def desk_phantom():
    return PhantomSpec(
        image_size=16,
        motion=MotionSpec(ellipse=4, amplitude=0.03, period=12.0),
        coils=CoilModel(count=4),
        blur=1.0,
    )


@pytest.fixture
def desk_trajectory():
    return TrajectorySpec.for_image(16, spokes=11, turns=5)


@pytest.fixture(autouse=True)
def reset_fft_counter():
    FFT_COUNTER.reset()
    yield
