"""Shared fixtures and oracle helpers."""

import numpy as np
import pytest

from rawburst import BayerPattern, BurstMeta, RawFrame, SensorConfig

#: pass/fail lines recorded by the acceptance tests, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def dense_matrix(apply_fn, in_shape, out_shape=None):
    """Build the dense matrix of a linear map by probing basis vectors."""
    n = int(np.prod(in_shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(np.asarray(apply_fn(e.reshape(in_shape))).ravel())
    return np.stack(cols, axis=1)


def adjoint_mismatch(apply_fn, adjoint_fn, in_shape, out_shape):
    """Max relative |A^T - dense(adjoint)| over the dense oracle of A."""
    A = dense_matrix(apply_fn, in_shape)
    At = dense_matrix(adjoint_fn, out_shape)
    scale = max(np.abs(A).max(), 1e-12)
    return np.abs(A.T - At).max() / scale


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def sensor():
    return SensorConfig()


def make_meta(exposures, k0=0, scale=1, sensor=None):
    return BurstMeta(
        exposures=np.asarray(exposures, dtype=np.float64),
        k0=k0,
        scale=scale,
        sensor=sensor or SensorConfig(),
    )


def make_frame(data, exposure=1.0, sensor=None):
    return RawFrame(
        data=np.asarray(data, dtype=np.float64),
        exposure=exposure,
        sensor=sensor or SensorConfig(),
    )


ALL_PATTERNS = [
    BayerPattern.RGGB,
    BayerPattern.BGGR,
    BayerPattern.GRBG,
    BayerPattern.GBRG,
]
