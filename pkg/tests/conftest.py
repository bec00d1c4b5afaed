"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from moboflow.envs import BagBuilder, HyperGrid


def central_diff(fn, params, h=1e-5):
    """Central finite-difference gradient of scalar fn over a flat vector."""
    grad = np.zeros_like(params)
    for i in range(len(params)):
        p = params.copy()
        p[i] += h
        hi = fn(p)
        p[i] -= 2 * h
        lo = fn(p)
        grad[i] = (hi - lo) / (2 * h)
    return grad


def assert_grads_close(analytic, numeric, rel_tol=1e-4, abs_floor=1e-8,
                       min_frac=1.0):
    """Per-coordinate relative comparison; coordinates with tiny analytic
    values are compared absolutely."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    small = np.abs(analytic) < abs_floor
    ok = np.empty(analytic.shape, dtype=bool)
    ok[small] = np.abs(analytic[small] - numeric[small]) < 1e-6
    big = ~small
    denom = np.maximum(np.abs(analytic[big]), np.abs(numeric[big]))
    ok[big] = np.abs(analytic[big] - numeric[big]) <= rel_tol * denom
    frac = ok.mean() if ok.size else 1.0
    assert frac >= min_frac, (
        f"only {frac:.4f} of {ok.size} gradient coordinates within tolerance; "
        f"worst abs err {np.max(np.abs(analytic - numeric)):.3g}")


@pytest.fixture
def grid_2x4():
    return HyperGrid(2, 4)


@pytest.fixture
def grid_2x3():
    return HyperGrid(2, 3)


@pytest.fixture
def bag_3x3():
    return BagBuilder(3, 3)


@pytest.fixture
def bag_2x2():
    return BagBuilder(2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
