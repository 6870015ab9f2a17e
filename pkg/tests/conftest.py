import numpy as np
import pytest

from facescene import assets, camera


@pytest.fixture(scope="session")
def bundle64():
    return assets.synth_bundle(0, 64)


@pytest.fixture(scope="session")
def bundle150():
    return assets.synth_bundle(0, 150)


@pytest.fixture(scope="session")
def intr128():
    return camera.Intrinsics.for_frame(128, 128)


def rel_err(analytic, numeric, floor=1e-6):
    """Relative disagreement with a floor so dead coordinates don't blow up."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / den


def central_diff(f, x0, i, h):
    xp = x0.copy()
    xp[i] += h
    xm = x0.copy()
    xm[i] -= h
    return (f(xp) - f(xm)) / (2.0 * h)
