import numpy as np
import pytest
from scipy.integrate import quad

from geomorse.curve import curve_from_function
from geomorse.surface import MetricSurface


def ellipse_arclength(a, b):
    """Independent oracle: adaptive quadrature of the ellipse arclength integrand."""
    val, _ = quad(lambda t: np.hypot(a * np.sin(t), b * np.cos(t)), 0.0, 2 * np.pi, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


def latitude(surface, z0, n=128):
    r = np.sqrt(1 - z0 * z0)
    return curve_from_function(lambda t: np.c_[r * np.cos(t), r * np.sin(t), z0 + 0 * t], n, surface)


def wavy_equator(surface, amp, k=3, n=128, phase=0.0):
    return curve_from_function(
        lambda t: np.c_[np.cos(t), np.sin(t), amp * np.sin(k * t + phase)], n, surface
    )


@pytest.fixture(scope="session")
def sphere():
    return MetricSurface.round(1.0)


@pytest.fixture(scope="session")
def ellipsoid():
    return MetricSurface.ellipsoid(1.0, 1.1, 1.2)


@pytest.fixture(scope="session")
def equator(sphere):
    return latitude(sphere, 0.0, 128)
