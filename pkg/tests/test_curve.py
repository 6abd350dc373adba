import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ellipse_arclength, latitude, wavy_equator
from geomorse.curve import (
    DiscreteCurve,
    curve_from_function,
    geodesic_curvature,
    is_embedded,
    length,
    min_segment_separation,
    read_curve_csv,
    resample,
    spacing_cv,
    to_varifold,
    write_curve_csv,
)
from geomorse.errors import DegenerateCurveError, ResolutionError
from geomorse.surface import principal_ellipses


def cap_curve(sphere, fx, fy, n):
    """Curve near the north pole from planar coordinates."""

    def fun(t):
        x, y = fx(t), fy(t)
        return np.c_[x, y, np.sqrt(1 - x * x - y * y)]

    return curve_from_function(fun, n, sphere)


def test_equator_length(equator):
    assert latitude(equator.surface, 0.0, 256).length() == pytest.approx(2 * np.pi, abs=1e-3)


def test_point_curve_length_zero(sphere):
    p = DiscreteCurve.point_curve([0, 0, 1.0], sphere)
    assert p.is_point
    assert length(p) == 0.0


def test_ellipse_length_matches_quadrature(ellipsoid):
    c = principal_ellipses(ellipsoid, 512)[0]
    assert c.length() == pytest.approx(ellipse_arclength(1.0, 1.1), abs=1e-3)
    assert c.length() == pytest.approx(6.6011, abs=1e-3)


def test_length_converges_at_second_order_or_better(sphere):
    def fun(t):
        return np.c_[np.cos(t), np.sin(t), 0.2 * np.sin(2 * t)]

    ref = curve_from_function(fun, 2048, sphere).length()
    errs = [abs(curve_from_function(fun, n, sphere).length() - ref) for n in (32, 64, 128)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 2.0)


def test_geodesic_curvature_examples(sphere, ellipsoid, equator):
    assert np.max(np.abs(geodesic_curvature(equator))) < 1e-4
    theta0 = 1.0
    lat = latitude(sphere, np.cos(theta0), 256)
    assert np.allclose(np.abs(geodesic_curvature(lat)), 1 / np.tan(theta0), atol=1e-3)
    for c in principal_ellipses(ellipsoid, 256):
        assert np.max(np.abs(geodesic_curvature(c))) < 5e-4


def test_geodesic_curvature_rejects_points(sphere):
    with pytest.raises(DegenerateCurveError):
        geodesic_curvature(DiscreteCurve.point_curve([0, 0, 1.0], sphere))


def test_curvature_converges_at_second_order(sphere):
    from geomorse.curve import segment_lengths

    def fun(t):
        return np.c_[np.cos(t), np.sin(t), 0.2 * np.sin(2 * t) + 0.1 * np.cos(3 * t)]

    def bending(n):
        c = curve_from_function(fun, n, sphere)
        return np.sum(geodesic_curvature(c) ** 2 * segment_lengths(c))

    ref = bending(8192)
    errs = np.array([abs(bending(n) - ref) for n in (32, 64, 128, 256)])
    assert np.all(np.log2(errs[:-1] / errs[1:]) > 1.9)


def test_principal_ellipse_curvature_vanishes(ellipsoid):
    for n in (32, 64, 128):
        for c in principal_ellipses(ellipsoid, n):
            assert np.max(np.abs(geodesic_curvature(c))) <= 1.0 / n**2


def test_embeddedness_examples(sphere, equator):
    assert is_embedded(equator)
    eight = cap_curve(sphere, lambda t: 0.3 * np.sin(2 * t), lambda t: 0.3 * np.sin(t), 128)
    assert not is_embedded(eight)
    # two lobes pinched to a 1e-3 gap
    pinched = cap_curve(
        sphere,
        lambda t: 0.3 * np.cos(t),
        lambda t: 0.3 * np.sin(t) * (0.001 / 0.6 + np.cos(t) ** 2),
        512,
    )
    gap = min_segment_separation(pinched)
    assert 5e-4 < gap < 2e-3
    assert is_embedded(pinched)


def test_resample_examples(sphere, equator):
    eq = latitude(sphere, 0.0, 256)
    assert abs(resample(eq, 512).length() - eq.length()) < 1e-4 * eq.length()
    assert np.max(np.abs(resample(eq, 256).vertices - eq.vertices)) < 1e-9
    with pytest.raises(ResolutionError):
        resample(eq, 8)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-0.15, 0.15), min_size=6, max_size=6), st.integers(128, 256))
def test_resample_is_uniform_on_wiggly_curves(coeffs, n):
    # equal arcs give chords that differ by about κ²s²/24, so the chord
    # spread is O(1/n²); 128 vertices keeps it below 1e-3 for these curves
    from geomorse.surface import MetricSurface

    S = MetricSurface.round(1.0)
    a = np.array(coeffs)

    def fun(t):
        z = sum(a[k] * np.sin((k + 1) * t + k) for k in range(6)) / 2
        # uneven raw parametrization
        s = t + 0.3 * np.sin(t)
        return np.c_[np.cos(s), np.sin(s), z + 0 * s]

    t = np.linspace(0, 2 * np.pi, 4 * n, endpoint=False)
    raw = DiscreteCurve(np.asarray(fun(t)) / np.linalg.norm(fun(t), axis=1, keepdims=True), S)
    r = resample(raw, n)
    assert spacing_cv(r) < 1e-3
    fine = resample(raw, 8 * n)
    assert abs(fine.length() - raw.length()) < 1e-4 * raw.length()


def test_varifold_examples(sphere):
    assert len(to_varifold(DiscreteCurve.point_curve([0, 0, 1.0], sphere))) == 0
    eq = latitude(sphere, 0.0, 256)
    vs = to_varifold(eq)
    assert len(vs) == 256
    assert np.allclose(vs.weights, 2 * np.pi / 256, rtol=1e-6)
    doubled = DiscreteCurve(np.vstack([eq.vertices, eq.vertices]), sphere)
    assert to_varifold(doubled).mass == pytest.approx(2 * eq.length(), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.3, 0.3), st.integers(1, 5), st.integers(32, 200))
def test_varifold_mass_and_tangency(amp, k, n):
    from geomorse.surface import MetricSurface

    S = MetricSurface.round(1.0)
    c = wavy_equator(S, amp, k, n)
    vs = to_varifold(c)
    assert abs(vs.mass - c.length()) <= 1e-12 * c.length()
    nrm = S.normal(vs.points)
    assert np.max(np.abs(np.sum(vs.lines * nrm, axis=1))) < 1e-10


def test_canonical_form_is_orientation_and_start_invariant(sphere):
    c = wavy_equator(sphere, 0.1, 3, 64)
    shifted = c.with_vertices(np.roll(c.vertices, 17, axis=0)).reversed()
    assert np.array_equal(c.canonical().vertices, shifted.canonical().vertices)


def test_curve_csv_round_trip_is_bit_stable(tmp_path, ellipsoid):
    c = principal_ellipses(ellipsoid, 64)[1]
    path = tmp_path / "c.csv"
    write_curve_csv(path, c)
    back = read_curve_csv(path, ellipsoid)
    assert np.array_equal(back.vertices, c.vertices)
