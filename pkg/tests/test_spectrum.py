import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomorse.curve import curve_from_function
from geomorse.errors import (
    CoreNotGeodesicError,
    DegenerateGeodesicError,
    NoUnstableDirectionError,
    StationaryStartError,
)
from geomorse.fermi import bump_surface
from geomorse.flow import evolve
from geomorse.spectrum import (
    boundary_escape_flow,
    build_local_minmax,
    hessian_at_zero,
    l_star,
    minmax_radius_report,
    second_order_operator,
    stability_spectrum,
)
from geomorse.surface import principal_ellipses

from conftest import latitude


@pytest.fixture(scope="module")
def great_circle(sphere):
    return latitude(sphere, 0.0, 512)


@pytest.fixture(scope="module")
def great_spec(great_circle, sphere):
    return stability_spectrum(great_circle, sphere, m=8)


@pytest.fixture(scope="module")
def ellipses(ellipsoid):
    return principal_ellipses(ellipsoid, 256)


@pytest.fixture(scope="module")
def ellipse_specs(ellipses, ellipsoid):
    return [stability_spectrum(e, ellipsoid, m=8) for e in ellipses]


@pytest.fixture(scope="module")
def fine_specs(ellipsoid):
    return [stability_spectrum(e, ellipsoid, m=8) for e in principal_ellipses(ellipsoid, 512)]


@pytest.fixture(scope="module")
def circle_family(great_circle, sphere, great_spec):
    return build_local_minmax(great_circle, sphere, great_spec, require_nondegenerate=False)


@pytest.fixture(scope="module")
def ellipse_families(ellipses, ellipsoid, ellipse_specs):
    return [build_local_minmax(e, ellipsoid, s) for e, s in zip(ellipses, ellipse_specs)]


def test_great_circle_spectrum(great_circle, sphere):
    t0 = time.perf_counter()
    spec = stability_spectrum(great_circle, sphere, m=8)
    elapsed = time.perf_counter() - t0
    expect = np.array([m * m - 1 for m in (0, 1, 1, 2, 2, 3, 3, 4)], dtype=float)
    assert np.max(np.abs(spec.eigenvalues - expect)) < 1e-4
    assert (spec.index, spec.nullity) == (1, 2)
    assert elapsed < 10


def test_spectrum_is_orthonormal_and_consistent(great_spec, ellipse_specs):
    for spec in [great_spec, *ellipse_specs]:
        F = spec.eigenfunctions
        gram = F @ F.T * spec.spacing
        assert np.max(np.abs(gram - np.eye(len(F)))) < 1e-8
        for lam, f in zip(spec.eigenvalues, F):
            assert spec.rayleigh_quotient(f) == pytest.approx(lam, abs=1e-6)
        assert np.all(np.diff(spec.eigenvalues) >= 0)


def test_principal_ellipse_indices(ellipse_specs):
    assert [s.index for s in ellipse_specs] == [1, 2, 3]
    assert [s.nullity for s in ellipse_specs] == [0, 0, 0]
    lengths = [s.length for s in ellipse_specs]
    assert lengths == sorted(lengths)


def test_strictly_stable_core_under_bump(sphere):
    eq = latitude(sphere, 0.0, 256)
    surface, _ = bump_surface(eq, sphere, M=2.0, beta=1e-6, h=0.3)
    spec = stability_spectrum(eq, surface, m=7)
    L = spec.length
    K = float(np.mean(spec.curvature))
    n = np.array([0, 1, 1, 2, 2, 3, 3])
    assert np.allclose(spec.eigenvalues, (2 * np.pi * n / L) ** 2 - K, atol=1e-5)
    assert (spec.index, spec.nullity) == (0, 0)


def test_index_is_constant_along_vanishing_bumps(sphere):
    eq = latitude(sphere, 0.0, 128)
    seen = set()
    for beta in (0.05, 1e-2, 1e-3, 1e-4, 1e-6):
        surface, _ = bump_surface(eq, sphere, M=2.0, beta=beta, h=0.3)
        spec = stability_spectrum(eq, surface, m=4)
        seen.add((spec.index, spec.nullity))
    assert seen == {(0, 0)}


def test_eigenvalues_converge_under_refinement(ellipsoid):
    # the second-order stencil is the floor the operator must beat
    vals = []
    for n in (64, 128, 256):
        e = principal_ellipses(ellipsoid, n)[2]
        spec = stability_spectrum(e, ellipsoid, m=5)
        vals.append(spec.eigenvalues)
    d1 = np.abs(vals[0] - vals[1])
    d2 = np.abs(vals[1] - vals[2])
    order = np.log2(d1 / d2)
    assert np.all(order >= 1.9)


def test_second_order_stencil_converges_quadratically(ellipsoid):
    from scipy.linalg import eigh

    vals = []
    for n in (64, 128, 256):
        spec = stability_spectrum(principal_ellipses(ellipsoid, n)[2], ellipsoid, m=5)
        vals.append(eigh(second_order_operator(spec.curvature, spec.spacing), eigvals_only=True)[:5])
    order = np.log2(np.abs(vals[0] - vals[1]) / np.abs(vals[1] - vals[2]))
    assert np.all((order > 1.8) & (order < 2.2))


@settings(max_examples=30, deadline=None)
@given(coef=st.lists(st.floats(-1, 1), min_size=6, max_size=6), which=st.integers(0, 2))
def test_quadratic_form_matches_quadrature(fine_specs, coef, which):
    spec = fine_specs[which]
    a = np.asarray(coef)
    if np.max(np.abs(a)) < 1e-3:
        return
    s = spec.spacing * np.arange(spec.grid.n)
    w = 2 * np.pi / spec.length
    f = sum(a[2 * j] * np.cos((j + 1) * w * s) + a[2 * j + 1] * np.sin((j + 1) * w * s) for j in range(3))
    df = sum(
        (j + 1) * w * (-a[2 * j] * np.sin((j + 1) * w * s) + a[2 * j + 1] * np.cos((j + 1) * w * s))
        for j in range(3)
    )
    # periodic trapezoid rule is spectrally accurate for smooth integrands
    exact = np.sum(df**2 - spec.curvature * f * f) / np.sum(f * f)
    assert spec.rayleigh_quotient(f) == pytest.approx(exact, rel=1e-6, abs=1e-9)


def test_spectrum_errors(sphere, great_circle):
    with pytest.raises(CoreNotGeodesicError):
        stability_spectrum(latitude(sphere, 0.3, 128), sphere)
    with pytest.raises(ValueError):
        stability_spectrum(latitude(sphere, 0.0, 16), sphere, m=8)


# local min-max family ----------------------------------------------------------------


def test_hessian_at_zero_matches_index(ellipse_families):
    for fam in ellipse_families:
        assert np.all(np.linalg.eigvalsh(fam.hessian) < 0)
        H = hessian_at_zero(fam, directions=fam.k + 1)
        ev = np.linalg.eigvalsh(H)
        assert int(np.sum(ev < 0)) == fam.k == fam.spectrum.index
        assert fam.boundary_drop > 0
        assert fam.c1_proxy < 0.25


def test_hessian_matches_second_variation(ellipse_families):
    # δ²L along X_i is λ_i, since the X_i are unit-L² normal sections
    for fam in ellipse_families:
        assert np.allclose(np.diag(fam.hessian), fam.spectrum.eigenvalues[: fam.k], rtol=2e-2)


def test_great_circle_quadratic_drop(circle_family):
    assert circle_family.k == 1
    L0 = circle_family.length
    sign = np.sign(circle_family.sections[0][0])
    for t in np.linspace(-0.05, 0.05, 11):
        if t == 0:
            assert circle_family.length_at([0.0]) == pytest.approx(L0, abs=1e-12)
            continue
        drop = L0 - circle_family.length_at([sign * t])
        assert drop == pytest.approx(t * t / 2, rel=0.05)


def test_zero_parameter_is_identity(ellipse_families):
    for fam in ellipse_families:
        c = fam.curve(np.zeros(fam.k))
        assert np.max(np.abs(c.vertices - fam.chart.points[:, fam.chart.ny // 2])) < 1e-12


def test_inverse_push_restores_curve(ellipse_families, ellipsoid):
    fam = ellipse_families[1]
    rng = np.random.default_rng(5)
    core = fam.curve(np.zeros(fam.k))
    for _ in range(5):
        v = rng.uniform(-1, 1, fam.k) * 0.5 * fam.radius
        back = fam.push(fam.push(core, v), -v)
        assert np.max(np.abs(back.vertices - core.vertices)) < 1e-6


def test_l_star_on_core_and_nearby(circle_family, ellipse_families):
    for fam in [circle_family, *ellipse_families]:
        core = fam.curve(np.zeros(fam.k))
        assert l_star(core, fam) == pytest.approx(fam.length, abs=1e-9)
    fam = ellipse_families[0]
    x1 = fam.sections[0] / np.max(np.abs(fam.sections[0]))
    for y0 in (1e-3, 3e-3, 1e-2, 3e-2, 1e-1):
        for sign in (1, -1):
            c = fam.curve(np.zeros(1)).with_vertices(fam.chart.point(fam.chart.x, sign * y0 * x1))
            assert l_star(c, fam) > fam.length
    rng = np.random.default_rng(7)
    for fam in ellipse_families:
        for _ in range(5):
            v = rng.normal(size=fam.k)
            v *= 0.5 * fam.radius / np.linalg.norm(v)
            assert l_star(fam.curve(v), fam) > fam.length


def test_l_star_rejects_other_types(circle_family):
    with pytest.raises(TypeError):
        l_star(np.zeros((3, 3)), circle_family)


def test_family_errors(sphere, ellipsoid, great_circle, great_spec):
    with pytest.raises(DegenerateGeodesicError):
        build_local_minmax(great_circle, sphere, great_spec)
    eq = latitude(sphere, 0.0, 128)
    surface, _ = bump_surface(eq, sphere, M=2.0, beta=1e-3, h=0.3)
    with pytest.raises(NoUnstableDirectionError):
        build_local_minmax(eq, surface)


def test_escape_flow_leaves_along_the_top_direction(ellipse_families):
    fam = ellipse_families[1]
    start = np.zeros(fam.k)
    start[0] = 1e-3
    traj = boundary_escape_flow(fam, start)
    assert np.all(np.diff(traj.lengths) <= 1e-12)
    assert abs(traj.exit_point[0]) > 0.9
    assert traj.exit_length <= fam.length - fam.boundary_drop + 1e-9


def test_escape_flow_on_great_circle(circle_family):
    traj = boundary_escape_flow(circle_family, [0.01])
    assert np.all(np.diff(traj.lengths) <= 1e-12)
    assert abs(traj.exit_point[0]) == pytest.approx(1.0)
    assert traj.exit_length <= 2 * np.pi - circle_family.boundary_drop + 1e-9
    with pytest.raises(StationaryStartError):
        boundary_escape_flow(circle_family, [0.0])
    with pytest.raises(ValueError):
        boundary_escape_flow(circle_family, [0.1, 0.1])


def test_minmax_radius_report_structure(ellipse_families):
    rep = minmax_radius_report(ellipse_families[0], radii=(1e-3, 3e-3), trials=8)
    assert rep["rows"][0]["radius"] == 1e-3
    assert all(r["passed"] <= r["tested"] <= 8 for r in rep["rows"])
    assert rep["largest_radius"] in (0.0, 1e-3, 3e-3)


def test_spectrum_of_flowed_geodesic(ellipsoid):
    """An ellipse recovered by the flow has the same index as the exact one."""
    c = curve_from_function(
        lambda t: np.c_[1.0 * np.cos(t), 1.1 * np.sin(t), 0.05 * np.sin(2 * t)], 128, ellipsoid
    )
    state = evolve(c, ellipsoid)
    spec = stability_spectrum(state.curve, ellipsoid, m=6)
    assert spec.index in (1, 2, 3)
    assert spec.nullity == 0


def test_nullity_threshold_scales_with_resolution(sphere):
    from geomorse.spectrum import resolution_tol

    assert resolution_tol(512) == 1e-6 and resolution_tol(1024) == 1e-6
    assert resolution_tol(64) == pytest.approx(64e-6)
    spec = stability_spectrum(latitude(sphere, 0.0, 64), sphere, m=5)
    assert (spec.index, spec.nullity) == (1, 2)
    assert spec.tol == resolution_tol(64)
