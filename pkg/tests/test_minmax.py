import json

import numpy as np
import pytest

from geomorse.curve import DiscreteCurve, curve_from_function
from geomorse.errors import FamilyFlowError, UnresolvedLimitError, UnsupportedSurfaceError
from geomorse.fermi import bump_surface
from geomorse.flow import CONVERGED_GEODESIC, evolve
from geomorse.minmax import (
    PRUNE_MARGIN,
    Sweepout,
    WidthBudget,
    minmax_geodesic,
    plane_sweepout,
    slice_perimeters,
    sorted_axes,
    width_estimate,
    write_width_json,
)
from geomorse.surface import ellipse_perimeter, principal_ellipses

from conftest import ellipse_arclength, latitude

SMALL = WidthBudget(t_target=0.5)


@pytest.fixture(scope="module")
def ellipsoid_widths(ellipsoid):
    return [width_estimate(plane_sweepout(ellipsoid, k, 16, 128), ellipsoid, SMALL) for k in (1, 2, 3)]


@pytest.fixture(scope="module")
def round_widths(sphere):
    return [width_estimate(plane_sweepout(sphere, k, 8, 64), sphere, SMALL) for k in (1, 2, 3)]


# sweepout construction -----------------------------------------------------------


def test_axes_are_sorted(ellipsoid):
    s, m, l = sorted_axes(ellipsoid)
    assert np.array_equal(s, [1, 0, 0]) and np.array_equal(m, [0, 1, 0]) and np.array_equal(l, [0, 0, 1])


def test_round_mode_one_is_latitudes(sphere):
    sw = plane_sweepout(sphere, 1, 16, 64)
    assert sw.lattice_shape == (17,)
    L0 = sw.initial_lengths()
    assert np.max(L0) == pytest.approx(2 * np.pi, rel=1e-12)
    t = sw.offsets
    assert np.allclose(L0, 2 * np.pi * np.sqrt(1 - t * t), atol=1e-12)
    mid = sw.member(8)
    assert mid.length() == pytest.approx(2 * np.pi, rel=1e-3)


def test_ellipsoid_mode_one_max_is_shortest_ellipse(ellipsoid):
    sw = plane_sweepout(ellipsoid, 1, 16, 128)
    assert np.max(sw.initial_lengths()) == pytest.approx(ellipse_arclength(1.0, 1.1), rel=1e-10)
    assert ellipse_arclength(1.0, 1.1) == pytest.approx(6.6011, abs=1e-4)


@pytest.mark.parametrize("mode", [1, 2, 3])
def test_boundary_members_are_points(ellipsoid, mode):
    sw = plane_sweepout(ellipsoid, mode, 8, 32)
    boundary = [i for i in range(len(sw)) if sw.is_boundary(i)]
    assert boundary
    for i in boundary:
        assert sw.member(i).is_point
        assert sw.initial_lengths()[i] == 0.0
    assert all(not sw.member(i).is_point for i in range(len(sw)) if not sw.is_boundary(i))


def test_slice_perimeters_match_quadrature(ellipsoid):
    rng = np.random.default_rng(2)
    normals = rng.normal(size=(10, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = rng.uniform(-0.9, 0.9, 10)
    per = slice_perimeters(ellipsoid, normals, offsets)
    sw = Sweepout(ellipsoid, 3, np.zeros((10, 1)), normals, offsets, (10,), 2048)
    for i in range(10):
        assert per[i] == pytest.approx(sw.member(i).length(), rel=1e-5)


@pytest.mark.parametrize("mode", [1, 2, 3])
def test_lattice_neighbours_are_close(ellipsoid, mode):
    # the 0.1 continuity budget needs 64 steps per axis; coarser lattices are for speed only
    sw = plane_sweepout(ellipsoid, mode, 64, 64)
    sample = np.random.default_rng(mode).choice(len(sw), size=min(len(sw), 120), replace=False)
    assert sw.neighbour_hausdorff(np.sort(sample)) < 0.1
    assert plane_sweepout(ellipsoid, mode, 16, 64).neighbour_hausdorff(np.arange(17)) > 0.1


def test_lattices_are_nested(ellipsoid):
    keys = [{plane_sweepout(ellipsoid, k, 8, 32).plane_key(i) for i in range(len(plane_sweepout(ellipsoid, k, 8, 32)))} for k in (1, 2, 3)]
    assert keys[0] <= keys[1] <= keys[2]


def test_sweepout_argument_checks(sphere, ellipsoid):
    with pytest.raises(ValueError):
        plane_sweepout(ellipsoid, 4)
    with pytest.raises(ValueError):
        plane_sweepout(ellipsoid, 1, lattice=6)
    eq = latitude(sphere, 0.0, 64)
    bumped, _ = bump_surface(eq, sphere, M=2.0, beta=0.05)
    with pytest.raises(UnsupportedSurfaceError):
        plane_sweepout(bumped, 1)


# widths ------------------------------------------------------------------------------


def test_round_mode_one_width(sphere):
    est = width_estimate(plane_sweepout(sphere, 1, 64, 256), sphere, SMALL)
    assert est.value == pytest.approx(2 * np.pi, rel=5e-3)
    assert est.resolved and est.certified


def test_width_history_is_non_increasing(ellipsoid_widths, round_widths):
    for est in [*ellipsoid_widths, *round_widths]:
        h = np.array([l for _, l in est.history])
        assert np.all(np.diff(h) <= 1e-10 * 200_000)
        assert est.history[-1][1] == pytest.approx(est.value)


def test_widths_are_ordered(ellipsoid_widths, round_widths):
    for ests in (ellipsoid_widths, round_widths):
        w = [e.value for e in ests]
        assert w[0] <= w[1] <= w[2]


def test_ellipsoid_widths_hit_principal_ellipses(ellipsoid_widths, ellipsoid):
    expect = sorted(ellipse_arclength(*p) for p in ((1.0, 1.1), (1.0, 1.2), (1.1, 1.2)))
    for est, L in zip(ellipsoid_widths, expect):
        assert est.resolved
        assert est.value == pytest.approx(L, rel=2e-3)
        assert est.limit_curve.length() == pytest.approx(L, rel=2e-3)


def test_concentration_is_reported(ellipsoid_widths):
    for est in ellipsoid_widths:
        a, s, checked = est.concentration
        assert a == pytest.approx(1e-4 * est.value)
        assert checked >= 1
        assert 0.0 <= s < 0.1


def test_discretization_gap_is_certified(ellipsoid_widths):
    for est in ellipsoid_widths:
        assert est.certified
        assert est.discretization_gap <= PRUNE_MARGIN * est.value * 1.3


def test_constant_geodesic_family(ellipsoid):
    g = principal_ellipses(ellipsoid, 128)[0]
    g = evolve(g, ellipsoid).curve
    est = width_estimate(Sweepout.from_curves([g, g, g], ellipsoid), ellipsoid, SMALL)
    assert est.value == pytest.approx(g.length(), abs=1e-9)
    assert est.history[0][1] == pytest.approx(g.length(), abs=1e-9)
    assert est.parameter == (0.0,)


def test_member_flow_failure_names_the_member(sphere):
    def fun(t):
        x, y = 0.6 * np.sin(2 * t), 0.6 * np.sin(t)
        return np.c_[x, y, np.sqrt(1 - x * x - y * y)]

    eight = curve_from_function(fun, 64, sphere)
    fam = Sweepout.from_curves([latitude(sphere, 0.9, 64), eight, latitude(sphere, 0.95, 64)], sphere)
    with pytest.raises(FamilyFlowError) as info:
        width_estimate(fam, sphere, SMALL)
    assert info.value.index == 1


def test_explicit_point_members(sphere):
    pt = DiscreteCurve.point_curve(np.array([0.0, 0.0, 1.0]), sphere)
    fam = Sweepout.from_curves([pt, latitude(sphere, 0.5, 64), pt], sphere)
    assert fam.is_boundary(0) and not fam.is_boundary(1)


# min-max geodesics ----------------------------------------------------------------------


def test_minmax_geodesic_indices(ellipsoid, ellipsoid_widths):
    specs = []
    for k, est in zip((1, 2, 3), ellipsoid_widths):
        sw = plane_sweepout(ellipsoid, k, 16, 128)
        curve, spec, same = minmax_geodesic(sw, ellipsoid, SMALL, n_spectrum=256, estimate=est)
        assert same is est
        assert curve.n == 256
        specs.append(spec)
    assert [s.index for s in specs] == [1, 2, 3]
    assert [s.nullity for s in specs] == [0, 0, 0]
    lengths = [s.length for s in specs]
    assert lengths[0] < lengths[1] < lengths[2]


def test_round_minmax_is_degenerate(sphere, round_widths):
    curve, spec, _ = minmax_geodesic(plane_sweepout(sphere, 1, 8, 64), sphere, SMALL, n_spectrum=128, estimate=round_widths[0])
    assert curve.length() == pytest.approx(2 * np.pi, rel=1e-3)
    assert (spec.index, spec.nullity) == (1, 2)


def test_unresolved_limit_is_propagated(ellipsoid, ellipsoid_widths):
    est = ellipsoid_widths[0]
    import dataclasses

    stalled = dataclasses.replace(est, limit_status="step_limit", limit_curve=None)
    with pytest.raises(UnresolvedLimitError):
        minmax_geodesic(plane_sweepout(ellipsoid, 1, 16, 128), ellipsoid, SMALL, estimate=stalled)


def test_width_json(tmp_path, ellipsoid_widths):
    path = tmp_path / "width.json"
    write_width_json(path, ellipsoid_widths[0])
    data = json.loads(path.read_text())
    assert data["value"] == pytest.approx(ellipsoid_widths[0].value)
    assert data["label"] == "tightened family width"
    assert len(data["history"]) == SMALL.checkpoints + 1
    assert set(data["concentration"]) == {"a", "s", "checked"}


def test_perimeter_helper_matches_oracle():
    for a, b in ((1.0, 1.1), (1.0, 1.2), (0.3, 2.0)):
        assert ellipse_perimeter(a, b) == pytest.approx(ellipse_arclength(a, b), rel=1e-12)


def test_converged_status_constant():
    assert CONVERGED_GEODESIC == "converged_geodesic"
