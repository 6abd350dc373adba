import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import latitude, wavy_equator
from geomorse.curve import DiscreteCurve, curve_from_function, to_varifold
from geomorse.errors import EmbeddednessLossError, FamilyFlowError, StepSizeError
from geomorse.flow import (
    CONVERGED_GEODESIC,
    CONVERGED_POINT,
    STEP_LIMIT,
    FlowState,
    csf_step,
    evolve,
    family_sup_length,
    flow_to_time,
    stability_bound,
    tighten_family,
    write_trace_csv,
)
from geomorse.surface import MetricSurface, principal_ellipses


def test_equator_is_a_fixed_point(sphere, equator):
    dt = 0.9 * stability_bound(equator)
    s = csf_step(FlowState.start(equator, sphere), sphere, dt)
    assert np.max(np.abs(s.curve.vertices - equator.vertices)) < 1e-9 * dt


def test_step_above_stability_bound_is_refused(sphere, equator):
    with pytest.raises(StepSizeError):
        csf_step(FlowState.start(equator, sphere), sphere, 1.01 * stability_bound(equator))


def test_small_circle_loses_length_at_the_bending_rate(sphere):
    c = latitude(sphere, 0.95, 64)
    s0 = FlowState.start(c, sphere)
    dt = 0.1 * stability_bound(c)
    s1 = csf_step(s0, sphere, dt)
    r = np.sqrt(1 - 0.95**2)
    kappa = 0.95 / r
    rate = (s1.length - s0.length) / dt
    assert rate < 0
    assert rate == pytest.approx(-kappa**2 * 2 * np.pi * r, rel=0.02)


def test_perturbed_equator_shortens_every_step(sphere):
    st_ = evolve(wavy_equator(sphere, 0.05, 3, 128), sphere, 500)
    lengths = np.array([l for _, l in st_.length_history])
    assert np.all(np.diff(lengths) < 0)


def test_latitude_collapses_to_the_pole(sphere):
    st_ = evolve(latitude(sphere, 0.5, 64), sphere)
    assert st_.status == CONVERGED_POINT
    assert st_.curve.is_point
    assert st_.curve.vertices[0] @ np.array([0, 0, 1.0]) > 0.999
    # a latitude at height z shrinks in time ln(1/(1 - z²))/2... on the unit sphere: t = ln(2) here
    assert st_.time == pytest.approx(np.log(2.0), rel=2e-2)


def test_principal_ellipses_converge_immediately(ellipsoid):
    for c in principal_ellipses(ellipsoid, 128):
        st_ = evolve(c, ellipsoid)
        assert st_.status == CONVERGED_GEODESIC
        assert st_.step_count <= 101
        assert abs(st_.length - c.length()) < 1e-9


def test_bump_metric_pulls_perturbed_equator_back(sphere):
    from geomorse.fermi import bump_surface

    eq = latitude(sphere, 0.0, 64)
    S, _ = bump_surface(eq, sphere, M=2, beta=0.05)
    c = wavy_equator(sphere, 0.05, 3, 64).with_surface(S)
    st_ = evolve(c, S, 20000)
    assert st_.status == CONVERGED_GEODESIC
    assert np.max(np.abs(st_.curve.vertices[:, 2])) < 1e-5


def test_converged_geodesic_is_stationary(sphere, ellipsoid):
    """Re-flowing a converged geodesic does not move it as a set.

    Vertices may still slide along the curve (the scheme equalizes chords),
    so motion is measured normal to the geodesic's plane."""
    normal = np.array([1.0, 2.0, 2.0]) / 3.0
    u = np.cross(normal, [1.0, 0, 0])
    u /= np.linalg.norm(u)
    w = np.cross(normal, u)
    tilted = curve_from_function(lambda t: np.outer(np.cos(t), u) + np.outer(np.sin(t), w), 128, sphere)
    st_ = evolve(tilted, sphere)
    assert st_.status == CONVERGED_GEODESIC
    again = evolve(st_.curve, sphere, 200)
    assert np.max(np.abs(again.curve.vertices @ normal)) < 1e-8
    assert abs(again.length - st_.length) < 1e-10
    g = evolve(principal_ellipses(ellipsoid, 128)[1], ellipsoid)
    assert to_varifold(g.curve).mass == pytest.approx(g.length, rel=1e-12)


def test_terminal_states_stay_terminal(sphere):
    st_ = evolve(latitude(sphere, 0.9, 32), sphere)
    assert st_.status == CONVERGED_POINT
    assert evolve(st_, sphere).status == CONVERGED_POINT
    assert csf_step(st_, sphere, 1e-3) is st_


def test_step_limit_status(sphere):
    st_ = evolve(latitude(sphere, 0.3, 64), sphere, 5)
    assert st_.status == STEP_LIMIT and st_.step_count == 5


def test_non_embedded_start_is_rejected(sphere):
    def fun(t):
        x, y = 0.3 * np.sin(2 * t), 0.3 * np.sin(t)
        return np.c_[x, y, np.sqrt(1 - x * x - y * y)]

    eight = curve_from_function(fun, 64, sphere)
    with pytest.raises(EmbeddednessLossError):
        evolve(eight, sphere)
    with pytest.raises(FamilyFlowError) as info:
        tighten_family([latitude(sphere, 0.1, 64), eight], sphere, 0.01)
    assert info.value.index == 1


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.15, 0.15), st.integers(2, 5), st.floats(0, 6.28))
def test_length_never_increases(amp, k, phase):
    S = MetricSurface.round(1.0)
    st_ = evolve(wavy_equator(S, amp, k, 64, phase), S, 100)
    lengths = np.array([l for _, l in st_.length_history])
    assert np.all(np.diff(lengths) <= 1e-10)


def test_disjoint_curves_stay_disjoint(sphere):
    a = FlowState.start(latitude(sphere, 0.2, 64), sphere)
    b = FlowState.start(wavy_equator(sphere, 0.05, 3, 64), sphere)
    for _ in range(300):
        dt = 0.25 * min(stability_bound(a.curve), stability_bound(b.curve))
        a = csf_step(a, sphere, dt)
        b = csf_step(b, sphere, dt)
        assert a.status != CONVERGED_POINT
        assert np.min(a.curve.vertices[:, 2]) > np.max(b.curve.vertices[:, 2])


def test_latitude_family_tightens_onto_the_equator(sphere):
    family = [latitude(sphere, z, 48) for z in np.linspace(-0.8, 0.8, 9)]
    family = [DiscreteCurve.point_curve([0, 0, -1.0], sphere)] + family + [DiscreteCurve.point_curve([0, 0, 1.0], sphere)]
    states = tighten_family(family, sphere, 5.0)
    assert family_sup_length(states) == pytest.approx(2 * np.pi, rel=1e-4)
    assert int(np.argmax([s.length for s in states])) == 5
    for i, s in enumerate(states):
        if i != 5:
            assert s.status == CONVERGED_POINT


def test_sup_length_is_monotone_in_time_and_threads_do_not_matter(ellipsoid):
    from geomorse.minmax import plane_sweepout

    sw = plane_sweepout(ellipsoid, 1, 8, 64)
    family = [sw.member(i) for i in range(len(sw))]
    runs = [tighten_family(family, ellipsoid, t) for t in (0.0, 0.05, 0.2)]
    sups = [family_sup_length(r) for r in runs]
    slack = [1e-10 * max(s.step_count for s in r) for r in runs]
    assert sups[1] <= sups[0] + slack[1]
    assert sups[2] <= sups[1] + slack[2]
    assert sups[2] == pytest.approx(6.6011, abs=1e-3)
    serial = tighten_family(family, ellipsoid, 0.05)
    threaded = tighten_family(family, ellipsoid, 0.05, workers=4)
    assert [s.length for s in serial] == [s.length for s in threaded]


def test_constant_geodesic_family_is_unchanged(ellipsoid):
    g = principal_ellipses(ellipsoid, 64)[0]
    states = tighten_family([g, g, g], ellipsoid, 1.0)
    for s in states:
        # the shortest principal ellipse lies in the plane normal to the longest axis
        assert np.max(np.abs(s.curve.vertices[:, 2])) < 1e-12
        assert abs(s.length - g.length()) < 1e-9


def test_trace_csv(tmp_path, sphere):
    st_ = flow_to_time(latitude(sphere, 0.5, 32), sphere, 0.01)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, st_)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time", "length", "max_curvature"]
    assert len(rows) == len(st_.length_history) + 1
    assert float(rows[-1][0]) == pytest.approx(0.01)
