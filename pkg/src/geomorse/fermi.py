"""Fermi coordinates around a closed geodesic and everything built on them.

A chart ``c(x, y)`` sends arclength ``x`` along the core and signed normal
distance ``y`` to the surface, so the metric reads ``J(x, y)² dx² + dy²``.
``J`` is the Jacobi width: it solves ``J_yy = -K J`` with ``J = 1`` and
``J_y = 0`` on the core.  Positive ``y`` points along ``N × T`` (surface
normal cross core tangent).

The module also holds the graph/squeeze machinery used to retract curves
onto a strictly stable core, the total-angle estimate, and the conformal
bump that turns any geodesic into a strictly stable one.
"""

from __future__ import annotations

import json
import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.spatial import cKDTree

from .curve import DiscreteCurve, _tangent_frames, geodesic_curvature, resample, segment_lengths
from .errors import (
    BoundViolationError,
    CoreNotGeodesicError,
    InfeasibleBumpError,
    OutOfTubeError,
    TubeTooWideError,
    UnsupportedSurfaceError,
)
from .surface import project_to_surface

CORE_CURVATURE_TOL = 1e-6
MEAN_CONVEX_TOL = 1e-8
_PAD = 4

OverlayFields = namedtuple("OverlayFields", "phi gradient laplacian")


def _periodic_pad(x, L, table):
    xs = np.concatenate([x[-_PAD:] - L, x, x[:_PAD] + L])
    tab = np.concatenate([table[-_PAD:], table, table[:_PAD]], axis=0)
    return xs, tab


class FermiChart:
    """Immutable Fermi chart on a tube of half-width ``h`` around a geodesic.

    Attributes
    ----------
    core : DiscreteCurve
    surface : MetricSurface
        The metric the chart is adapted to (possibly a conformal overlay).
    h, L : float
        Half-width and core length, both in the chart's metric.
    x, y : ndarray
        Lattice coordinates; ``x`` sits at the core vertices, ``y`` is
        uniform with an odd count so that ``y = 0`` is a node.
    points : ndarray, shape (nx, ny, 3)
    J, K : ndarray, shape (nx, ny)
        Jacobi width and Gaussian curvature of the chart metric at the nodes.
    """

    def __init__(self, core, surface, h, x, y, points, J, Jy, K, L, host=None, closed_form_error=None):
        self.core = core
        self.surface = surface
        self.h = float(h)
        self.L = float(L)
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.points = np.asarray(points, dtype=float)
        self.J = np.asarray(J, dtype=float)
        self.Jy_ode = np.asarray(Jy, dtype=float)
        self.K = np.asarray(K, dtype=float)
        self.host = host
        self.closed_form_error = closed_form_error
        for arr in (self.x, self.y, self.points, self.J, self.Jy_ode, self.K):
            arr.setflags(write=False)
        self._build_interpolants()

    # construction helpers ----------------------------------------------------

    def _build_interpolants(self):
        xs, pts = _periodic_pad(self.x, self.L, self.points)
        self._coord = [RectBivariateSpline(xs, self.y, pts[:, :, k], s=0) for k in range(3)]
        xs, jt = _periodic_pad(self.x, self.L, self.J)
        self._j = RectBivariateSpline(xs, self.y, jt, s=0)
        xs, jy = _periodic_pad(self.x, self.L, self.Jy_ode)
        self._jy = RectBivariateSpline(xs, self.y, jy, s=0)
        flat = self.points.reshape(-1, 3)
        self._tree = cKDTree(flat)
        step_x = np.linalg.norm(np.roll(self.points, -1, axis=0) - self.points, axis=-1).max()
        step_y = np.linalg.norm(np.diff(self.points, axis=1), axis=-1).max()
        self._reach = 2.0 * max(step_x, step_y)

    # basic accessors ------------------------------------------------------------

    @property
    def nx(self):
        return len(self.x)

    @property
    def ny(self):
        return len(self.y)

    @property
    def dy(self):
        return float(self.y[1] - self.y[0])

    @property
    def Jy(self):
        """``∂J/∂y`` by second-order finite differences of the J table."""
        return np.gradient(self.J, self.dy, axis=1, edge_order=2)

    def _ev(self, x, y, dx=0, dy=0):
        x = np.mod(np.asarray(x, dtype=float), self.L)
        y = np.asarray(y, dtype=float)
        return np.stack([s.ev(x, y, dx=dx, dy=dy) for s in self._coord], axis=-1)

    def point(self, x, y):
        """Surface point ``c(x, y)``."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        raw = self._ev(x.ravel(), y.ravel())
        return project_to_surface(self.surface.root, raw).reshape(x.shape + (3,))

    def J_at(self, x, y):
        return self._j.ev(np.mod(x, self.L), y)

    def Jy_at(self, x, y):
        return self._jy.ev(np.mod(x, self.L), y)

    def unit_normal_direction(self, x, y):
        """Unit tangent of the Fermi line ``x = const`` (the ``∂/∂y`` field)."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        p = self.point(x, y).reshape(-1, 3)
        d = self._ev(x.ravel(), y.ravel(), dy=1)
        n = self.surface.root.normal(p)
        d = d - n * np.sum(d * n, axis=1, keepdims=True)
        return (d / np.linalg.norm(d, axis=1, keepdims=True)).reshape(x.shape + (3,))

    def locate(self, points, strict=True):
        """Chart coordinates of surface points.

        Returns ``(x, y)``; with ``strict=False`` also a boolean ``inside``
        mask, and points outside the tube get ``nan`` coordinates.

        Raises
        ------
        OutOfTubeError
            With ``strict=True`` when any point lies outside the tube.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        d0, idx = self._tree.query(p)
        i, j = np.divmod(idx, self.ny)
        x = self.x[i].astype(float)
        y = self.y[j].astype(float)
        for _ in range(20):
            r = self._ev(x, y) - p
            sx = self._ev(x, y, dx=1)
            sy = self._ev(x, y, dy=1)
            a11 = np.sum(sx * sx, axis=1)
            a12 = np.sum(sx * sy, axis=1)
            a22 = np.sum(sy * sy, axis=1)
            b1 = np.sum(sx * r, axis=1)
            b2 = np.sum(sy * r, axis=1)
            det = a11 * a22 - a12 * a12
            ddx = (a22 * b1 - a12 * b2) / det
            ddy = (a11 * b2 - a12 * b1) / det
            x = np.mod(x - ddx, self.L)
            y = np.clip(y - ddy, self.y[0], self.y[-1])
            if np.max(np.abs(ddx) + np.abs(ddy)) < 1e-14:
                break
        back = project_to_surface(self.surface.root, self._ev(x, y))
        resid = np.linalg.norm(back - p, axis=1)
        inside = (d0 <= self._reach) & (resid < 1e-7) & (np.abs(y) <= self.h * (1 + 1e-9))
        if strict:
            if not np.all(inside):
                raise OutOfTubeError(f"{int(np.sum(~inside))} point(s) outside the tube of half-width {self.h:g}")
            return x, y
        x = np.where(inside, x, np.nan)
        y = np.where(inside, y, np.nan)
        return x, y, inside

    # reporting -----------------------------------------------------------------

    def ode_residual(self):
        """Max of ``|J_yy + K J|`` over interior nodes (sixth-order differences)."""
        J = self.J
        w = (1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90)
        m = J.shape[1]
        d2 = sum(c * J[:, k : m - 6 + k] for k, c in enumerate(w)) / self.dy**2
        return float(np.max(np.abs(d2 + self.K[:, 3:-3] * J[:, 3:-3])))

    def to_dict(self):
        return {
            "half_width": self.h,
            "length": self.L,
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "J": self.J.tolist(),
            "core": self.core.vertices.tolist(),
            "surface": self.surface.to_dict(),
        }

    def __repr__(self):
        return f"FermiChart(L={self.L:.6g}, h={self.h:g}, nx={self.nx}, ny={self.ny})"


# chart construction ------------------------------------------------------------


def _y_grid(h, ny):
    ny = int(ny) | 1
    return np.linspace(-h, h, ny)


def _shoot(root, starts, directions, ts):
    """Integrate normal geodesics and their Jacobi widths for y in ``ts >= 0``."""
    n = len(starts)
    inv = root.inv_sq

    def rhs(_, s):
        s = s.reshape(n, 8)
        p, v = s[:, :3], s[:, 3:6]
        ap = p * inv
        lam = np.sum(v * v * inv, axis=1) / np.sum(ap * ap, axis=1)
        out = np.empty_like(s)
        out[:, :3] = v
        out[:, 3:6] = -lam[:, None] * ap
        out[:, 6] = s[:, 7]
        out[:, 7] = -root.base_curvature(p) * s[:, 6]
        return out.ravel()

    init = np.hstack([starts, directions, np.ones((n, 1)), np.zeros((n, 1))]).ravel()
    if ts[-1] == 0:
        return np.repeat(init.reshape(n, 8)[:, None, :], len(ts), axis=1)
    sol = solve_ivp(rhs, (0.0, ts[-1]), init, method="DOP853", t_eval=ts, rtol=1e-12, atol=1e-13)
    if not sol.success:
        raise TubeTooWideError(f"normal geodesic integration failed: {sol.message}")
    return sol.y.reshape(n, 8, len(ts)).transpose(0, 2, 1)


def _base_chart(core, surface, h, ny):
    root = surface.root
    y = _y_grid(h, ny)
    mid = len(y) // 2
    seg = segment_lengths(core)
    L = float(seg.sum())
    x = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    _, _, conormal = _tangent_frames(core, root)
    v = core.vertices
    fwd = _shoot(root, v, conormal, y[mid:])
    bwd = _shoot(root, v, -conormal, -y[mid::-1])
    table = np.concatenate([bwd[:, ::-1][:, :-1], fwd], axis=1)
    flip = np.ones(len(y))
    flip[:mid] = -1.0  # dJ/dy = -dJ/dt on the backward side
    P = project_to_surface(root, table[:, :, :3].reshape(-1, 3)).reshape(len(x), len(y), 3)
    P[:, mid] = v
    J = table[:, :, 6]
    Jy = table[:, :, 7] * flip
    if np.min(J) <= 1e-9:
        raise TubeTooWideError(f"Jacobi width vanishes inside |y| <= {h:g}; the tube reaches a focal point")
    K = root.base_curvature(P.reshape(-1, 3)).reshape(J.shape)
    return FermiChart(core, surface, h, x, y, P, J, Jy, K, L)


def _overlay_chart(core, surface, h, nx, ny):
    overlay = surface.overlay
    host = getattr(overlay, "host", None)
    if host is None:
        raise UnsupportedSurfaceError("overlay charts need a Fermi-profile overlay with a host chart")
    _, ycore = host.locate(core.vertices)
    if np.max(np.abs(ycore)) > 1e-6:
        raise UnsupportedSurfaceError("the core must be the host chart's core")
    phi0 = float(overlay.profile(0.0)[0])
    xb = host.x if nx is None or nx == host.nx else np.linspace(0.0, host.L, nx, endpoint=False)
    s = _y_grid(h, ny)
    mid = len(s) // 2
    n = len(xb)

    def rhs(_, state):
        st = state.reshape(n, 3)
        yy = st[:, 0]
        phi, d1, d2 = overlay.profile(yy)
        p = host.point(xb, yy)
        lap = d2 + d1 * host.Jy_at(xb, yy) / host.J_at(xb, yy)
        kt = np.exp(-2.0 * phi) * (surface.root.base_curvature(p) - lap)
        out = np.empty_like(st)
        out[:, 0] = np.exp(-phi)
        out[:, 1] = st[:, 2]
        out[:, 2] = -kt * st[:, 1]
        return out.ravel()

    def run(sign):
        ts = s[mid:]
        init = np.tile([0.0, 1.0, 0.0], n)
        if sign < 0:
            f = lambda t, z: _flip_rhs(rhs, t, z, n)  # noqa: E731
        else:
            f = rhs
        sol = solve_ivp(f, (0.0, ts[-1]), init, method="DOP853", t_eval=ts, rtol=1e-11, atol=1e-12)
        if not sol.success:
            raise TubeTooWideError(f"overlay chart integration failed: {sol.message}")
        return sol.y.reshape(n, 3, len(ts)).transpose(0, 2, 1)

    fwd = run(+1)
    bwd = run(-1)
    # backward side integrated in t = -s, with y stored as -y
    bwd = bwd.copy()
    bwd[:, :, 0] *= -1.0
    bwd[:, :, 2] *= -1.0
    table = np.concatenate([bwd[:, ::-1][:, :-1], fwd], axis=1)
    Y = table[:, :, 0]
    if np.max(np.abs(Y)) > host.h:
        raise TubeTooWideError("overlay tube extends past the host chart")
    J = table[:, :, 1]
    Js = table[:, :, 2]
    if np.min(J) <= 1e-9:
        raise TubeTooWideError("Jacobi width vanishes inside the overlay tube")
    X = np.broadcast_to(xb[:, None], Y.shape)
    P = host.point(X, Y)
    P[:, mid] = host.point(xb, np.zeros(n))
    phi = overlay.profile(Y)[0]
    closed = np.exp(phi - phi0) * host.J_at(X.ravel(), Y.ravel()).reshape(Y.shape)
    d1, d2 = overlay.profile(Y)[1:]
    lap = d2 + d1 * host.Jy_at(X.ravel(), Y.ravel()).reshape(Y.shape) / host.J_at(X.ravel(), Y.ravel()).reshape(Y.shape)
    K = np.exp(-2.0 * phi) * (surface.root.base_curvature(P.reshape(-1, 3)).reshape(Y.shape) - lap)
    scale = math.exp(phi0)
    core_pts = DiscreteCurve(P[:, mid], surface)
    return FermiChart(
        core_pts,
        surface,
        h,
        scale * xb,
        s,
        P,
        J,
        Js,
        K,
        scale * host.L,
        host=host,
        closed_form_error=float(np.max(np.abs(J - closed))),
    )


def _flip_rhs(rhs, t, z, n):
    """Right-hand side for integrating toward negative s, in t = -s with
    state ``(-y, J, -J_s)``."""
    st = z.reshape(n, 3).copy()
    st[:, 0] *= -1.0
    st[:, 2] *= -1.0
    d = rhs(-t, st.ravel()).reshape(n, 3)
    out = np.empty_like(d)
    out[:, 0] = d[:, 0]
    out[:, 1] = -d[:, 1]
    out[:, 2] = d[:, 2]
    return out.ravel()


def build_chart(core, surface=None, h=0.2, nx=None, ny=61):
    """Fermi chart of half-width ``h`` around a closed geodesic.

    Parameters
    ----------
    core : DiscreteCurve
        A geodesic of ``surface`` (``sup |κ| < 1e-6``).
    surface : MetricSurface, optional
        Quadric, or a conformal overlay whose host chart has the same core.
    h : float
        Half-width in the metric of ``surface``.
    nx, ny : int
        Lattice counts; ``nx`` defaults to the core's vertex count (the
        core is resampled otherwise), ``ny`` is rounded up to odd.

    Raises
    ------
    CoreNotGeodesicError
    TubeTooWideError
    """
    surface = surface if surface is not None else core.surface
    core = core.with_surface(surface)
    kmax = float(np.max(np.abs(geodesic_curvature(core, surface))))
    if kmax >= CORE_CURVATURE_TOL:
        raise CoreNotGeodesicError(f"core has sup |κ| = {kmax:.3e}")
    if surface.overlay is not None:
        return _overlay_chart(core, surface, h, nx, ny)
    if nx is not None and nx != core.n:
        core = resample(core, nx)
    return _base_chart(core, surface, h, ny)


# foliation ---------------------------------------------------------------------


def level_curvature(chart, t):
    """Geodesic curvature ``-J_y / J`` of the level curve ``y = t`` at each x node."""
    if abs(t) > chart.h * (1 + 1e-12):
        raise OutOfTubeError(f"|t| = {abs(t):g} exceeds the half-width {chart.h:g}")
    values = -chart.Jy / chart.J
    return CubicSpline(chart.y, values, axis=1)(t)


def is_mean_convex(chart):
    """True when ``J_y · t > 0`` at every node with ``|t| >= dy``."""
    sel = np.abs(chart.y) >= chart.dy * (1 - 1e-9)
    return bool(np.all(chart.Jy[:, sel] * np.sign(chart.y[sel]) > MEAN_CONVEX_TOL))


def mean_convex_half_width(chart):
    """Largest node height ``t`` such that ``J_y · s > 0`` for all ``dy <= |s| <= t``."""
    jy = chart.Jy
    mid = chart.ny // 2
    best = 0.0
    for j in range(1, mid + 1):
        up = np.all(jy[:, mid + j] > MEAN_CONVEX_TOL)
        down = np.all(-jy[:, mid - j] > MEAN_CONVEX_TOL)
        if not (up and down):
            break
        best = float(chart.y[mid + j])
    return best


def foliation_report(chart, samples=(0.25, 0.5, 0.75, 1.0)):
    rows = []
    for frac in samples:
        t = frac * chart.h
        k = level_curvature(chart, t)
        rows.append({"t": t, "min": float(k.min()), "max": float(k.max())})
    return {
        "mean_convex": is_mean_convex(chart),
        "mean_convex_half_width": mean_convex_half_width(chart),
        "J_min": float(chart.J.min()),
        "J_max": float(chart.J.max()),
        "ode_residual": chart.ode_residual(),
        "level_curvature": rows,
    }


def write_chart_json(path, chart):
    payload = chart.to_dict()
    payload["foliation"] = foliation_report(chart)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


# curves in the chart -----------------------------------------------------------


def _wrapped_steps(chart, xs):
    d = np.diff(np.concatenate([xs, xs[:1]]))
    return (d + 0.5 * chart.L) % chart.L - 0.5 * chart.L


def _chart_coords(c, chart):
    return chart.locate(c.vertices)


def winding_number(c, chart):
    """Degree of the x-coordinate of ``c`` as a map to the circle ``[0, L)``.

    Raises
    ------
    OutOfTubeError
    """
    if c.is_point:
        chart.locate(c.vertices[:1])
        return 0
    x, _ = _chart_coords(c, chart)
    return int(round(np.sum(_wrapped_steps(chart, x)) / chart.L))


def horizontal_width(c, chart):
    """Spread of the lifted x-coordinate over one traversal of ``c``."""
    if c.is_point:
        chart.locate(c.vertices[:1])
        return 0.0
    x, _ = _chart_coords(c, chart)
    lifted = np.concatenate([[0.0], np.cumsum(_wrapped_steps(chart, x))])
    return float(lifted.max() - lifted.min())


def _oriented(c, chart):
    """Lifted chart coordinates with positive winding, plus the steps."""
    x, y = _chart_coords(c, chart)
    d = _wrapped_steps(chart, x)
    w = int(round(np.sum(d) / chart.L))
    if w == -1:
        x, y = x[::-1], y[::-1]
        d = _wrapped_steps(chart, x)
        w = 1
    return x, y, d, w


def _segment_metric(chart, x, y, d):
    """Per-segment ``(J̄ Δx, Δy)`` with J at the chart midpoint."""
    dy = np.roll(y, -1) - y
    xm = x + 0.5 * d
    ym = y + 0.5 * dy
    return chart.J_at(xm, ym) * d, dy


def chart_length(c, chart):
    """Length of ``c`` in the chart metric, ``Σ sqrt(J̄² Δx² + Δy²)``."""
    x, y = _chart_coords(c, chart)
    d = _wrapped_steps(chart, x)
    a, b = _segment_metric(chart, x, y, d)
    return float(np.sum(np.hypot(a, b)))


@dataclass(frozen=True)
class GraphCurve:
    """Curve ``{c(x, g(x))}`` given by heights on the chart's x nodes."""

    chart: FermiChart = field(repr=False)
    heights: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.heights, dtype=float)
        if g.shape != self.chart.x.shape:
            raise ValueError("heights must be sampled on the chart's x nodes")
        if np.max(np.abs(g)) >= self.chart.h:
            raise OutOfTubeError("graph leaves the tube")
        g.setflags(write=False)
        object.__setattr__(self, "heights", g)

    def curve(self):
        return DiscreteCurve(self.chart.point(self.chart.x, self.heights), self.chart.surface)

    def chart_length(self):
        return _graph_length(self.chart, self.heights)


def _graph_length(chart, g):
    d = np.diff(np.concatenate([chart.x, [chart.L]]))
    dg = np.roll(g, -1) - g
    jm = chart.J_at(chart.x + 0.5 * d, g + 0.5 * dg)
    return float(np.sum(np.hypot(jm * d, dg)))


def is_graphical(c, chart):
    """The graph representation of ``c`` if every x-fiber meets it once, else None."""
    if c.is_point:
        return None
    x, y, d, w = _oriented(c, chart)
    if w != 1 or np.any(d <= 0):
        return None
    lifted = x[0] + np.concatenate([[0.0], np.cumsum(d[:-1])])
    g = np.interp(chart.x, lifted, y, period=chart.L)
    if np.max(np.abs(g)) >= chart.h:
        return None
    return GraphCurve(chart, g)


def graph_from_heights(chart, heights):
    return GraphCurve(chart, np.asarray(heights, dtype=float))


@dataclass(frozen=True)
class SqueezePath:
    """Curves ``c(x, (1 - t) g(x))`` for uniform ``t`` in ``[0, 1]``."""

    times: np.ndarray
    curves: tuple
    lengths: np.ndarray
    monotonicity_checked: bool
    monotone: bool | None

    def surface_lengths(self):
        return np.array([c.length() for c in self.curves])


def squeeze_homotopy(g0, chart=None, steps=20):
    """Retract a graph onto the core by scaling its heights to zero.

    Lengths are measured in the chart metric.  In a mean-convex chart they
    are non-increasing because ``J`` grows away from the core; in any other
    chart the path is returned with ``monotonicity_checked = False``.
    """
    chart = chart if chart is not None else g0.chart
    times = np.linspace(0.0, 1.0, int(steps) + 1)
    curves = []
    lengths = []
    for t in times:
        g = (1.0 - t) * g0.heights
        curves.append(DiscreteCurve(chart.point(chart.x, g), chart.surface))
        lengths.append(_graph_length(chart, g))
    lengths = np.asarray(lengths)
    checked = is_mean_convex(chart)
    monotone = bool(np.all(np.diff(lengths) <= 1e-10)) if checked else None
    return SqueezePath(times, tuple(curves), lengths, checked, monotone)


def total_angle(c, chart):
    """``(∫|θ| ds, ∫(1 - cos θ) ds)`` with θ the angle to the level-curve direction.

    Raises
    ------
    OutOfTubeError
    ValueError
        If ``c`` is not homologous to the core in the tube.
    """
    x, y, d, w = _oriented(c, chart)
    if w != 1:
        raise ValueError("total angle needs a curve homologous to the core")
    a, b = _segment_metric(chart, x, y, d)
    ds = np.hypot(a, b)
    theta = np.arctan2(b, a)
    return float(np.sum(np.abs(theta) * ds)), float(np.sum((1.0 - np.cos(theta)) * ds))


# conformal overlays ------------------------------------------------------------


class ConformalOverlay:
    """Conformal factor ``exp(2 phi)`` with ``phi`` a function of the host chart's y.

    Parameters
    ----------
    host : FermiChart
        Chart on the unperturbed surface.
    profile : callable
        ``y -> (phi, phi', phi'')``, vectorized.
    support : float, optional
        ``phi`` vanishes for ``|y| >= support``; points outside the host
        tube then get ``phi = 0``.  Without a support, such points raise.
    """

    def __init__(self, host, profile=None, support=None):
        if host.surface.overlay is not None:
            raise UnsupportedSurfaceError("the host chart must live on an unperturbed surface")
        self.host = host
        self._profile = profile
        self.support = support

    def profile(self, y):
        return self._profile(np.asarray(y, dtype=float))

    def fields(self, points):
        p = np.ascontiguousarray(points, dtype=float)
        key = (p.shape, p.tobytes())
        memo = self.__dict__.setdefault("_memo", {})
        if key in memo:
            return memo[key]
        out = self._fields(p)
        if len(memo) >= 4:
            memo.pop(next(iter(memo)))
        memo[key] = out
        return out

    def _fields(self, p):
        shape = p.shape[:-1]
        flat = p.reshape(-1, 3)
        x, y, inside = self.host.locate(flat, strict=False)
        if self.support is None and not np.all(inside):
            raise OutOfTubeError("overlay evaluated outside its host tube")
        phi = np.zeros(len(flat))
        grad = np.zeros((len(flat), 3))
        lap = np.zeros(len(flat))
        if np.any(inside):
            xi, yi = x[inside], y[inside]
            f0, f1, f2 = self.profile(yi)
            ey = self.host.unit_normal_direction(xi, yi)
            phi[inside] = f0
            grad[inside] = f1[:, None] * ey
            lap[inside] = f2 + f1 * self.host.Jy_at(xi, yi) / self.host.J_at(xi, yi)
        return OverlayFields(phi.reshape(shape), grad.reshape(shape + (3,)), lap.reshape(shape))

    def to_dict(self):
        return {"type": type(self).__name__, "support": self.support}


def flat_band_overlay(host):
    """Test overlay ``phi = -log cos y`` on a round-sphere equator chart.

    The perturbed metric ``(cos² y dx² + dy²) / cos² y`` is a flat
    cylinder in the x direction, so its Jacobi width is identically 1.
    """

    def profile(y):
        c = np.cos(y)
        return -np.log(c), np.tan(y), 1.0 / (c * c)

    return ConformalOverlay(host, profile)


class BumpFunction(ConformalOverlay):
    """``phi(c(x, y)) = -A exp(-B / (h² - y²))`` for ``|y| < h``, zero outside.

    ``B = h⁴ M / ε`` and ``A = ε exp(B / h²) / 2``, so ``phi = -ε/2`` and
    ``∂²phi/∂y² = M`` on the core.  ``A`` is kept in log form since it
    overflows for small ε.
    """

    def __init__(self, host, h, M, epsilon, beta):
        super().__init__(host, support=h)
        self.h = float(h)
        self.M = float(M)
        self.epsilon = float(epsilon)
        self.beta = float(beta)
        self.B = self.h**4 * self.M / self.epsilon
        self.log_A = math.log(self.epsilon / 2.0) + self.B / self.h**2
        self.verification = {}

    @property
    def A(self):
        try:
            return math.exp(self.log_A)
        except OverflowError:
            return math.inf

    def profile(self, y):
        y = np.asarray(y, dtype=float)
        w = self.h**2 - y * y
        inside = w > 0
        ws = np.where(inside, w, 1.0)
        e = np.exp(np.where(inside, self.log_A - self.B / ws, -np.inf))
        u1 = 2.0 * self.B * y / ws**2
        u2 = 2.0 * self.B / ws**2 + 8.0 * self.B * y * y / ws**3
        phi = -e
        d1 = np.where(inside, e * u1, 0.0)
        d2 = np.where(inside, e * (u2 - u1 * u1), 0.0)
        return phi, d1, d2

    def sup_deviation(self, samples=4001):
        """``sup |exp(2 phi) - 1|`` over a y-grid including the core."""
        y = np.concatenate([np.linspace(-self.h, self.h, samples), [0.0]])
        return float(np.max(np.abs(np.exp(2.0 * self.profile(y)[0]) - 1.0)))

    def slope_bound(self, samples=4001):
        """``sup |phi_y exp(phi)|`` over the tube."""
        y = np.linspace(-self.h, self.h, samples)
        phi, d1, _ = self.profile(y)
        return float(np.max(np.abs(d1 * np.exp(phi))))

    def to_dict(self):
        return {
            "type": "BumpFunction",
            "A_log": self.log_A,
            "B": self.B,
            "h": self.h,
            "M": self.M,
            "epsilon": self.epsilon,
            "beta": self.beta,
        }

    def __repr__(self):
        return f"BumpFunction(h={self.h:g}, M={self.M:g}, epsilon={self.epsilon:.3g}, beta={self.beta:g})"


def make_bump(chart, M, beta, h=None, epsilon=None):
    """Conformal bump around the chart's core with ``∂²phi(ν, ν) = M`` on it.

    ``ε`` is the largest value, found by bisection, with
    ``sup |exp(2 phi) - 1| < beta`` and ``sup |phi_y exp(phi)| <= M h``; the
    second condition keeps the bump in the large-``B`` regime where the
    Lipschitz estimate ``1 + M h`` holds.  An explicit ``epsilon`` skips the
    search.

    Raises
    ------
    InfeasibleBumpError
        If ``M`` does not exceed the curvature in the tube, if ``h`` violates
        ``h < max(1/M, 1/10)`` or exceeds the chart, or if no admissible
        ``ε`` is representable.
    """
    h = chart.h if h is None else float(h)
    if h > chart.h * (1 + 1e-12):
        raise InfeasibleBumpError(f"bump half-width {h:g} exceeds the chart half-width {chart.h:g}")
    kmax = float(np.max(chart.K))
    if not M > max(kmax, 0.0):
        raise InfeasibleBumpError(f"M = {M:g} must exceed max K = {kmax:g} in the tube")
    if not h < max(1.0 / M, 0.1):
        raise InfeasibleBumpError(f"h = {h:g} violates h < max(1/M, 1/10) = {max(1.0 / M, 0.1):g}")
    if not beta > 0:
        raise InfeasibleBumpError("beta must be positive")
    if epsilon is None:

        def admissible(eps):
            trial = BumpFunction(chart, h, M, eps, beta)
            return trial.sup_deviation() < beta and trial.slope_bound() <= M * h

        lo, hi = 0.0, 1.0
        if admissible(hi):
            lo = hi
        else:
            while hi > 1e-300 and not admissible(hi / 2.0):
                hi /= 2.0
            lo = hi / 2.0 if hi > 1e-300 else 0.0
            # bisection between an admissible lo and an inadmissible hi
            while lo > 0 and hi - lo > 1e-12 * hi:
                mid = 0.5 * (lo + hi)
                if admissible(mid):
                    lo = mid
                else:
                    hi = mid
        epsilon = lo
    if not epsilon > 1e-15:
        raise InfeasibleBumpError(f"no representable ε meets beta = {beta:g}")
    bump = BumpFunction(chart, h, M, epsilon, beta)
    dev = bump.sup_deviation()
    if dev >= beta:
        raise InfeasibleBumpError(f"sup |exp(2 phi) - 1| = {dev:.3g} >= beta = {beta:g}")
    bump.verification = _verify_bump(bump)
    if not bump.verification["ok"]:
        raise InfeasibleBumpError(f"bump properties failed: {bump.verification}")
    return bump


def _verify_bump(bump):
    h, M = bump.h, bump.M
    phi0, d10, d20 = (float(v) for v in bump.profile(0.0))
    width = math.sqrt(bump.epsilon / M)
    step = 1e-3 * min(width, h)
    fd = (float(bump.profile(step)[0]) - 2 * phi0 + float(bump.profile(-step)[0])) / step**2
    outside = bump.profile(np.array([-h, h, -1.5 * h, 1.5 * h]))
    edge = np.abs(np.concatenate([np.ravel(v) for v in bump.profile(np.array([-h, h]))]))
    return {
        "phi_core": phi0,
        "tangential_derivative_core": 0.0,
        "normal_derivative_core": d10,
        "hessian_core": d20,
        "hessian_core_fd": fd,
        "hessian_rel_error": abs(d20 - M) / M,
        "edge_max": float(edge.max()),
        "ok": bool(
            phi0 < 0
            and abs(d10) == 0.0
            and abs(d20 - M) <= 1e-4 * M
            and abs(fd - M) <= 1e-3 * M
            and np.all(np.concatenate([np.ravel(v) for v in outside]) == 0.0)
        ),
    }


def jacobian_bounds(bump, samples=20001):
    """``(sup exp(phi), 1 + sup |phi_y exp(phi)|)`` over the tube.

    Raises
    ------
    BoundViolationError
        If ``sup_jac > 1`` or ``lip_bound >= 2``.
    """
    y = np.concatenate([np.linspace(-bump.h, bump.h, samples), [0.0]])
    phi, d1, _ = bump.profile(y)
    ep = np.exp(phi)
    sup_jac = float(np.max(ep))
    lip = 1.0 + float(np.max(np.abs(d1 * ep)))
    if sup_jac > 1.0:
        raise BoundViolationError(f"sup exp(phi) = {sup_jac} exceeds 1")
    if not lip < 2.0:
        raise BoundViolationError(f"Lipschitz bound {lip} is not below 2")
    return sup_jac, lip


def bump_surface(core, surface, M=2.0, beta=0.05, h=0.3, ny=121, epsilon=None):
    """Build host chart and bump in one go; returns ``(perturbed_surface, bump)``."""
    host = build_chart(core, surface, h * 1.05, ny=ny)
    bump = make_bump(host, M, beta, h=h, epsilon=epsilon)
    return surface.root.with_overlay(bump), bump


def mean_convex_chart(core, perturbed, h_max, nx=None, ny=61, shrink=0.85, min_h=1e-3):
    """Widest mean-convex overlay chart of half-width at most ``h_max``."""
    h = h_max
    while h >= min_h:
        chart = build_chart(core, perturbed, h, nx=nx, ny=ny)
        if is_mean_convex(chart):
            return chart
        h *= shrink
    raise TubeTooWideError("no mean-convex chart found")


# flow followed by squeeze ------------------------------------------------------


@dataclass(frozen=True)
class CompositeHomotopy:
    """Flow in the chart metric until graphical, then squeeze onto the core.

    ``f_upper[i]`` is the upper F-bracket between ``curves[i]`` and the core,
    measured in the base (unperturbed) metric; the point map between the two
    metrics is the identity, so no pullback is needed.
    """

    curves: tuple = field(repr=False)
    f_upper: np.ndarray
    graph_time: float
    flow_steps: int
    squeeze: SqueezePath = field(repr=False)

    @property
    def max_f_upper(self):
        return float(np.max(self.f_upper))


def flow_squeeze_homotopy(c, chart, flow_time=0.0, chunk=10, max_steps=20_000, squeeze_steps=10, snapshots=5):
    """Composite retraction of a curve near the core of a mean-convex chart.

    The flow runs for ``flow_time`` and then until :func:`is_graphical`
    succeeds (the stopping rule; its time is reported), after which the
    graph is squeezed.

    Raises
    ------
    UnresolvedLimitError
        If the curve does not become graphical within ``max_steps``.
    """
    from .errors import UnresolvedLimitError
    from .flow import FlowBudget, FlowState, evolve
    from .metrics import f_distance

    surface = chart.surface
    base = surface.root
    state = FlowState.start(c.with_surface(surface), surface)
    if flow_time > 0:
        state = evolve(state, surface, FlowBudget(max_steps=max_steps, t_max=flow_time))
    flowed = [c, state.curve] if flow_time > 0 else [c]
    graph = is_graphical(state.curve, chart)
    while graph is None:
        if state.step_count >= max_steps or state.status != "running":
            raise UnresolvedLimitError(f"curve not graphical after {state.step_count} steps ({state.status})")
        state = evolve(state, surface, FlowBudget(max_steps=chunk))
        flowed.append(state.curve)
        graph = is_graphical(state.curve, chart)
    if len(flowed) > snapshots:
        keep = np.unique(np.linspace(0, len(flowed) - 1, snapshots).round().astype(int))
        flowed = [flowed[i] for i in keep]
    sq = squeeze_homotopy(graph, chart, squeeze_steps)
    curves = tuple(flowed) + sq.curves
    core = DiscreteCurve(chart.points[:, chart.ny // 2], base)
    f_up = np.array([f_distance(cu.with_surface(base), core, base).upper for cu in curves])
    return CompositeHomotopy(curves, f_up, float(state.time), int(state.step_count), sq)
