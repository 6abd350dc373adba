"""Distances between curves viewed as varifolds.

The F-metric is a supremum over test functions on the bundle of tangent lines
with ``|f| <= 1`` and ``Lip(f) <= 1``; it is never computed exactly.  Instead
:func:`f_distance` returns a certified bracket: the lower end is attained by
explicit admissible test functions, the upper end by an explicit transport
coupling of the atoms.

Ground metric on tangent lines (a declared convention): the intrinsic distance
between base points plus the angle, in ``[0, π/2]``, between the second line
and the transport of the first, capped at the surface diameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .curve import DiscreteCurve, VarifoldSample, to_varifold
from .errors import ConstraintViolationError, DegenerateCurveError
from .surface import ON_SURFACE_TOL, distance_matrix, project_to_surface, tangent_transport

EXACT_ATOM_LIMIT = 1024
DEFAULT_RADII = (0.02, 0.05, 0.1, 0.2, 0.5)
_AXES = np.array(
    [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=float
)
_AXES /= np.linalg.norm(_AXES, axis=1, keepdims=True)


@dataclass(frozen=True)
class FBracket:
    """Two-sided estimate ``lower <= F(V, W) <= upper``."""

    lower: float
    upper: float
    method: str
    atoms_v: int
    atoms_w: int
    approximate: bool = False

    @property
    def gap(self):
        return self.upper - self.lower

    def to_dict(self):
        return {
            "lower": self.lower,
            "upper": self.upper,
            "method": self.method,
            "atoms_v": self.atoms_v,
            "atoms_w": self.atoms_w,
        }


def _as_varifold(obj):
    if isinstance(obj, VarifoldSample):
        return obj
    if isinstance(obj, DiscreteCurve):
        return to_varifold(obj)
    raise TypeError(f"expected a VarifoldSample or DiscreteCurve, got {type(obj).__name__}")


def _support_points(obj):
    if isinstance(obj, DiscreteCurve):
        if obj.is_point:
            return obj.vertices[:1]
        v = obj.vertices
        mids = 0.5 * (v + np.roll(v, -1, axis=0))
        if obj.surface is not None:
            mids = project_to_surface(obj.surface, mids)
        return np.vstack([v, mids])
    if isinstance(obj, VarifoldSample):
        return obj.points
    return np.atleast_2d(np.asarray(obj, dtype=float))


def _resolve_surface(surface, *objs):
    if surface is not None:
        return surface
    for o in objs:
        s = getattr(o, "surface", None)
        if s is not None:
            return s
    raise ValueError("a surface is required")


def hausdorff_distance(a, b, surface=None):
    """Intrinsic Hausdorff distance between the supports of two curves.

    Vertices and projected segment midpoints are used as samples, so the
    result is accurate to about a quarter of the spacing.

    Raises
    ------
    DegenerateCurveError
        If either input has no points.
    """
    surface = _resolve_surface(surface, a, b)
    pa = _support_points(a)
    pb = _support_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise DegenerateCurveError("Hausdorff distance of an empty set")
    d = distance_matrix(surface, pa, pb)
    return float(max(np.max(np.min(d, axis=1)), np.max(np.min(d, axis=0))))


def ground_cost(v, w, surface):
    """Matrix of Grassmannian ground distances between the atoms of v and w."""
    root = surface.root
    d = distance_matrix(root, v.points, w.points)
    moved = tangent_transport(root, v.points[:, None, :], w.points[None, :, :], v.lines[:, None, :])
    cosang = np.abs(np.sum(moved * w.lines[None, :, :], axis=-1))
    cosang /= np.linalg.norm(moved, axis=-1)
    angle = np.arccos(np.clip(cosang, 0.0, 1.0))
    return np.minimum(d + angle, root.diameter_bound()), d


def _split(vs, k):
    if k == 1:
        return vs
    return VarifoldSample(
        np.repeat(vs.points, k, axis=0),
        np.repeat(vs.lines, k, axis=0),
        np.repeat(vs.weights / k, k),
        vs.surface,
    )


def _assignment_upper(cost, mv, mw):
    """Best one-to-one partial coupling; unmatched mass costs 1 per unit."""
    nv, nw = len(mv), len(mw)
    big = 4.0 * (mv.sum() + mw.sum()) + 1.0
    pair = np.minimum(mv[:, None], mw[None, :]) * cost + np.abs(mv[:, None] - mw[None, :])
    top = np.hstack([pair, np.full((nv, nv), big)])
    top[np.arange(nv), nw + np.arange(nv)] = mv
    bottom = np.hstack([np.full((nw, nw), big), np.zeros((nw, nv))])
    bottom[np.arange(nw), np.arange(nw)] = mw
    full = np.vstack([top, bottom])
    rows, cols = linear_sum_assignment(full)
    return float(full[rows, cols].sum())


def _greedy_upper(v, w, surface, cost_fn):
    """Nearest-neighbour greedy coupling for large atom sets (flagged approximate)."""
    tree = cKDTree(w.points)
    k = min(8, len(w))
    _, idx = tree.query(v.points, k=k)
    idx = np.atleast_2d(idx.reshape(len(v), k))
    rows = np.repeat(np.arange(len(v)), k)
    cols = idx.ravel()
    c = cost_fn(rows, cols)
    mv, mw = v.weights, w.weights
    pair = np.minimum(mv[rows], mw[cols]) * c + np.abs(mv[rows] - mw[cols])
    alone = mv[rows] + mw[cols]
    gain = alone - pair
    order = np.argsort(-gain, kind="stable")
    used_v = np.zeros(len(v), bool)
    used_w = np.zeros(len(w), bool)
    total = 0.0
    for t in order:
        i, j = rows[t], cols[t]
        if used_v[i] or used_w[j] or gain[t] <= 0:
            continue
        used_v[i] = used_w[j] = True
        total += pair[t]
    total += mv[~used_v].sum() + mw[~used_w].sum()
    return float(total)


def _max_normal_curvature(surface):
    a, b, c = sorted(surface.root.semi_axes)
    return c / (a * a)


def _dictionary_lower(v, w, surface, d_vw, centers, radii):
    """Best value of |V(f) - W(f)| over the admissible test dictionary."""
    mv, mw = v.weights, w.weights
    best = abs(mv.sum() - mw.sum())  # f ≡ ±1
    if len(v) and len(w):
        # distance to the other support, clipped at 1 (1-Lipschitz, vanishes there)
        best = max(best, float(np.sum(mv * np.minimum(1.0, d_vw.min(axis=1)))))
        best = max(best, float(np.sum(mw * np.minimum(1.0, d_vw.min(axis=0)))))
    pts = [p for p in (v.points, w.points) if len(p)]
    if pts and centers > 0:
        cand = np.vstack([p[np.linspace(0, len(p) - 1, min(centers, len(p))).astype(int)] for p in pts])
        dv = distance_matrix(surface, v.points, cand) if len(v) else np.zeros((0, len(cand)))
        dw = distance_matrix(surface, w.points, cand) if len(w) else np.zeros((0, len(cand)))
        for r in radii:
            fv = np.clip(r - dv, 0.0, 1.0)
            fw = np.clip(r - dw, 0.0, 1.0)
            val = mv @ fv - mw @ fw
            best = max(best, float(np.max(np.abs(val))))
    lip = max(1.0, _max_normal_curvature(surface))
    # line features |<l, e>| / Lip; transport turns lines by at most k_max · distance
    fv = np.abs(v.lines @ _AXES.T) / lip if len(v) else np.zeros((0, len(_AXES)))
    fw = np.abs(w.lines @ _AXES.T) / lip if len(w) else np.zeros((0, len(_AXES)))
    val = mv @ fv - mw @ fw
    best = max(best, float(np.max(np.abs(val))))
    return best


def f_distance(v, w, surface=None, *, exact_limit=EXACT_ATOM_LIMIT, centers=24, radii=DEFAULT_RADII):
    """Two-sided estimate of the varifold F-distance.

    Parameters
    ----------
    v, w : VarifoldSample or DiscreteCurve
    surface : MetricSurface, optional
        Defaults to the surface attached to the inputs; distances always use
        the unperturbed base metric.
    exact_limit : int
        Atom count up to which the coupling is solved exactly.

    Returns
    -------
    FBracket
    """
    v = _as_varifold(v)
    w = _as_varifold(w)
    surface = _resolve_surface(surface, v, w).root
    for vs in (v, w):
        if len(vs) and np.max(np.abs(surface.residual(vs.points))) > ON_SURFACE_TOL:
            raise ConstraintViolationError("varifold atom off the surface")
    nv, nw = len(v), len(w)
    if nv == 0 or nw == 0:
        gap = abs(v.mass - w.mass)
        return FBracket(gap, gap, "trivial", nv, nw)

    cost, d_vw = ground_cost(v, w, surface)
    lower = _dictionary_lower(v, w, surface, d_vw, centers, radii)
    if max(nv, nw) <= exact_limit:
        lcm = nv * nw // math.gcd(nv, nw)
        if lcm <= exact_limit and nv != nw:
            vs, ws = _split(v, lcm // nv), _split(w, lcm // nw)
            c = np.repeat(np.repeat(cost, lcm // nv, axis=0), lcm // nw, axis=1)
        else:
            vs, ws, c = v, w, cost
        upper = _assignment_upper(c, vs.weights, ws.weights)
        method, approx = "assignment", False
    else:

        def cost_fn(rows, cols):
            return cost[rows, cols]

        upper = _greedy_upper(v, w, surface, cost_fn)
        method, approx = "greedy", True
    return FBracket(float(lower), float(upper), method, nv, nw, approx)


def check_f_to_hausdorff(v, w, h, surface=None):
    """Evaluate the implication ``upper(F) < h²/10  ⇒  d_H < h``.

    Returns True when the implication holds (including vacuously)."""
    surface = _resolve_surface(surface, v, w)
    bracket = f_distance(v, w, surface)
    if bracket.upper >= h * h / 10.0:
        return True
    return hausdorff_distance(v, w, surface) < h
