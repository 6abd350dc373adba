"""Riemannian 2-spheres: round spheres, triaxial ellipsoids and conformal overlays.

Every surface is stored as an axis-aligned quadric ``x²/a² + y²/b² + z²/c² = 1``
(a round sphere of radius r is the quadric with a = b = c = r).  A conformal
overlay multiplies the induced metric by ``exp(2 phi)`` where ``phi`` is
supported in a tubular neighbourhood of a geodesic; the embedding is unchanged,
so projection and curve storage always use the quadric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import ellipe

from .errors import (
    ConstraintViolationError,
    ProjectionAmbiguityError,
    UnsupportedSurfaceError,
)

#: residual reached by :func:`project_to_surface`
PROJECTION_TOL = 1e-12
#: residual accepted by operations whose precondition is "point on surface"
ON_SURFACE_TOL = 1e-9


@dataclass(frozen=True)
class MetricSurface:
    """An immutable sphere-type surface.

    Parameters
    ----------
    kind : {"round", "ellipsoid", "conformal"}
    semi_axes : tuple of float
        Semi-axes of the embedding quadric.
    overlay : object, optional
        Conformal factor provider for ``kind == "conformal"``; see
        :class:`geomorse.fermi.ConformalOverlay`.
    base : MetricSurface, optional
        The unperturbed surface underneath an overlay.
    """

    kind: str
    semi_axes: tuple
    overlay: object = None
    base: "MetricSurface | None" = None

    def __post_init__(self):
        if self.kind not in ("round", "ellipsoid", "conformal"):
            raise UnsupportedSurfaceError(f"unknown surface kind {self.kind!r}")
        axes = tuple(float(v) for v in self.semi_axes)
        if len(axes) != 3 or not all(np.isfinite(axes)) or min(axes) <= 0:
            raise ValueError(f"semi-axes must be three positive numbers, got {self.semi_axes}")
        object.__setattr__(self, "semi_axes", axes)
        if self.kind == "conformal" and (self.overlay is None or self.base is None):
            raise ValueError("a conformal surface needs an overlay and a base surface")

    @classmethod
    def round(cls, radius=1.0):
        r = float(radius)
        return cls("round", (r, r, r))

    @classmethod
    def ellipsoid(cls, a, b, c):
        return cls("ellipsoid", (a, b, c))

    @classmethod
    def from_dict(cls, spec):
        """Build from ``{"kind": "round", "radius": r}`` or
        ``{"kind": "ellipsoid", "semi_axes": [a, b, c]}``."""
        kind = spec.get("kind")
        if kind == "round":
            return cls.round(spec.get("radius", 1.0))
        if kind == "ellipsoid":
            return cls.ellipsoid(*spec["semi_axes"])
        raise UnsupportedSurfaceError(f"cannot build a surface of kind {kind!r} from JSON")

    def to_dict(self):
        if self.kind == "round":
            return {"kind": "round", "radius": self.semi_axes[0]}
        if self.kind == "ellipsoid":
            return {"kind": "ellipsoid", "semi_axes": list(self.semi_axes)}
        out = {"kind": "conformal", "base": self.base.to_dict()}
        if hasattr(self.overlay, "to_dict"):
            out["overlay"] = self.overlay.to_dict()
        return out

    def with_overlay(self, overlay):
        """Return the conformally perturbed surface ``exp(2 phi) g``."""
        root = self.root
        return MetricSurface("conformal", root.semi_axes, overlay=overlay, base=root)

    @property
    def root(self):
        """The unperturbed quadric surface."""
        return self.base.root if self.base is not None else self

    @property
    def radius(self):
        if self.kind != "round":
            raise UnsupportedSurfaceError("radius is only defined for round spheres")
        return self.semi_axes[0]

    @property
    def is_round(self):
        a, b, c = self.semi_axes
        return a == b == c and self.overlay is None

    @property
    def has_distinct_axes(self):
        a, b, c = sorted(self.semi_axes)
        return (b - a) > 0 and (c - b) > 0

    @property
    def min_axis(self):
        return min(self.semi_axes)

    @property
    def inv_sq(self):
        return 1.0 / np.asarray(self.semi_axes) ** 2

    # pointwise quadric geometry ------------------------------------------------

    def residual(self, points):
        p = np.asarray(points, dtype=float)
        return np.sum(p * p * self.inv_sq, axis=-1) - 1.0

    def normal(self, points):
        """Outward unit normal."""
        p = np.asarray(points, dtype=float)
        g = p * self.inv_sq
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def base_curvature(self, points):
        """Gaussian curvature of the quadric ``1 / (abc)² / (Σ xᵢ²/aᵢ⁴)²``."""
        p = np.asarray(points, dtype=float)
        a, b, c = self.semi_axes
        s = np.sum(p * p * self.inv_sq**2, axis=-1)
        return 1.0 / ((a * b * c) ** 2 * s * s)

    def tangent_projector(self, points):
        n = self.normal(points)
        eye = np.eye(3)
        return eye - n[..., :, None] * n[..., None, :]

    def log_conformal_factor(self, points):
        """``phi`` at the points (zero without an overlay)."""
        p = np.asarray(points, dtype=float)
        if self.overlay is None:
            return np.zeros(p.shape[:-1])
        return self.overlay.fields(p).phi

    def max_base_curvature(self):
        """Maximum of K over the quadric (attained at an umbilic-free vertex)."""
        a, b, c = self.semi_axes
        vertices = np.array([[a, 0, 0], [0, b, 0], [0, 0, c]], dtype=float)
        return float(np.max(self.base_curvature(vertices)))

    def diameter_bound(self):
        """Half the longest principal section perimeter, an upper bound on the
        intrinsic diameter."""
        a, b, c = sorted(self.semi_axes)
        return 0.5 * ellipse_perimeter(b, c)


def ellipse_perimeter(a, b):
    """Perimeter of an ellipse with semi-axes a, b via the complete elliptic
    integral of the second kind."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    big = np.maximum(a, b)
    small = np.minimum(a, b)
    m = 1.0 - np.divide(small * small, big * big, out=np.zeros_like(big), where=big > 0)
    return 4.0 * big * ellipe(m)


def _check_on_surface(surface, p, tol=ON_SURFACE_TOL):
    r = np.abs(surface.residual(p))
    if np.any(r > tol):
        raise ConstraintViolationError(
            f"point off surface: residual {float(np.max(r)):.3e} exceeds {tol:g}"
        )


def gaussian_curvature_at(surface, p):
    """Gaussian curvature of the effective metric at ``p`` (one point or an
    ``(m, 3)`` array).

    Inside a conformal overlay ``exp(2 phi) g`` the curvature is
    ``exp(-2 phi) (K - Δ_g phi)``; outside it is the quadric curvature.
    """
    pts = np.asarray(p, dtype=float)
    _check_on_surface(surface, pts)
    k = surface.base_curvature(pts)
    if surface.overlay is None:
        return float(k) if k.ndim == 0 else k
    f = surface.overlay.fields(pts)
    out = np.exp(-2.0 * f.phi) * (k - f.laplacian)
    return float(out) if out.ndim == 0 else out


def _newton_project(x, res, axes2):
    # first-order guess: lam ≈ res / |A x|² scaled by the radial factor
    ax = x / axes2
    lam = 0.5 * res / np.sum(ax * ax, axis=1)
    floor = -axes2.min() * (1 - 1e-12)
    lam = np.maximum(lam, 0.5 * floor)
    for _ in range(60):
        den = axes2 + lam[:, None]
        g = np.sum(x * x * axes2 / den**2, axis=1) - 1.0
        dg = -2.0 * np.sum(x * x * axes2 / den**3, axis=1)
        step = g / dg
        lam_new = lam - step
        lam_new = np.where(lam_new <= floor, 0.5 * (lam + floor), lam_new)
        done = np.abs(lam_new - lam) <= 4e-16 * (1 + np.abs(lam))
        lam = lam_new
        if np.all(done):
            break
    p = x * axes2 / (axes2 + lam[:, None])
    # one normalising correction along the gradient removes roundoff drift
    r = np.sum(p * p / axes2, axis=1) - 1.0
    grad = 2.0 * p / axes2
    p = p - (r / np.sum(grad * grad, axis=1))[:, None] * grad
    return p


def project_to_surface(surface, q):
    """Nearest-point projection onto the quadric.

    Newton iteration on the Lagrange condition ``p = (I + λA)⁻¹ q`` with
    ``A = diag(1/a², 1/b², 1/c²)``.  Points already within the projection
    tolerance are returned unchanged, which makes the map idempotent bitwise.

    Raises
    ------
    ProjectionAmbiguityError
        If a point lies inside the surface at depth more than ``min(a, b, c)/2``.
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    qq = np.atleast_2d(q)
    axes2 = np.asarray(surface.semi_axes) ** 2
    out = qq.copy()
    res = np.sum(qq * qq / axes2, axis=1) - 1.0
    todo = np.abs(res) > PROJECTION_TOL
    if np.any(todo):
        x = qq[todo]
        with np.errstate(divide="ignore", invalid="ignore"):
            p = _newton_project(x, res[todo], axes2)
        dist =np.linalg.norm(p - x, axis=1)
        # exterior points of a convex quadric have a unique nearest point;
        # only points deep inside can be ambiguous
        inner = (res[todo] < 0) & (dist > 0.5 * surface.min_axis)
        if np.any(inner) or not np.all(np.isfinite(p)):
            raise ProjectionAmbiguityError(
                "point lies inside the surface deeper than min(a,b,c)/2"
            )
        out[todo] = p
    return out[0] if single else out


def tangent_transport(surface, p, q, vectors):
    """Carry tangent vectors at ``p`` to ``q`` by the minimal rotation taking the
    normal at ``p`` to the normal at ``q``.

    On a round sphere this is exactly parallel transport along the minimizing
    great circle; on an ellipsoid it is the standard first-order surrogate.
    Arrays broadcast over leading dimensions.
    """
    n1 = surface.root.normal(p)
    n2 = surface.root.normal(q)
    v = np.asarray(vectors, dtype=float)
    axis = np.cross(n1, n2)
    s = np.linalg.norm(axis, axis=-1)
    c = np.sum(n1 * n2, axis=-1)
    safe = s > 1e-15
    k = np.where(safe[..., None], axis / np.where(safe, s, 1.0)[..., None], 0.0)
    kv = np.cross(k, v)
    kdv = np.sum(k * v, axis=-1)
    return v * c[..., None] + kv * s[..., None] + k * (kdv * (1 - c))[..., None]


def _round_distance(r, p, q):
    cr = np.linalg.norm(np.cross(p, q), axis=-1)
    dt = np.sum(p * q, axis=-1)
    return r * np.arctan2(cr, dt)


def _section_arc_length(surface, p, q, segments=16):
    """Length of the central-section arc ``D·slerp(D⁻¹p, D⁻¹q)`` joining p and
    q, a path on the surface (so an upper bound on intrinsic distance)."""
    axes = np.asarray(surface.semi_axes)
    u = p / axes
    v = q / axes
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    omega = np.arctan2(np.linalg.norm(np.cross(u, v), axis=-1), np.sum(u * v, axis=-1))

    # unit direction from u toward v in their common great circle; antipodal
    # pairs get an arbitrary perpendicular
    perp = v - np.cos(omega)[..., None] * u
    pn = np.linalg.norm(perp, axis=-1, keepdims=True)
    helper = np.where(np.abs(u[..., :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    alt = np.cross(u, helper)
    alt = alt / np.linalg.norm(alt, axis=-1, keepdims=True)
    degenerate = pn < 1e-12
    perp = np.where(degenerate, alt, perp / np.where(degenerate, 1.0, pn))

    def chord_sum(m):
        t = np.linspace(0.0, 1.0, m + 1).reshape((m + 1,) + (1,) * omega.ndim)
        ang = (t * omega)[..., None]
        pts = np.cos(ang) * u + np.sin(ang) * perp
        pts = pts / np.linalg.norm(pts, axis=-1, keepdims=True) * axes
        return np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=-1), axis=0)

    fine = chord_sum(segments)
    coarse = chord_sum(segments // 2)
    return (4.0 * fine - coarse) / 3.0


def distance_matrix(surface, P, Q):
    """Pairwise intrinsic distances for batch use (Hausdorff, transport costs).

    Exact on round spheres.  On ellipsoids it returns the length of the
    central-section arc through both points, which is a surface path and hence
    never below the true distance; for nearby points it agrees with
    :func:`surface_distance` to O(d³).
    """
    root = surface.root
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if root.kind == "round":
        r = root.semi_axes[0]
        return _round_distance(r, P[:, None, :] / r, Q[None, :, :] / r)
    out = np.empty((len(P), len(Q)))
    block = max(1, 20000 // max(1, len(Q)))
    for i in range(0, len(P), block):
        pp = np.broadcast_to(P[i : i + block, None, :], (len(P[i : i + block]), len(Q), 3))
        qq = np.broadcast_to(Q[None, :, :], pp.shape)
        out[i : i + block] = _section_arc_length(root, pp, qq)
    return out


def surface_distance(surface, p, q, samples=96):
    """Intrinsic distance between two surface points.

    Closed form on round spheres.  On ellipsoids a polygonal path with
    ``samples`` segments, started on the central section through both points,
    is relaxed to a discrete geodesic by minimizing its Dirichlet energy over
    the surface parametrization ``u ↦ D u/|u|``; its length is then corrected
    with projected midpoints.  Overlays are ignored (distances are measured in
    the base metric).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    root = surface.root
    _check_on_surface(root, np.stack([p, q]))
    if np.array_equal(p, q):
        return 0.0
    if root.kind == "round":
        r = root.semi_axes[0]
        return float(_round_distance(r, p / r, q / r))
    # order endpoints so the result is exactly symmetric
    if tuple(q) < tuple(p):
        p, q = q, p
    axes = np.asarray(root.semi_axes)
    u0 = p / axes
    u1 = q / axes
    u0 /= np.linalg.norm(u0)
    u1 /= np.linalg.norm(u1)
    if np.dot(u0, u1) < -1 + 1e-12:
        # antipodal: pick any plane through both
        perp = np.cross(u0, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(u0, [0.0, 1.0, 0.0])
        perp /= np.linalg.norm(perp)
        t = np.linspace(0, np.pi, samples + 1)[:, None]
        init = np.cos(t) * u0 + np.sin(t) * perp
    else:
        omega = np.arccos(np.clip(np.dot(u0, u1), -1, 1))
        t = np.linspace(0, 1, samples + 1)[:, None]
        init = (np.sin((1 - t) * omega) * u0 + np.sin(t * omega) * u1) / np.sin(omega)

    def embed(u):
        nu = np.linalg.norm(u, axis=1, keepdims=True)
        return axes * u / nu, nu

    def energy(flat):
        inner = flat.reshape(-1, 3)
        u = np.vstack([u0, inner, u1])
        r, nu = embed(u)
        d = np.diff(r, axis=0)
        e = np.sum(d * d)
        g_r = np.zeros_like(r)
        g_r[:-1] -= 2 * d
        g_r[1:] += 2 * d
        uh = u / nu
        # dr/du = D (I - û ûᵀ) / |u|
        gd = g_r * axes
        g_u = (gd - uh * np.sum(gd * uh, axis=1, keepdims=True)) / nu
        return e, g_u[1:-1].ravel()

    res = optimize.minimize(
        energy, init[1:-1].ravel(), jac=True, method="L-BFGS-B",
        options={"maxiter": 5000, "ftol": 1e-15, "gtol": 1e-12},
    )
    r, _ = embed(np.vstack([u0, res.x.reshape(-1, 3), u1]))
    chords = np.linalg.norm(np.diff(r, axis=0), axis=1)
    mids = project_to_surface(root, 0.5 * (r[1:] + r[:-1]))
    halves = np.linalg.norm(mids - r[:-1], axis=1) + np.linalg.norm(r[1:] - mids, axis=1)
    return float(np.sum((4.0 * halves - chords) / 3.0))


def principal_ellipses(surface, n=512):
    """The three coordinate-plane sections of an ellipsoid, shortest first.

    Ties in length are broken by the lexicographic order of the unit plane
    normal, so on a round sphere the order is the z = 0, y = 0, x = 0 circle.

    Returns
    -------
    list of DiscreteCurve
    """
    from .curve import curve_from_function

    if surface.kind not in ("round", "ellipsoid"):
        raise UnsupportedSurfaceError("principal ellipses need a round or ellipsoidal surface")
    a, b, c = surface.semi_axes
    entries = []
    for axis in range(3):
        normal = np.zeros(3)
        normal[axis] = 1.0
        others = [i for i in range(3) if i != axis]
        sa, sb = surface.semi_axes[others[0]], surface.semi_axes[others[1]]
        perim = float(ellipse_perimeter(sa, sb))

        def fun(t, others=others, sa=sa, sb=sb):
            pts = np.zeros((len(t), 3))
            pts[:, others[0]] = sa * np.cos(t)
            pts[:, others[1]] = sb * np.sin(t)
            return pts

        entries.append((round(perim, 12), tuple(normal), fun))
    entries.sort(key=lambda e: (e[0], e[1]))
    return [curve_from_function(e[2], n, surface) for e in entries]
