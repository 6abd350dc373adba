"""Stability operator of a closed geodesic and the local min-max family.

The Jacobi operator ``-f'' - K f`` acts on scalar normal variations (the
normal bundle of an embedded loop on an orientable surface is trivial).  It
is discretized on an arclength-uniform periodic grid with a fourth-order
stencil, so low eigenvalues at ``n = 512`` are accurate far below the
nullity tolerance.

The local family pushes curves through a Fermi chart around the geodesic:
``F_v(c(x, y)) = c(x, y + Σ v_i X_i(x))`` with ``X_i`` the unstable
eigenfunctions.  This is normal exponential displacement on the core and an
exact group action in the chart, so ``F_{-v} ∘ F_v`` is the identity up to
interpolation roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import minimize

from .curve import DiscreteCurve, VarifoldSample, geodesic_curvature, resample, segment_lengths, to_varifold
from .errors import (
    CoreNotGeodesicError,
    DegenerateGeodesicError,
    NoUnstableDirectionError,
    StationaryStartError,
    TubeTooWideError,
)
from .fermi import build_chart
from .surface import gaussian_curvature_at

DEFAULT_TOL = 1e-6
TOL_RESOLUTION = 512


def resolution_tol(n):
    """Nullity threshold for an ``n``-point grid: 1e-6 at 512 points, growing as ``1/n²`` below."""
    return DEFAULT_TOL * max(1.0, (TOL_RESOLUTION / n) ** 2)
CORE_CURVATURE_TOL = 1e-6


@dataclass(frozen=True)
class JacobiSpectrum:
    """Lowest eigenpairs of ``-f'' - K f`` on a closed geodesic.

    ``eigenfunctions[i]`` is sampled on ``grid`` (arclength-uniform) and
    normalized so that ``Σ f² h = 1`` with ``h = length / n``.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    tol: float
    length: float
    grid: DiscreteCurve = field(repr=False)
    curvature: np.ndarray = field(repr=False)

    @property
    def index(self):
        return int(np.sum(self.eigenvalues < -self.tol))

    @property
    def nullity(self):
        return int(np.sum(np.abs(self.eigenvalues) <= self.tol))

    @property
    def spacing(self):
        return self.length / self.grid.n

    def rayleigh_quotient(self, f):
        """``∫(f'² - K f²) / ∫ f²`` with the same discretization as the operator."""
        f = np.asarray(f, dtype=float)
        A = _operator(self.curvature, self.spacing)
        return float(f @ A @ f / (f @ f))

    def to_dict(self):
        return {
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "index": self.index,
            "nullity": self.nullity,
            "tol": self.tol,
            "length": self.length,
        }


def _operator(K, h):
    """Symmetric matrix of ``-d²/ds² - K`` with a fourth-order periodic stencil."""
    n = len(K)
    A = np.zeros((n, n))
    idx = np.arange(n)
    for off, w in ((0, 30.0), (1, -16.0), (2, 1.0)):
        A[idx, (idx + off) % n] += w / (12.0 * h * h)
        if off:
            A[idx, (idx - off) % n] += w / (12.0 * h * h)
    A[idx, idx] -= K
    return A


def second_order_operator(K, h):
    """The plain three-point discretization, kept for convergence comparisons."""
    n = len(K)
    A = np.zeros((n, n))
    idx = np.arange(n)
    A[idx, idx] = 2.0 / (h * h) - K
    A[idx, (idx + 1) % n] = -1.0 / (h * h)
    A[idx, (idx - 1) % n] = -1.0 / (h * h)
    return A


def _check_geodesic(gamma, surface):
    k = float(np.max(np.abs(geodesic_curvature(gamma, surface))))
    if k >= CORE_CURVATURE_TOL:
        raise CoreNotGeodesicError(f"curve is not a geodesic: sup |κ| = {k:.3e}")


def stability_spectrum(gamma, surface=None, m=8, tol=None, n=None):
    """Lowest ``m`` eigenpairs of the Jacobi operator of a closed geodesic.

    Parameters
    ----------
    gamma : DiscreteCurve
        A geodesic (``sup |κ| < 1e-6``).
    surface : MetricSurface, optional
    m : int
        Number of eigenpairs, at most ``n / 4``.
    tol : float, optional
        Threshold separating negative, zero and positive eigenvalues;
        defaults to :func:`resolution_tol` of the grid size.
    n : int, optional
        Grid size; defaults to the vertex count of ``gamma``.

    Raises
    ------
    CoreNotGeodesicError
    """
    surface = surface if surface is not None else gamma.surface
    gamma = gamma.with_surface(surface)
    _check_geodesic(gamma, surface)
    n = gamma.n if n is None else int(n)
    if m > n // 4:
        raise ValueError(f"at most n/4 = {n // 4} eigenpairs can be requested")
    tol = resolution_tol(n) if tol is None else float(tol)
    grid = resample(gamma, n)
    L = float(np.sum(segment_lengths(grid)))
    h = L / n
    K = np.asarray(gaussian_curvature_at(surface, grid.vertices), dtype=float)
    vals, vecs = eigh(_operator(K, h), subset_by_index=[0, m - 1])
    funcs = vecs.T / np.sqrt(h)
    # fix signs so the largest-magnitude sample is positive
    for f in funcs:
        if f[np.argmax(np.abs(f))] < 0:
            f *= -1.0
    return JacobiSpectrum(vals, funcs, tol, L, grid, K)


# local min-max family ----------------------------------------------------------


@dataclass(frozen=True)
class LocalMinMaxFamily:
    """The k-parameter family ``v -> F_v`` around an unstable geodesic.

    ``v`` is a raw amplitude vector with ``|v| <= radius``; the unit-ball
    parameter used by :func:`boundary_escape_flow` is ``u = v / radius``.
    """

    core: DiscreteCurve
    spectrum: JacobiSpectrum = field(repr=False)
    chart: object = field(repr=False)
    sections: np.ndarray = field(repr=False)
    radius: float
    boundary_drop: float
    c1_proxy: float
    hessian: np.ndarray = field(repr=False)
    clamp_radius: float = 1.0

    @property
    def k(self):
        return len(self.sections)

    @property
    def length(self):
        return self.spectrum.length

    def _sections_at(self, x):
        nodes = self.chart.x
        return np.array([np.interp(x, nodes, s, period=self.chart.L) for s in self.sections])

    def heights(self, v):
        v = np.asarray(v, dtype=float).reshape(-1)
        return v @ self.sections

    def curve(self, v):
        """``F_v(γ)``."""
        g = self.heights(v)
        return DiscreteCurve(self.chart.point(self.chart.x, g), self.chart.surface)

    def length_at(self, v):
        """``L^γ(v) = |F_v(γ)|``."""
        return float(np.sum(segment_lengths(self.curve(v))))

    def push(self, c, v):
        """Apply ``F_v`` to an arbitrary curve inside the tube."""
        x, y = self.chart.locate(c.vertices)
        y2 = y + np.asarray(v, dtype=float) @ self._sections_at(x)
        return DiscreteCurve(self.chart.point(x, y2), c.surface if c.surface is not None else self.chart.surface)

    def eta(self, points):
        """Values ``η_i(c(x, y)) = clamp(y X_i(x), -1, 1)`` at surface points."""
        x, y = self.chart.locate(points)
        return np.clip(y[None, :] * self._sections_at(x), -self.clamp_radius, self.clamp_radius)


def _fd_hessian(fun, k, step):
    f0 = fun(np.zeros(k))
    H = np.zeros((k, k))
    e = np.eye(k) * step
    for i in range(k):
        H[i, i] = (fun(e[i]) - 2.0 * f0 + fun(-e[i])) / step**2
        for j in range(i + 1, k):
            H[i, j] = H[j, i] = (
                fun(e[i] + e[j]) - fun(e[i] - e[j]) - fun(-e[i] + e[j]) + fun(-e[i] - e[j])
            ) / (4.0 * step**2)
    return H


def _fd_hessian_at(fun, v0, step):
    k = len(v0)
    return _fd_hessian(lambda d: fun(v0 + d), k, step)


def _sphere_samples(k, count=64):
    if k == 1:
        return np.array([[1.0], [-1.0]])
    if k == 2:
        t = 2 * np.pi * np.arange(count) / count
        return np.c_[np.cos(t), np.sin(t)]
    # Fibonacci lattice on S^2, then the axes; higher k use random directions
    if k == 3:
        i = np.arange(count) + 0.5
        z = 1 - 2 * i / count
        r = np.sqrt(1 - z * z)
        t = np.pi * (1 + 5**0.5) * i
        pts = np.c_[r * np.cos(t), r * np.sin(t), z]
    else:
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(count, k))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return np.vstack([pts, np.eye(k), -np.eye(k)])


def _section_derivative(chart, s):
    d = np.diff(np.concatenate([chart.x, [chart.L]]))
    return (np.roll(s, -1) - s) / d


def hessian_at_zero(family, directions=None, step=1e-3):
    """Finite-difference Hessian of ``L^γ`` over the first ``directions`` eigenfunctions."""
    spec = family.spectrum
    m = directions or family.k
    secs = spec.eigenfunctions[:m]
    chart = family.chart

    def fun(v):
        g = v @ secs
        return float(np.sum(segment_lengths(DiscreteCurve(chart.point(chart.x, g), chart.surface))))

    return _fd_hessian(fun, m, step)


def build_local_minmax(
    gamma,
    surface=None,
    spectrum=None,
    *,
    beta=0.25,
    radius=0.3,
    shrink=0.7,
    chart_half_width=0.5,
    require_nondegenerate=True,
    boundary_samples=64,
):
    """Local min-max family around a geodesic of index ``k >= 1``.

    The radius starts at ``radius`` and shrinks until the finite-difference
    Hessian of ``L^γ`` is negative definite at the centre and at sample
    points of the ball, and the C¹ proxy ``radius · (max |X| + max |X'|)``
    is below ``beta``.  The boundary drop ``b = |γ| - max_{|v| = radius} L^γ``
    is recorded.

    Raises
    ------
    NoUnstableDirectionError
        If the index is 0.
    DegenerateGeodesicError
        If the nullity is positive and ``require_nondegenerate`` is set.
    """
    surface = surface if surface is not None else gamma.surface
    if spectrum is None:
        spectrum = stability_spectrum(gamma, surface, m=min(8, gamma.n // 4))
    k = spectrum.index
    if k == 0:
        raise NoUnstableDirectionError("geodesic has index 0; no unstable directions")
    if spectrum.nullity > 0 and require_nondegenerate:
        raise DegenerateGeodesicError(f"geodesic has nullity {spectrum.nullity}")
    core = spectrum.grid
    chart = None
    hw = chart_half_width
    while chart is None:
        try:
            chart = build_chart(core, surface, hw, ny=41)
        except TubeTooWideError:
            hw *= 0.7
            if hw < 1e-3:
                raise
    sections = spectrum.eigenfunctions[:k].copy()
    mag = np.max(np.linalg.norm(sections, axis=0))
    dmag = np.max(np.linalg.norm(np.array([_section_derivative(chart, s) for s in sections]), axis=0))

    def L(v):
        g = np.asarray(v) @ sections
        return float(np.sum(segment_lengths(DiscreteCurve(chart.point(chart.x, g), chart.surface))))

    r = radius
    while True:
        if r * mag >= 0.9 * chart.h:
            r *= shrink
            continue
        proxy = r * (mag + dmag)
        ok = proxy < beta
        if ok:
            step = min(1e-3, 0.05 * r)
            H0 = _fd_hessian(L, k, step)
            ok = bool(np.all(np.linalg.eigvalsh(H0) < 0))
            if ok:
                dirs = np.vstack([np.eye(k), -np.eye(k)])
                for d in dirs:
                    for frac in (0.5, 1.0):
                        v0 = frac * (r - step) * d
                        if not np.all(np.linalg.eigvalsh(_fd_hessian_at(L, v0, step)) < 0):
                            ok = False
                            break
                    if not ok:
                        break
        if ok:
            break
        r *= shrink
        if r < 1e-6:
            raise NoUnstableDirectionError("could not find a ball where L^γ is concave")
    bpts = r * _sphere_samples(k, boundary_samples)
    top = max(L(v) for v in bpts)
    b = spectrum.length - top
    return LocalMinMaxFamily(core, spectrum, chart, sections, r, float(b), float(r * (mag + dmag)), H0)


def l_star(v, family):
    """``L*(V) = |V| + (|λ₁| + 1) Σ_i (∫ η_i dV)²``.

    Raises
    ------
    OutOfTubeError
        If an atom lies outside the family's chart.
    """
    if isinstance(v, DiscreteCurve):
        v = to_varifold(v)
    if not isinstance(v, VarifoldSample):
        raise TypeError("l_star needs a VarifoldSample or DiscreteCurve")
    if len(v) == 0:
        return 0.0
    eta = family.eta(v.points)
    integrals = eta @ v.weights
    lam1 = abs(float(family.spectrum.eigenvalues[0]))
    return float(v.mass + (lam1 + 1.0) * np.sum(integrals**2))


@dataclass(frozen=True)
class EscapeTrajectory:
    """Unit-ball parameters and lengths along the escape flow."""

    points: np.ndarray
    lengths: np.ndarray
    exit_point: np.ndarray
    exit_length: float


def boundary_escape_flow(family, start, max_steps=10_000, step=0.02, grad_step=1e-6):
    """Follow ``u' = -(1 - |u|²) ∇L^γ(radius · u)`` from ``start`` to the boundary.

    ``start`` is in unit-ball coordinates.  The trajectory is traced with
    steps of fixed length ``step`` in ``u`` (a reparametrization of the same
    curve), halved when needed so the length never increases.  Once
    ``|u| > 1 - 1e-3`` the point is pushed radially onto the unit sphere.

    Raises
    ------
    StationaryStartError
        If ``start`` is within 1e-9 of the centre.
    """
    u = np.asarray(start, dtype=float).reshape(-1).copy()
    if len(u) != family.k:
        raise ValueError(f"start must have {family.k} components")
    if np.linalg.norm(u) <= 1e-9:
        raise StationaryStartError("escape flow started at the local maximum")
    r = family.radius

    def L(w):
        return family.length_at(r * w)

    def grad(w):
        g = np.zeros_like(w)
        for i in range(len(w)):
            e = np.zeros_like(w)
            e[i] = grad_step
            g[i] = (L(w + e) - L(w - e)) / (2 * grad_step)
        return g

    pts = [u.copy()]
    lens = [L(u)]
    for _ in range(max_steps):
        if np.linalg.norm(u) > 1 - 1e-3:
            break
        field_ = -(1.0 - u @ u) * grad(u)
        norm = np.linalg.norm(field_)
        if norm == 0:
            raise StationaryStartError("escape flow reached a critical point")
        h = step
        while True:
            trial = u + h * field_ / norm
            if np.linalg.norm(trial) > 1.0:
                trial = trial / np.linalg.norm(trial)
            lt = L(trial)
            if lt <= lens[-1] + 1e-12 or h < 1e-8:
                break
            h *= 0.5
        u = trial
        pts.append(u.copy())
        lens.append(lt)
    exit_u = u / np.linalg.norm(u)
    return EscapeTrajectory(np.array(pts), np.array(lens), exit_u, L(exit_u))


def minmax_radius_report(family, radii=(1e-3, 3e-3, 1e-2, 3e-2), trials=200, modes=6, seed=0):
    """Largest tested F-ball radius for which every random nearby curve V has
    ``max_v |F_v(V)| >= |γ|``.

    Random curves are graphs ``c(x, Σ a_m e_m(x))`` over the core with
    Fourier modes ``e_m``; their F-distance to the core is bounded above by
    the transport bracket.  Returns a dict with the per-radius pass counts.
    """
    from .metrics import f_distance

    rng = np.random.default_rng(seed)
    chart = family.chart
    x = chart.x
    L0 = family.length
    theta = 2 * np.pi * x / chart.L
    basis = [np.ones_like(x)] + [f(m * theta) for m in range(1, modes) for f in (np.cos, np.sin)]
    basis = np.array(basis)
    core = DiscreteCurve(chart.point(x, np.zeros_like(x)), chart.surface)
    rows = []
    best = 0.0
    for rad in radii:
        passed = 0
        tested = 0
        for _ in range(trials):
            a = rng.normal(size=len(basis))
            g = a @ basis
            g *= rad / max(1e-300, np.max(np.abs(g)))
            V = DiscreteCurve(chart.point(x, g), chart.surface)
            fb = f_distance(V, core)
            if fb.upper >= 10 * rad:
                continue
            tested += 1
            proj = np.array([np.sum(g * s) * (chart.L / len(x)) for s in family.sections])
            v0 = np.clip(-proj, -family.radius, family.radius)

            def neg(v, V=V):
                if np.linalg.norm(v) > family.radius:
                    return -0.0 + 1e3 * (np.linalg.norm(v) - family.radius)
                return -float(np.sum(segment_lengths(family.push(V, v))))

            res = minimize(neg, v0, method="Nelder-Mead", options={"xatol": 1e-9, "fatol": 1e-13})
            if -res.fun >= L0 - 1e-9:
                passed += 1
        rows.append({"radius": rad, "tested": tested, "passed": passed})
        if tested and passed == tested:
            best = rad
        else:
            break
    return {"largest_radius": best, "rows": rows}
