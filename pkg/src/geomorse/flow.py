"""Curve shortening flow on a surface and pull-tight of sweepout families.

The discrete velocity at vertex ``i`` is the tangent-plane projection of the
uniform-parameter second difference ``(X[i+1] - 2 X[i] + X[i-1]) / h²`` with
``h`` the mean spacing.  Its normal part approximates ``κ N``; its tangential
part pulls the vertices toward equal spacing, so the scheme redistributes
itself and rarely needs resampling.  Steps are semi-implicit: the explicit
velocity is filtered through ``(I - dt Δ)^{-1}`` (a circulant solve done with
an FFT) before being projected to the tangent planes.  Fixed points of the
step are exactly the discrete geodesics, independently of ``dt``.

Inside a conformal overlay ``exp(2 phi) g`` the velocity is
``exp(-2 phi) (κ N - (∇phi)^⊥)``, which is the flow of the perturbed metric.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .curve import (
    MIN_VERTICES,
    DiscreteCurve,
    _tangent_frames,
    geodesic_curvature,
    is_embedded,
    resample,
    segment_lengths,
)
from .errors import EmbeddednessLossError, FamilyFlowError, StepSizeError
from .surface import project_to_surface

STABILITY_FACTOR = 0.4
DEFAULT_DT_FACTOR = 0.25
CURVATURE_TOL = 1e-6
PLATEAU_TOL = 1e-10
PLATEAU_STEPS = 100
POINT_LENGTH = 1e-6
LENGTH_SLACK = 1e-10
SPACING_RATIO_LIMIT = 4.0

RUNNING = "running"
CONVERGED_GEODESIC = "converged_geodesic"
CONVERGED_POINT = "converged_point"
STEP_LIMIT = "step_limit"
_TERMINAL = (CONVERGED_GEODESIC, CONVERGED_POINT, STEP_LIMIT)


@dataclass(frozen=True)
class FlowBudget:
    """Stopping limits for :func:`evolve`.

    ``dt=None`` picks ``0.25 · (min spacing)²`` afresh at every step.
    """

    max_steps: int = 200_000
    t_max: float = np.inf
    dt: float | None = None
    coarsen: bool = True


@dataclass(frozen=True)
class FlowState:
    """Snapshot of a flowing curve with its length and curvature history."""

    curve: DiscreteCurve
    time: float = 0.0
    step_count: int = 0
    length_history: tuple = ()
    curvature_history: tuple = ()
    status: str = RUNNING
    initial_spacing: float = field(default=0.0, repr=False)

    @classmethod
    def start(cls, curve, surface=None):
        surface = surface if surface is not None else curve.surface
        curve = curve.with_surface(surface)
        if curve.is_point:
            return cls(curve, 0.0, 0, ((0.0, 0.0),), ((0.0, np.nan),), CONVERGED_POINT, 0.0)
        lengths = segment_lengths(curve)
        kmax = float(np.max(np.abs(geodesic_curvature(curve, surface))))
        total = float(lengths.sum())
        return cls(curve, 0.0, 0, ((0.0, total),), ((0.0, kmax),), RUNNING, float(lengths.mean()))

    @property
    def length(self):
        return self.length_history[-1][1]

    @property
    def max_curvature(self):
        return self.curvature_history[-1][1]

    def trace(self):
        """Rows ``(time, length, max_curvature)``."""
        return [(t, l, k) for (t, l), (_, k) in zip(self.length_history, self.curvature_history)]


def stability_bound(curve):
    """Largest admissible time step, ``0.4 · (min spacing)²``."""
    return STABILITY_FACTOR * float(np.min(segment_lengths(curve))) ** 2


def _velocity(X, surface):
    h = np.mean(np.linalg.norm(np.roll(X, -1, axis=0) - X, axis=1))
    lap = (np.roll(X, -1, axis=0) + np.roll(X, 1, axis=0) - 2.0 * X) / (h * h)
    normal = surface.root.normal(X)
    vel = lap - normal * np.sum(lap * normal, axis=1, keepdims=True)
    if surface.overlay is not None:
        _, _, conormal = _tangent_frames(DiscreteCurve(X), surface)
        f = surface.overlay.fields(X)
        push = np.sum(f.gradient * conormal, axis=1, keepdims=True) * conormal
        vel = np.exp(-2.0 * f.phi)[:, None] * (vel - push)
    return vel, normal, h


def _implicit_filter(vel, h, dt):
    n = len(vel)
    mu = (2.0 * np.cos(2.0 * np.pi * np.arange(n) / n) - 2.0) / (h * h)
    return np.real(np.fft.ifft(np.fft.fft(dt * vel, axis=0) / (1.0 - dt * mu)[:, None], axis=0))


def _raw_step(X, surface, dt):
    vel, normal, h = _velocity(X, surface)
    delta = _implicit_filter(vel, h, dt)
    delta -= normal * np.sum(delta * normal, axis=1, keepdims=True)
    return project_to_surface(surface.root, X + delta), float(np.max(np.linalg.norm(delta, axis=1)))


def _embed_tol(lengths):
    return min(1e-8, 1e-3 * float(np.mean(lengths)))


def _advance(curve, surface, dt, old_length):
    """One accepted step; halves dt internally until length does not grow."""
    trial = dt
    for _ in range(40):
        X, _ = _raw_step(curve.vertices, surface, trial)
        new = DiscreteCurve(X, surface)
        lengths = segment_lengths(new)
        if lengths.sum() <= old_length + LENGTH_SLACK:
            break
        trial *= 0.5
    else:
        raise StepSizeError("could not find a length-decreasing step")
    if not is_embedded(new, tol=_embed_tol(lengths)):
        raise EmbeddednessLossError(f"self-intersection after step (dt={trial:.3g})")
    return new, lengths, trial


def _maintain(curve, lengths, initial_spacing, coarsen):
    """Coarsen a shrinking curve and resample if spacing has drifted."""
    old = float(lengths.sum())
    if coarsen and curve.n >= 2 * MIN_VERTICES and lengths.mean() < 0.5 * initial_spacing:
        cand = DiscreteCurve(curve.vertices[::2], curve.surface)
        cl = segment_lengths(cand)
        if cl.sum() <= old + LENGTH_SLACK and is_embedded(cand, tol=_embed_tol(cl)):
            curve, lengths, old = cand, cl, float(cl.sum())
    if lengths.max() > SPACING_RATIO_LIMIT * lengths.min():
        cand = resample(curve, curve.n)
        cl = segment_lengths(cand)
        if cl.sum() <= old + LENGTH_SLACK and is_embedded(cand, tol=_embed_tol(cl)):
            curve, lengths = cand, cl
    return curve, lengths


def _collapse(curve, surface):
    centre = project_to_surface(surface.root, curve.vertices.mean(axis=0))
    return DiscreteCurve.point_curve(centre, surface)


class _Integrator:
    """Mutable stepping loop shared by :func:`csf_step` and :func:`evolve`."""

    def __init__(self, state, surface, coarsen=True):
        self.surface = surface
        self.curve = state.curve.with_surface(surface)
        self.time = state.time
        self.steps = state.step_count
        self.lengths = list(state.length_history)
        self.kappas = list(state.curvature_history)
        self.status = state.status
        self.seg = segment_lengths(self.curve)
        self.spacing0 = state.initial_spacing or float(np.mean(self.seg))
        self.coarsen = coarsen

    def bound(self):
        return STABILITY_FACTOR * float(np.min(self.seg)) ** 2

    def step(self, dt=None):
        if self.status != RUNNING:
            return
        bound = self.bound()
        if dt is None:
            dt = DEFAULT_DT_FACTOR / STABILITY_FACTOR * bound
        elif dt > bound * (1 + 1e-12):
            raise StepSizeError(f"dt={dt:.3g} exceeds stability bound {bound:.3g}")
        old = self.lengths[-1][1]
        curve, lengths, used = _advance(self.curve, self.surface, dt, old)
        curve, lengths = _maintain(curve, lengths, self.spacing0, self.coarsen)
        self.time += used
        self.steps += 1
        total = float(lengths.sum())
        if total < POINT_LENGTH:
            self.curve = _collapse(curve, self.surface)
            self.lengths.append((self.time, 0.0))
            self.kappas.append((self.time, np.nan))
            self.status = CONVERGED_POINT
            return
        self.curve = curve
        self.seg = lengths
        kmax = float(np.max(np.abs(geodesic_curvature(curve, self.surface))))
        self.lengths.append((self.time, total))
        self.kappas.append((self.time, kmax))
        if kmax < CURVATURE_TOL and len(self.lengths) > PLATEAU_STEPS:
            if self.lengths[-PLATEAU_STEPS - 1][1] - total < PLATEAU_TOL:
                self.status = CONVERGED_GEODESIC

    def state(self):
        return FlowState(
            self.curve,
            self.time,
            self.steps,
            tuple(self.lengths),
            tuple(self.kappas),
            self.status,
            self.spacing0,
        )


def csf_step(s, surface, dt):
    """Advance a running flow state by one semi-implicit step of size ``dt``.

    Raises
    ------
    StepSizeError
        If ``dt`` exceeds ``0.4 · (min spacing)²``.
    EmbeddednessLossError
        If the stepped curve self-intersects.
    """
    if s.status != RUNNING:
        return s
    it = _Integrator(s, surface)
    it.step(dt)
    return it.state()


def evolve(c, surface=None, budget=None):
    """Flow a curve until it converges to a geodesic or a point, or the budget runs out.

    Parameters
    ----------
    c : DiscreteCurve or FlowState
        Embedded starting curve (or a state to continue).
    surface : MetricSurface, optional
    budget : FlowBudget or int, optional
        An integer is read as a step limit.

    Returns
    -------
    FlowState
    """
    if budget is None:
        budget = FlowBudget()
    elif isinstance(budget, (int, np.integer)):
        budget = FlowBudget(max_steps=int(budget))
    if isinstance(c, FlowState):
        surface = surface if surface is not None else c.curve.surface
        state = c
    else:
        surface = surface if surface is not None else c.surface
        c = c.with_surface(surface)
        if not c.is_point and not is_embedded(c):
            raise EmbeddednessLossError("starting curve is not embedded")
        state = FlowState.start(c, surface)
    it = _Integrator(state, surface, coarsen=budget.coarsen)
    taken = 0
    while it.status == RUNNING:
        if taken >= budget.max_steps:
            it.status = STEP_LIMIT
            break
        remaining = budget.t_max - it.time
        if remaining <= 0:
            break
        dt = budget.dt
        if dt is None:
            dt = DEFAULT_DT_FACTOR / STABILITY_FACTOR * it.bound()
        it.step(min(dt, remaining))
        taken += 1
    return it.state()


def flow_to_time(c, surface, t_target, max_steps=200_000):
    """Flow to ``t_target`` or to convergence, whichever comes first."""
    return evolve(c, surface, FlowBudget(max_steps=max_steps, t_max=t_target))


def tighten_family(family, surface, t_target, *, max_steps=200_000, workers=None):
    """Pull a sweepout family tight by flowing every member to a common time.

    Point curves stay fixed.  Members are independent, so ``workers > 1``
    spreads them over threads without changing any result.

    Raises
    ------
    FamilyFlowError
        Carrying the index of the first member that lost embeddedness.
    """

    def run(item):
        idx, curve = item
        try:
            return flow_to_time(curve, surface, t_target, max_steps)
        except EmbeddednessLossError as exc:
            raise FamilyFlowError(idx, exc) from exc

    items = list(enumerate(family))
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, items))
    return [run(item) for item in items]


def family_sup_length(states):
    return max(s.length for s in states)


def write_trace_csv(path, state):
    """Write ``time,length,max_curvature`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "length", "max_curvature"])
        for t, l, k in state.trace():
            w.writerow([f"{t:.17g}", f"{l:.17g}", f"{k:.17g}"])


def restart(state):
    """Reset a terminal state to running so that it can be flowed further."""
    return replace(state, status=RUNNING)
