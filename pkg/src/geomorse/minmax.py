"""Plane-section sweepouts, width estimation by tightening, min-max geodesics.

Sections of a quadric by the planes ``{p : n·p = t·h(n)}`` (``h`` is the
support function, ``|t| <= 1``) are ellipses with analytic perimeters, and
``t = ±1`` gives point curves.  The three modes use nested lattices:

* mode 1: normal fixed to the longest axis;
* mode 2: normals ``cos θ e_long + sin θ e_mid`` for ``θ = π i / m``;
* mode 3: normals over the hemisphere around the longest axis,
  ``θ = π i / m`` for ``i <= m/2`` and azimuth ``2π j / m``.

Offsets are ``t = sin(π/2 · (2k/m - 1))`` in every mode.  Because each
lattice contains the previous one, the tightened widths satisfy
``ω₁ <= ω₂ <= ω₃`` exactly.

Tightening is exact branch-and-bound: members are flowed in decreasing
order of initial length, and the search stops once an initial length no
longer exceeds the best tightened length (flow never increases length).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .curve import DiscreteCurve, curve_from_function, resample, to_varifold
from .errors import EmbeddednessLossError, FamilyFlowError, UnresolvedLimitError, UnsupportedSurfaceError
from .flow import CONVERGED_GEODESIC, FlowBudget, FlowState, evolve
from .metrics import f_distance, hausdorff_distance
from .surface import ellipse_perimeter
from .spectrum import stability_spectrum


PRUNE_MARGIN = 1e-8


def sorted_axes(surface):
    """Unit coordinate axes ordered as (shortest, middle, longest); ties keep x, y, z order."""
    order = sorted(range(3), key=lambda i: (surface.semi_axes[i], i))
    eye = np.eye(3)
    return eye[order[0]], eye[order[1]], eye[order[2]]


def _offsets(m):
    k = np.arange(m + 1)
    t = np.sin(0.5 * np.pi * (2.0 * k / m - 1.0))
    t[0], t[-1] = -1.0, 1.0
    if m % 2 == 0:
        t[m // 2] = 0.0
    return t


def _slice_frames(surface, normals, offsets):
    """Centre and conjugate semi-diameters of plane sections of the quadric."""
    D = np.asarray(surface.root.semi_axes)
    n = np.asarray(normals, dtype=float)
    m = n * D
    mn = np.linalg.norm(m, axis=1)
    mhat = m / mn[:, None]
    # orthonormal basis of the plane ⟂ mhat
    helper = np.where(np.abs(mhat[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    u = np.cross(mhat, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = np.cross(mhat, u)
    t = np.asarray(offsets, dtype=float)
    rho = np.sqrt(np.clip(1.0 - t * t, 0.0, None))
    centre = D * (t[:, None] * mhat)
    U = rho[:, None] * D * u
    V = rho[:, None] * D * w
    return centre, U, V


def slice_perimeters(surface, normals, offsets):
    """Analytic perimeters of plane sections."""
    _, U, V = _slice_frames(surface, normals, offsets)
    M = np.stack([U, V], axis=-1)
    sv = np.linalg.svd(M, compute_uv=False)
    return ellipse_perimeter(sv[:, 0], sv[:, 1])


@dataclass(frozen=True)
class Sweepout:
    """A lattice family of curves (plane sections) or an explicit list.

    Members are generated on demand; ``params[i]`` holds the lattice
    coordinates of member ``i``.
    """

    surface: object
    mode: int
    params: np.ndarray = field(repr=False)
    normals: np.ndarray | None = field(default=None, repr=False)
    offsets: np.ndarray | None = field(default=None, repr=False)
    lattice_shape: tuple = ()
    n: int = 128
    curves: tuple | None = field(default=None, repr=False)
    generator: str = "planes"

    @classmethod
    def from_curves(cls, curves, surface):
        curves = tuple(c.with_surface(surface) for c in curves)
        return cls(
            surface,
            0,
            np.arange(len(curves), dtype=float)[:, None],
            lattice_shape=(len(curves),),
            n=curves[0].n if curves else 0,
            curves=curves,
            generator="explicit",
        )

    def __len__(self):
        return len(self.params)

    def initial_lengths(self):
        if self.curves is not None:
            return np.array([c.length() for c in self.curves])
        return slice_perimeters(self.surface, self.normals, self.offsets)

    def is_boundary(self, i):
        if self.curves is not None:
            return self.curves[i].is_point
        return abs(self.offsets[i]) == 1.0

    def member(self, i):
        if self.curves is not None:
            return self.curves[i]
        c, U, V = _slice_frames(self.surface, self.normals[i : i + 1], self.offsets[i : i + 1])
        c, U, V = c[0], U[0], V[0]
        if self.is_boundary(i):
            return DiscreteCurve.point_curve(c, self.surface)

        def fun(s):
            return c + np.outer(np.cos(s), U) + np.outer(np.sin(s), V)

        return curve_from_function(fun, self.n, self.surface)

    def neighbour_hausdorff(self, indices=None):
        """Largest Hausdorff distance between lattice neighbours along the last axis."""
        shape = self.lattice_shape
        idx = np.arange(len(self)).reshape(shape)
        pairs = np.stack([idx[..., :-1].ravel(), idx[..., 1:].ravel()], axis=1)
        if indices is not None:
            pairs = pairs[np.isin(pairs[:, 0], indices)]
        worst = 0.0
        for i, j in pairs:
            worst = max(worst, hausdorff_distance(self.member(int(i)), self.member(int(j)), self.surface))
        return worst

    def plane_key(self, i):
        """Hashable identity of member ``i``; equal keys give identical curves."""
        if self.curves is not None:
            return ("curve", i)
        return (self.normals[i].tobytes(), self.offsets[i].tobytes(), self.n)

    def describe(self):
        return {"generator": self.generator, "mode": self.mode, "lattice": list(self.lattice_shape), "n": self.n}


def plane_sweepout(surface, mode, lattice=16, n=128):
    """Plane-section sweepout of mode 1, 2 or 3 with ``lattice`` steps per axis.

    Lattice neighbours stay within Hausdorff distance 0.1 from ``lattice = 64``
    on; smaller lattices are cheaper but coarser.

    Raises
    ------
    UnsupportedSurfaceError
        For conformally perturbed surfaces.
    """
    if surface.overlay is not None or surface.kind not in ("round", "ellipsoid"):
        raise UnsupportedSurfaceError("plane sweepouts need a round sphere or an ellipsoid")
    if mode not in (1, 2, 3):
        raise ValueError("mode must be 1, 2 or 3")
    m = int(lattice)
    if m < 2 or m % 4:
        raise ValueError("lattice must be a positive multiple of 4")
    e_s, e_m, e_l = sorted_axes(surface)
    t = _offsets(m)
    th2 = np.pi * np.arange(m) / m
    dirs2 = np.cos(th2)[:, None] * e_l + np.sin(th2)[:, None] * e_m
    if mode == 1:
        dirs = dirs2[:1]
        dparams = np.zeros((1, 0))
        shape = (m + 1,)
    elif mode == 2:
        dirs = dirs2
        dparams = th2[:, None]
        shape = (m, m + 1)
    else:
        # rows in the (e_long, e_mid) plane are copied from mode 2 so the
        # shared planes are bitwise identical members
        th = th2[: m // 2 + 1]
        ph = 2 * np.pi * np.arange(m) / m
        TH, PH = np.meshgrid(th, ph, indexing="ij")
        dirs = (
            np.cos(TH)[..., None] * e_l
            + (np.sin(TH) * np.cos(PH))[..., None] * e_m
            + (np.sin(TH) * np.sin(PH))[..., None] * e_s
        )
        dirs[:, 0] = dirs2[: m // 2 + 1]
        flip = np.zeros(TH.shape, bool)
        dirs[1:, m // 2] = dirs2[m - np.arange(1, m // 2 + 1)]
        dirs[0, m // 2] = dirs2[0]
        flip[1:, m // 2] = True
        dirs = dirs.reshape(-1, 3)
        dparams = np.c_[TH.ravel(), PH.ravel()]
        shape = (m // 2 + 1, m, m + 1)
        normals = np.repeat(dirs, len(t), axis=0)
        offsets = np.tile(t, len(dirs))
        # nominal hemisphere offset is -t where the copied normal points the other way
        nominal = np.where(np.repeat(flip.ravel(), len(t)), -offsets, offsets)
        params = np.hstack([np.repeat(dparams, len(t), axis=0), nominal[:, None]])
        return Sweepout(surface, mode, params, normals, offsets, shape, int(n))
    normals = np.repeat(dirs, len(t), axis=0)
    offsets = np.tile(t, len(dirs))
    params = np.hstack([np.repeat(dparams, len(t), axis=0), offsets[:, None]])
    return Sweepout(surface, mode, params, normals, offsets, shape, int(n))


def _refined_sweepout(sw, centre_index, factor=4):
    """Finer mode-3 lattice around one member (one coarse cell each way)."""
    e_s, e_m, e_l = sorted_axes(sw.surface)
    m = sw.lattice_shape[1]
    th0, ph0, t0 = sw.params[centre_index]
    k0 = np.arcsin(np.clip(t0, -1, 1)) * 2 / np.pi  # offset angle in [-1, 1]
    d_th = np.pi / m
    d_ph = 2 * np.pi / m
    d_k = 2.0 / m
    steps = np.arange(-factor, factor + 1) / factor
    th = np.clip(th0 + d_th * steps, 0.0, np.pi / 2)
    ph = ph0 + d_ph * steps
    kk = np.clip(k0 + d_k * steps, -1.0, 1.0)
    TH, PH, KK = np.meshgrid(th, ph, kk, indexing="ij")
    TH, PH, KK = TH.ravel(), PH.ravel(), KK.ravel()
    normals = (
        np.cos(TH)[:, None] * e_l + (np.sin(TH) * np.cos(PH))[:, None] * e_m + (np.sin(TH) * np.sin(PH))[:, None] * e_s
    )
    offsets = np.sin(0.5 * np.pi * KK)
    offsets[np.abs(KK) == 1.0] = np.sign(KK[np.abs(KK) == 1.0])
    params = np.c_[TH, PH, offsets]
    # clipping at the hemisphere edge and the offset ends repeats lattice points
    _, keep = np.unique(np.round(params, 12), axis=0, return_index=True)
    keep = np.sort(keep)
    params, normals, offsets = params[keep], normals[keep], offsets[keep]
    return Sweepout(sw.surface, 3, params, normals, offsets, (len(params),), sw.n, generator="planes-refined")


@dataclass(frozen=True)
class WidthBudget:
    """Controls for :func:`width_estimate`.

    ``t_target`` is the common tightening time; ``a`` the near-maximality
    window for the concentration check (defaults to 1e-4 of the value;
    the F-radius ``s`` of near-maximal slices grows like ``sqrt(a)``).
    """

    t_target: float = 0.5
    checkpoints: int = 5
    max_steps: int = 200_000
    a: float | None = None
    max_concentration: int = 24
    refine: bool = True
    polish_steps: int = 200_000


@dataclass(frozen=True)
class WidthEstimate:
    """Tightened-family width of one sweepout."""

    value: float
    parameter: tuple
    member_index: int
    time: float
    limit_curve: DiscreteCurve | None = field(repr=False)
    limit_status: str
    history: tuple
    concentration: tuple
    flowed: int
    members: int
    mode: int
    discretization_gap: float = 0.0
    certified: bool = True

    @property
    def resolved(self):
        return self.limit_status == CONVERGED_GEODESIC

    def to_dict(self):
        return {
            "value": self.value,
            "label": "tightened family width",
            "parameter": [float(p) for p in self.parameter],
            "member_index": self.member_index,
            "time": self.time,
            "limit_status": self.limit_status,
            "history": [[float(t), float(l)] for t, l in self.history],
            "concentration": {"a": self.concentration[0], "s": self.concentration[1], "checked": self.concentration[2]},
            "flowed": self.flowed,
            "members": self.members,
            "mode": self.mode,
            "discretization_gap": self.discretization_gap,
            "certified": self.certified,
        }


def _flow_checkpoints(curve, surface, times, max_steps):
    """Flow to each checkpoint time; returns the initial length, the lengths at
    the checkpoints and the final state."""
    state = FlowState.start(curve, surface)
    lengths = [state.length]
    for t in times:
        if state.status == "running" and t > state.time:
            state = evolve(state, surface, FlowBudget(max_steps=max_steps, t_max=t))
        lengths.append(state.length)
    return lengths, state


def _branch_and_bound(sw, surface, times, max_steps, cache, best=None, offset=0):
    """Exact search for the member with the largest tightened length.

    A member is skipped when its analytic perimeter plus ``PRUNE_MARGIN``
    (relative) cannot beat the best tightened length: flow does not increase
    length, and the discrete initial length stays within that margin of the
    analytic perimeter (checked on every flowed member).
    """
    L0 = sw.initial_lengths()
    order = np.argsort(-L0, kind="stable")
    margin = PRUNE_MARGIN * float(np.max(L0)) if len(L0) else 0.0
    best_val, best_idx, best_state = (-np.inf, None, None) if best is None else best
    results = {}
    for idx in order:
        if L0[idx] + margin <= best_val:
            break
        gidx = int(idx) + offset
        key = sw.plane_key(int(idx))
        if key not in cache:
            try:
                cache[key] = _flow_checkpoints(sw.member(int(idx)), surface, times, max_steps)
            except EmbeddednessLossError as exc:
                raise FamilyFlowError(gidx, exc) from exc
        lengths, state = cache[key]
        results[gidx] = (lengths, state, abs(lengths[0] - L0[idx]))
        final = lengths[-1]
        if final > best_val or (final == best_val and best_idx is not None and gidx < best_idx):
            best_val, best_idx, best_state = final, gidx, state
    return (best_val, best_idx, best_state), results, L0


def width_estimate(sw, surface=None, budget=None):
    """Tighten a sweepout and report the sup-length plateau.

    Parameters
    ----------
    sw : Sweepout
    surface : MetricSurface, optional
    budget : WidthBudget, optional

    Raises
    ------
    FamilyFlowError
        With the index of the member whose flow failed.
    """
    surface = surface if surface is not None else sw.surface
    budget = budget or WidthBudget()
    times = np.linspace(0.0, budget.t_target, budget.checkpoints + 1)[1:]
    cache = {}
    best, results, L0 = _branch_and_bound(sw, surface, times, budget.max_steps, cache)
    sweeps = [(sw, 0, L0)]
    if sw.mode == 3 and budget.refine and sw.generator == "planes" and best[1] is not None:
        fine = _refined_sweepout(sw, best[1])
        best2, res2, L0f = _branch_and_bound(
            fine, surface, times, budget.max_steps, cache, best=best, offset=len(sw)
        )
        best = best2
        results.update(res2)
        sweeps.append((fine, len(sw), L0f))
    value, idx, state = best
    history = [(0.0, float(max(np.max(l0) for _, _, l0 in sweeps)))]
    for k, t in enumerate(times):
        history.append((float(t), float(max(r[0][k + 1] for r in results.values()))))
    gap = max(r[2] for r in results.values())

    def member(i):
        for s, off, _ in sweeps:
            if off <= i < off + len(s):
                return s, i - off
        raise IndexError(i)

    owner, local = member(idx)
    parameter = tuple(float(p) for p in owner.params[local])
    limit = evolve(state, surface, FlowBudget(max_steps=budget.polish_steps))
    limit_curve = limit.curve if limit.status == CONVERGED_GEODESIC else None

    # near-maximal slices must sit close to a limit geodesic: either the
    # achieving one or their own limit when they already converged
    a = budget.a if budget.a is not None else 1e-4 * value
    s_val, checked = 0.0, 0
    if limit_curve is not None:
        cands = []
        for s, off, l0 in sweeps:
            for i in np.nonzero(l0 >= value - a)[0]:
                cands.append((-l0[i], off + int(i)))
        cands.sort()
        for _, gi in cands[: budget.max_concentration]:
            s_, li = member(gi)
            key = s_.plane_key(li)
            if key not in cache:
                cache[key] = _flow_checkpoints(s_.member(li), surface, times, budget.max_steps)
            lengths, st = cache[key]
            if lengths[-1] >= value - a and not st.curve.is_point:
                checked += 1
                if st.status == CONVERGED_GEODESIC:
                    continue  # the slice has itself become a limit geodesic
                s_val = max(s_val, f_distance(st.curve, limit_curve, surface).upper)
    return WidthEstimate(
        float(value),
        parameter,
        int(idx),
        float(budget.t_target),
        limit_curve,
        limit.status,
        tuple(history),
        (float(a), float(s_val), checked),
        len(cache),
        int(sum(len(s) for s, _, _ in sweeps)),
        sw.mode,
        float(gap),
        bool(gap <= PRUNE_MARGIN * max(float(np.max(l0)) for _, _, l0 in sweeps)),
    )


def minmax_geodesic(sw, surface=None, budget=None, n_spectrum=512, num_eigs=8, estimate=None):
    """Limit geodesic of a tightened sweepout together with its Jacobi spectrum.

    The limit is refined to ``n_spectrum`` vertices and re-flowed to a
    discrete geodesic at that resolution before the spectrum is taken.

    Raises
    ------
    UnresolvedLimitError
        If the achieving slice does not converge to a geodesic.
    """
    surface = surface if surface is not None else sw.surface
    est = estimate if estimate is not None else width_estimate(sw, surface, budget)
    if not est.resolved:
        raise UnresolvedLimitError(f"mode {sw.mode} limit ended as {est.limit_status}")
    curve = est.limit_curve
    if curve.n != n_spectrum:
        curve = resample(curve, n_spectrum)
        polished = evolve(curve, surface, FlowBudget(max_steps=(budget or WidthBudget()).polish_steps))
        if polished.status != CONVERGED_GEODESIC:
            raise UnresolvedLimitError(f"refined limit ended as {polished.status}")
        curve = polished.curve
    mass = to_varifold(curve).mass
    if abs(mass - curve.length()) > 1e-9 * curve.length():
        raise UnresolvedLimitError("limit varifold does not have multiplicity one")
    spec = stability_spectrum(curve, surface, m=num_eigs)
    return curve, spec, est


def write_width_json(path, est):
    with open(path, "w") as fh:
        json.dump(est.to_dict(), fh, sort_keys=True, indent=1)


__all__ = [
    "Sweepout",
    "WidthBudget",
    "WidthEstimate",
    "minmax_geodesic",
    "plane_sweepout",
    "slice_perimeters",
    "sorted_axes",
    "width_estimate",
    "write_width_json",
]
