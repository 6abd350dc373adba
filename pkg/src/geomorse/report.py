"""Geodesic catalog, Morse counts, Morse inequalities and the full pipeline.

The point curves count as one critical "geodesic" of length 0 and index 0.
Betti numbers of the sublevel sets of the curve space are inputs; the
default ``(1, 1, 1, 1)`` is the large-cutoff value for the sphere.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .curve import DiscreteCurve, geodesic_curvature, resample, write_curve_csv
from .errors import ConstraintViolationError, GeomorseError, StageError
from .flow import CONVERGED_GEODESIC, CONVERGED_POINT, FlowBudget, FlowState, evolve
from .metrics import f_distance
from .minmax import WidthBudget, minmax_geodesic, plane_sweepout, width_estimate
from .spectrum import stability_spectrum
from .surface import MetricSurface, project_to_surface

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1e-2
DEFAULT_BETTI = (1, 1, 1, 1)
GEODESIC_TOL = 1e-6
COMPARE_N = 256
TRIVIAL_CLASS = "trivial"

MODE_DETECTION_ASSUMPTION = (
    "plane-section families of modes 1-3 are taken to detect the k-th cohomology "
    "class by construction from their topology; this is not computed"
)


@dataclass(frozen=True)
class CatalogEntry:
    curve: DiscreteCurve = field(repr=False)
    length: float
    index: int
    nullity: int
    provenance: str

    @property
    def is_point(self):
        return self.curve.is_point


@dataclass(frozen=True)
class GeodesicCatalog:
    """Distinct closed geodesics below a length cutoff, sorted by length.

    ``entries[0]`` is always the point-curve entry.
    """

    entries: tuple
    cutoff: float
    threshold: float
    surface: object = field(repr=False, default=None)
    homotopy_class: str = TRIVIAL_CLASS

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def geodesics(self):
        return [e for e in self.entries if not e.is_point]

    def to_rows(self):
        return [
            {"length": e.length, "index": e.index, "nullity": e.nullity, "provenance": e.provenance}
            for e in self.entries
        ]


def _point_entry(surface):
    p = project_to_surface(surface.root, np.array([0.0, 0.0, surface.root.semi_axes[2]]))
    return CatalogEntry(DiscreteCurve.point_curve(p, surface), 0.0, 0, 0, "point curves")


def _as_run(run, i):
    if isinstance(run, CatalogEntry):
        return run.curve, run.index, run.nullity, run.provenance
    curve, spec = run[0], run[1]
    provenance = run[2] if len(run) > 2 else f"run {i}"
    if isinstance(curve, FlowState):
        if curve.status == CONVERGED_POINT:
            return curve.curve, 0, 0, provenance
        if curve.status != CONVERGED_GEODESIC:
            raise ConstraintViolationError(f"run {i} did not converge (status {curve.status})")
        curve = curve.curve
    if curve.is_point:
        return curve, 0, 0, provenance
    if spec is None:
        raise ConstraintViolationError(f"run {i} has no spectrum")
    return curve, spec.index, spec.nullity, provenance


def _comparable(curve):
    if curve.is_point or curve.n == COMPARE_N:
        return curve
    return resample(curve, COMPARE_N)


def catalog(surface, runs, a=np.inf, threshold=DEFAULT_THRESHOLD):
    """Deduplicate converged geodesics into a catalog.

    Parameters
    ----------
    surface : MetricSurface
    runs : iterable
        ``(curve, spectrum)`` or ``(curve, spectrum, provenance)`` tuples,
        where ``curve`` is a DiscreteCurve or a FlowState; a GeodesicCatalog
        is accepted too (re-cataloging is idempotent).
    a : float
        Length cutoff; entries must be strictly shorter.
    threshold : float
        Two geodesics closer than this in F-upper distance are duplicates;
        the shorter one is kept.

    Raises
    ------
    ConstraintViolationError
        Naming the index of a run that is not a converged geodesic.
    """
    if isinstance(runs, GeodesicCatalog):
        runs = runs.entries
    items = []
    for i, run in enumerate(runs):
        curve, index, nullity, provenance = _as_run(run, i)
        if curve.is_point:
            continue
        kmax = float(np.max(np.abs(geodesic_curvature(curve, surface))))
        if kmax > GEODESIC_TOL:
            raise ConstraintViolationError(f"run {i} is not a geodesic (max curvature {kmax:.2e})")
        L = float(curve.length())
        if L < a:
            items.append((L, i, curve, index, nullity, provenance))
    items.sort(key=lambda t: (t[0], t[1]))
    kept = []
    for L, _, curve, index, nullity, provenance in items:
        probe = _comparable(curve)
        if all(f_distance(probe, _comparable(e.curve), surface).upper >= threshold for e in kept):
            kept.append(CatalogEntry(curve, L, int(index), int(nullity), provenance))
    entries = (_point_entry(surface),) + tuple(kept)
    return GeodesicCatalog(entries, float(a), float(threshold), surface)


def morse_counts(cat, kmax=3):
    """Number of catalogued geodesics of each index ``0..kmax`` (higher ones included if present)."""
    counts = {k: 0 for k in range(kmax + 1)}
    for e in cat.entries:
        counts[e.index] = counts.get(e.index, 0) + 1
    return counts


def _alternating(values, r):
    return sum((-1) ** (r - j) * values[j] for j in range(r + 1))


@dataclass(frozen=True)
class MorseReport:
    """Morse counts against reference Betti numbers.

    Verdicts are properties computed from ``counts`` and ``betti`` on demand.
    """

    counts: tuple
    betti: tuple
    cutoff: float = np.inf
    warnings: tuple = ()
    assumptions: tuple = ()
    details: dict = field(default_factory=dict, repr=False)

    @property
    def ranks(self):
        return range(len(self.betti))

    def _c(self, k):
        return self.counts[k] if k < len(self.counts) else 0

    def weak(self, r):
        return self._c(r) >= self.betti[r]

    def strong(self, r):
        c = [self._c(k) for k in range(r + 1)]
        return _alternating(c, r) >= _alternating(self.betti, r)

    @property
    def weak_verdicts(self):
        return [self.weak(r) for r in self.ranks]

    @property
    def strong_verdicts(self):
        return [self.strong(r) for r in self.ranks]

    @property
    def all_pass(self):
        return all(self.weak_verdicts) and all(self.strong_verdicts)

    @property
    def equality(self):
        return all(self._c(r) == self.betti[r] for r in self.ranks)

    @property
    def missing_indices(self):
        """Indices whose weak inequality fails: the search missed a geodesic there."""
        return [r for r in self.ranks if not self.weak(r)]

    def to_dict(self):
        out = {
            "counts": {str(k): int(self._c(k)) for k in range(max(len(self.counts), len(self.betti)))},
            "betti": [int(b) for b in self.betti],
            "cutoff": None if not np.isfinite(self.cutoff) else float(self.cutoff),
            "weak": [bool(v) for v in self.weak_verdicts],
            "strong": [bool(v) for v in self.strong_verdicts],
            "all_pass": bool(self.all_pass),
            "equality": bool(self.equality),
            "missing_indices": self.missing_indices,
            "warnings": list(self.warnings),
            "assumptions": list(self.assumptions),
        }
        out.update(self.details)
        return out


def check_inequalities(counts, betti=DEFAULT_BETTI, cutoff=np.inf, warnings=(), assumptions=(), details=None):
    """Evaluate weak (``c_r >= b_r``) and strong (alternating-sum) Morse inequalities.

    ``counts`` may be a mapping ``k -> c_k`` or a sequence.
    """
    if isinstance(counts, dict):
        top = max(list(counts) + [len(betti) - 1])
        counts = tuple(int(counts.get(k, 0)) for k in range(top + 1))
    rep = MorseReport(tuple(int(c) for c in counts), tuple(int(b) for b in betti), cutoff, tuple(warnings),
                      tuple(assumptions), dict(details or {}))
    for r in rep.missing_indices:
        log.warning("weak Morse inequality fails at r=%d: missing index-%d geodesic (search incomplete)", r, r)
    return rep


@dataclass(frozen=True)
class PipelineConfig:
    """Configuration of :func:`run_morse_pipeline` (JSON keys match the field names)."""

    surface: dict = field(default_factory=lambda: {"kind": "ellipsoid", "semi_axes": [1.0, 1.1, 1.2]})
    lattice: tuple = (64, 64, 64)
    n: int = 512
    t_target: float = 0.5
    max_steps: int = 200_000
    refine: bool = True
    seeds: int = 50
    seed: int = 0
    seed_n: int = 32
    seed_radius: tuple = (0.05, 0.3)
    betti: tuple = DEFAULT_BETTI
    cutoff: float | None = None
    threshold: float = DEFAULT_THRESHOLD
    num_eigs: int = 8

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("lattice", "seed_radius", "betti"):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("lattice"), tuple) and len(d["lattice"]) == 1:
            d["lattice"] = d["lattice"] * 3
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in ((f, getattr(self, f)) for f in self.__dataclass_fields__)
        }


def random_seed_loops(surface, count, seed=0, n=32, radius=(0.05, 0.3)):
    """Small embedded loops around random surface points (reproducible)."""
    rng = np.random.default_rng(seed)
    root = surface.root
    loops = []
    for _ in range(count):
        d = rng.normal(size=3)
        p = project_to_surface(root, d / np.linalg.norm(d) * root.semi_axes)
        nrm = root.normal(p[None])[0]
        u = np.cross(nrm, [1.0, 0, 0] if abs(nrm[0]) < 0.9 else [0, 1.0, 0])
        u /= np.linalg.norm(u)
        w = np.cross(nrm, u)
        r = rng.uniform(*radius)
        s = np.linspace(0, 2 * np.pi, n, endpoint=False)
        pts = p + r * (np.outer(np.cos(s), u) + np.outer(np.sin(s), w))
        loops.append(DiscreteCurve(project_to_surface(root, pts), surface))
    return loops


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except GeomorseError as exc:
        raise StageError(name, exc) from exc
    except (ValueError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc


def run_morse_pipeline(config=None, out_dir=None):
    """Sweepouts of modes 1-3, random flow seeds, spectra, catalog and report.

    Parameters
    ----------
    config : PipelineConfig or dict, optional
    out_dir : path, optional
        When given, writes ``report.json``, ``catalog.csv``, one
        ``geodesic_<k>.csv`` per geodesic and ``width_mode<k>.json`` traces.

    Returns
    -------
    (MorseReport, dict)
        The report and a mapping of artifact names to in-memory objects.

    Raises
    ------
    StageError
        Tagged with the name of the failing stage.
    """
    if config is None:
        config = PipelineConfig()
    elif isinstance(config, dict):
        config = PipelineConfig.from_dict(config)
    surface = _stage("surface", MetricSurface.from_dict, config.surface)
    budget = WidthBudget(t_target=config.t_target, max_steps=config.max_steps, refine=config.refine)

    runs, widths = [], {}
    for mode, m in zip((1, 2, 3), config.lattice):
        sw = _stage("sweepout", plane_sweepout, surface, mode, m, config.n)
        est = _stage("width", width_estimate, sw, surface, budget)
        curve, spec, _ = _stage(
            "spectrum", minmax_geodesic, sw, surface, budget, n_spectrum=config.n, num_eigs=config.num_eigs,
            estimate=est,
        )
        widths[mode] = est
        runs.append((curve, spec, f"sweepout mode {mode}"))

    for i, loop in enumerate(random_seed_loops(surface, config.seeds, config.seed, config.seed_n, config.seed_radius)):
        state = _stage("seeds", evolve, loop, surface, FlowBudget(max_steps=config.max_steps))
        if state.status == CONVERGED_GEODESIC:
            spec = _stage("spectrum", stability_spectrum, state.curve, surface, config.num_eigs)
            runs.append((state.curve, spec, f"seed {i}"))
        elif state.status == CONVERGED_POINT:
            runs.append((state, None, f"seed {i}"))
        else:
            raise StageError("seeds", GeomorseError(f"seed {i} ended as {state.status}"))

    cutoff = np.inf if config.cutoff is None else float(config.cutoff)
    cat = _stage("catalog", catalog, surface, runs, cutoff, config.threshold)
    counts = morse_counts(cat)

    warnings, assumptions = [], [MODE_DETECTION_ASSUMPTION, "Betti numbers are inputs, not computed"]
    bumpy = all(e.nullity == 0 for e in cat.entries)
    if not bumpy:
        warnings.append("non-bumpy: some catalogued geodesics are degenerate (nullity > 0)")
    lengths = [e.length for e in cat.geodesics]
    details = {
        "surface": surface.to_dict(),
        "bumpy": bumpy,
        "homotopy_class": cat.homotopy_class,
        "geodesics": [
            {"length": e.length, "index": e.index, "nullity": e.nullity, "provenance": e.provenance}
            for e in cat.geodesics
        ],
        "lengths_increasing": bool(all(b > a for a, b in zip(lengths, lengths[1:]))),
        "widths": {str(k): {"value": w.value, "parameter": list(w.parameter)} for k, w in widths.items()},
        "width_ordering": bool(widths[1].value <= widths[2].value <= widths[3].value),
        "config": config.to_dict(),
    }
    report = check_inequalities(counts, config.betti, cutoff, warnings, assumptions, details)
    artifacts = {"report": report, "catalog": cat, "widths": widths}
    if out_dir is not None:
        _stage("write", write_artifacts, out_dir, report, cat, widths)
    return report, artifacts


def write_artifacts(out_dir, report, cat, widths):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    with open(os.path.join(out_dir, "catalog.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["length", "index", "nullity", "provenance"])
        for e in cat.entries:
            w.writerow([f"{e.length:.17g}", e.index, e.nullity, e.provenance])
    for k, e in enumerate(cat.geodesics, start=1):
        write_curve_csv(os.path.join(out_dir, f"geodesic_{k}.csv"), e.curve)
    for mode, est in widths.items():
        with open(os.path.join(out_dir, f"width_mode{mode}.json"), "w") as fh:
            json.dump(est.to_dict(), fh, sort_keys=True, indent=1)


__all__ = [
    "CatalogEntry",
    "GeodesicCatalog",
    "MorseReport",
    "PipelineConfig",
    "catalog",
    "check_inequalities",
    "morse_counts",
    "random_seed_loops",
    "run_morse_pipeline",
    "write_artifacts",
]
