"""Simple closed geodesics on Riemannian 2-spheres.

Curve shortening flow pulls plane-section sweepouts tight; the limits are
classified by the spectrum of their Jacobi operator and checked against the
Morse inequalities.
"""

from .curve import DiscreteCurve, VarifoldSample, curve_from_function, length, resample, to_varifold
from .errors import *  # noqa: F401,F403
from .estimators import CurveShorteningFlow, JacobiSpectrumEstimator, WidthEstimator
from .fermi import (
    BumpFunction,
    FermiChart,
    build_chart,
    bump_surface,
    jacobian_bounds,
    make_bump,
    mean_convex_chart,
    squeeze_homotopy,
)
from .flow import FlowBudget, FlowState, csf_step, evolve, tighten_family
from .metrics import FBracket, f_distance, hausdorff_distance
from .minmax import Sweepout, WidthBudget, WidthEstimate, minmax_geodesic, plane_sweepout, width_estimate
from .report import GeodesicCatalog, MorseReport, PipelineConfig, catalog, check_inequalities, morse_counts, run_morse_pipeline
from .spectrum import JacobiSpectrum, build_local_minmax, l_star, stability_spectrum
from .surface import MetricSurface, principal_ellipses, project_to_surface, surface_distance

__version__ = "0.1.0"
