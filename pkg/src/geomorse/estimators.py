"""scikit-learn style wrappers around the functional API.

Inputs are lists of :class:`~geomorse.curve.DiscreteCurve`, not feature
matrices, so these estimators follow the fit/transform/predict protocol and
parameter handling of scikit-learn without its array validation.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .flow import FlowBudget, evolve
from .minmax import WidthBudget, minmax_geodesic, plane_sweepout, width_estimate
from .spectrum import stability_spectrum


def _curves(X):
    from .curve import DiscreteCurve

    if isinstance(X, DiscreteCurve):
        return [X]
    return list(X)


class CurveShorteningFlow(TransformerMixin, BaseEstimator):
    """Flow each curve for time ``t_max`` (or to convergence).

    ``transform`` returns the flowed curves; the final flow states are kept
    in ``states_``.
    """

    def __init__(self, surface=None, t_max=np.inf, max_steps=200_000, dt=None):
        self.surface = surface
        self.t_max = t_max
        self.max_steps = max_steps
        self.dt = dt

    def fit(self, X=None, y=None):
        self.budget_ = FlowBudget(max_steps=self.max_steps, t_max=self.t_max, dt=self.dt)
        return self

    def transform(self, X):
        check_is_fitted(self, "budget_")
        self.states_ = [evolve(c, self.surface, self.budget_) for c in _curves(X)]
        return [s.curve for s in self.states_]


class JacobiSpectrumEstimator(BaseEstimator):
    """Stability spectra of closed geodesics; ``predict`` returns Morse indices."""

    def __init__(self, surface=None, num_eigs=8, tol=None):
        self.surface = surface
        self.num_eigs = num_eigs
        self.tol = tol

    def _spectra(self, X):
        return [stability_spectrum(c, self.surface, m=self.num_eigs, tol=self.tol) for c in _curves(X)]

    def fit(self, X, y=None):
        self.spectra_ = self._spectra(X)
        self.eigenvalues_ = np.array([s.eigenvalues for s in self.spectra_])
        self.index_ = np.array([s.index for s in self.spectra_])
        self.nullity_ = np.array([s.nullity for s in self.spectra_])
        return self

    def predict(self, X):
        check_is_fitted(self, "spectra_")
        return np.array([s.index for s in self._spectra(X)])


class WidthEstimator(BaseEstimator):
    """Width of a plane-section sweepout; ``fit`` ignores ``X``."""

    def __init__(self, surface=None, mode=1, lattice=16, n=128, t_target=0.5, spectrum=True):
        self.surface = surface
        self.mode = mode
        self.lattice = lattice
        self.n = n
        self.t_target = t_target
        self.spectrum = spectrum

    def fit(self, X=None, y=None):
        sw = plane_sweepout(self.surface, self.mode, self.lattice, self.n)
        budget = WidthBudget(t_target=self.t_target)
        self.estimate_ = width_estimate(sw, self.surface, budget)
        self.width_ = self.estimate_.value
        self.limit_curve_ = self.estimate_.limit_curve
        if self.spectrum and self.estimate_.resolved:
            self.limit_curve_, self.spectrum_, _ = minmax_geodesic(
                sw, self.surface, budget, n_spectrum=self.n, estimate=self.estimate_
            )
            self.index_ = self.spectrum_.index
        return self

    def predict(self, X=None):
        check_is_fitted(self, "width_")
        return self.width_


__all__ = ["CurveShorteningFlow", "JacobiSpectrumEstimator", "WidthEstimator"]
