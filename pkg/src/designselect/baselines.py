"""Comparison selectors: weighted split conformal and calibrated forecasts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.special import ndtr, ndtri

from .inference import MEAN, SuccessCriterion
from .selection import Backend, ConfigResult, SelectionReport, _check_alpha

QUADRATURE_POINTS = 512


@dataclass(frozen=True, eq=False)
class WeightedResidualSet:
    """Labeled residuals ``y_hat - y`` with their density ratios."""

    residuals: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.residuals, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if r.shape != w.shape:
            raise ValueError("residuals and weights must have equal length")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        order = np.argsort(r, kind="stable")
        object.__setattr__(self, "residuals", r[order])
        object.__setattr__(self, "weights", w[order])
        object.__setattr__(self, "_cum", np.cumsum(w[order]))

    @property
    def total_weight(self):
        return float(self._cum[-1]) if self._cum.size else 0.0

    def quantile_radius(self, design_weights, alpha):
        """(1 - alpha) quantile of the residual mixture with an atom at +inf.

        The atom carries each design point's own weight, so the radius is
        infinite whenever the finite residual mass falls short.
        """
        v = np.asarray(design_weights, dtype=float)
        target = (1 - alpha) * (self.total_weight + v)
        k = np.searchsorted(self._cum, target, side="left")
        radius = np.full(v.shape, np.inf)
        ok = (k < self.residuals.size) & (self.total_weight + v > 0)
        radius[ok] = self.residuals[k[ok]]
        return radius


def split_conformal_lb(design_pred: float, design_weight: float,
                       residuals: WeightedResidualSet, alpha: float) -> float:
    """Weighted split-conformal lower bound on one design's label; may be -inf."""
    _check_alpha(alpha)
    r = residuals.quantile_radius(np.array([design_weight]), alpha)[0]
    return float(design_pred - r)


def conformal_select(menu_ids, design_preds: Mapping, design_weights: Mapping,
                     residuals: Mapping, tau: float, alpha: float) -> SelectionReport:
    """Select configurations whose averaged per-design conformal bound reaches tau.

    Each of a configuration's N designs gets a bound at level
    ``alpha / (|menu| * N)``; a single infinite radius makes the average
    ``-inf``.
    """
    ids = list(menu_ids)
    per = {}
    for cid in ids:
        preds = np.asarray(design_preds[cid], dtype=float)
        level = alpha / (len(ids) * preds.size)
        radius = residuals[cid].quantile_radius(design_weights[cid], level)
        lb = float(np.mean(preds - radius))
        per[cid] = ConfigResult(None, theta_hat=float(np.mean(preds)), lower_bound=lb)
    selected = [cid for cid in ids if per[cid].lower_bound >= tau]
    return SelectionReport(per, selected, alpha, Backend.CONFORMAL, tau, len(ids))


@dataclass(frozen=True, eq=False)
class IsotonicCalibrator:
    """Nondecreasing piecewise-linear map of [0, 1] onto itself.

    Knots run from (0, 0) to (1, 1); the map is linear between knots.
    """

    knots_x: np.ndarray
    knots_y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.knots_x, dtype=float)
        y = np.asarray(self.knots_y, dtype=float)
        if x.shape != y.shape or x.size < 2:
            raise ValueError("calibrator needs matching knot arrays of length >= 2")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(y) < 0):
            raise ValueError("calibrator knots must be increasing in x, nondecreasing in y")
        if x[0] != 0 or x[-1] != 1 or y[0] != 0 or y[-1] != 1:
            raise ValueError("calibrator must map 0 to 0 and 1 to 1")
        object.__setattr__(self, "knots_x", x)
        object.__setattr__(self, "knots_y", y)

    @classmethod
    def identity(cls):
        return cls(np.array([0.0, 1.0]), np.array([0.0, 1.0]))

    def __call__(self, p):
        return np.interp(p, self.knots_x, self.knots_y)

    def inverse(self, u):
        """Generalized inverse ``inf{p : R(p) >= u}``."""
        u = np.asarray(u, dtype=float)
        x, y = self.knots_x, self.knots_y
        k = np.searchsorted(y, u, side="left")
        k = np.clip(k, 1, x.size - 1)
        y0, y1 = y[k - 1], y[k]
        frac = np.where(y1 > y0, (u - y0) / np.where(y1 > y0, y1 - y0, 1.0), 0.0)
        out = x[k - 1] + np.clip(frac, 0.0, 1.0) * (x[k] - x[k - 1])
        return np.where(u <= 0, 0.0, out)


def _pit(means, sds, y):
    means, sds, y = (np.asarray(a, dtype=float) for a in (means, sds, y))
    if np.any(~np.isfinite(sds)) or np.any(sds <= 0):
        raise ValueError("forecast standard deviations must be positive and finite")
    return ndtr((y - means) / sds)


def fit_calibrator(means, sds, y) -> IsotonicCalibrator:
    """Isotonic recalibration of Gaussian forecasts from their PIT values.

    Each PIT value ``p`` is paired with the fraction of PIT values at or
    below it, and an isotonic fit of those pairs gives the map.
    """
    p = _pit(means, sds, y)
    if p.size == 0:
        raise ValueError("fit_calibrator needs at least one labeled point")
    p = np.sort(p)
    freq = np.searchsorted(p, p, side="right") / p.size
    xs, idx = np.unique(p, return_index=True)
    fitted = isotonic_regression(freq[idx]).x
    inner = (xs > 0) & (xs < 1)
    knots_x = np.concatenate(([0.0], xs[inner], [1.0]))
    knots_y = np.concatenate(([0.0], np.clip(fitted[inner], 0.0, 1.0), [1.0]))
    return IsotonicCalibrator(knots_x, knots_y)


def calibrated_expectation(means, sds, calibrator: IsotonicCalibrator,
                           crit: SuccessCriterion, n_quad: int = QUADRATURE_POINTS) -> float:
    """``E[g(Y)]`` under the equal-weight mixture of calibrated forecasts.

    Means use midpoint quadrature on the calibrated quantile function;
    exceedance probabilities use the calibrated CDF directly.
    """
    means = np.asarray(means, dtype=float)
    sds = np.asarray(sds, dtype=float) * np.ones_like(means)
    if np.any(sds <= 0):
        raise ValueError("forecast standard deviations must be positive")
    if crit.kind == MEAN:
        u = (np.arange(n_quad) + 0.5) / n_quad
        c = float(np.mean(ndtri(calibrator.inverse(u))))
        return float(np.mean(means) + c * np.mean(sds))
    return float(np.mean(1.0 - calibrator(ndtr((crit.gamma - means) / sds))))


def calibrated_select(menu_ids, forecasts: Mapping, calibrator: IsotonicCalibrator,
                      crit: SuccessCriterion, tau: float | None = None,
                      alpha: float = 0.0) -> SelectionReport:
    """Select configurations whose calibrated mixture expectation reaches tau.

    ``forecasts[id]`` is a ``(means, sds)`` pair over that configuration's
    designs. ``alpha`` is recorded only; the method has no error control.
    """
    tau = crit.tau if tau is None else tau
    ids = list(menu_ids)
    per = {}
    for cid in ids:
        means, sds = forecasts[cid]
        est = calibrated_expectation(means, sds, calibrator, crit)
        per[cid] = ConfigResult(None, theta_hat=est, lower_bound=est)
    selected = [cid for cid in ids if per[cid].lower_bound >= tau]
    return SelectionReport(per, selected, alpha, Backend.CALIBRATED_FORECAST, tau, len(ids))
