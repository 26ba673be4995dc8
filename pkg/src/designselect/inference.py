"""Prediction-powered estimates, lower bounds and p-values for a design
label metric ``theta = E[g(Y)]`` under covariate shift.

All functions are pure. Labeled data enter as rows of
``(g(y), g(y_hat), w)`` where ``w`` is the design/labeled density ratio of
the labeled input.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtr

MEAN = "mean"
EXCEEDANCE = "exceedance"


@dataclass(frozen=True)
class SuccessCriterion:
    """Success means ``E[g(Y)] >= tau``.

    ``kind`` is ``"mean"`` (g is the identity) or ``"exceedance"``
    (g(y) = 1[y >= gamma]). ``g_range`` bounds the values of g and is only
    needed by the finite-sample methods; exceedance always uses [0, 1].
    """

    kind: str = MEAN
    tau: float = 0.0
    gamma: float | None = None
    g_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in (MEAN, EXCEEDANCE):
            raise ValueError(f"unknown criterion kind {self.kind!r}")
        if self.kind == EXCEEDANCE:
            if self.gamma is None:
                raise ValueError("exceedance criterion needs gamma")
            object.__setattr__(self, "g_range", (0.0, 1.0))
        if self.g_range is not None:
            lo, hi = self.g_range
            object.__setattr__(self, "g_range", (float(lo), float(hi)))

    @classmethod
    def mean(cls, tau=0.0, g_range=None):
        return cls(MEAN, tau, None, g_range)

    @classmethod
    def exceedance(cls, gamma, tau=0.0):
        return cls(EXCEEDANCE, tau, float(gamma))

    def with_tau(self, tau):
        return SuccessCriterion(self.kind, float(tau), self.gamma, self.g_range)

    def g(self, values):
        values = np.asarray(values, dtype=float)
        if self.kind == MEAN:
            return values
        return (values >= self.gamma).astype(float)

    def checked_range(self):
        if self.g_range is None:
            raise ValueError("finite-sample methods need criterion.g_range")
        lo, hi = self.g_range
        if not lo < hi:
            raise ValueError(f"g_range must satisfy L < U, got {self.g_range}")
        return lo, hi


class GSample(NamedTuple):
    g_of_label: float
    g_of_pred: float
    weight: float


@dataclass(frozen=True)
class PPEstimate:
    mu_hat: float
    delta_hat: float
    theta_hat: float
    var_pred: float
    var_err: float
    n_designs: int
    n_labeled: int

    @property
    def std_error(self):
        return math.sqrt(self.var_pred / self.n_designs + self.var_err / self.n_labeled)


@dataclass(frozen=True)
class BoundConfig:
    """Grids and constants for the finite-sample bound.

    ``max_alpha`` truncates the p-value search: grid levels above it are not
    evaluated and the p-value is reported as 1 when no level up to it
    rejects. Selection at Bonferroni level ``alpha/|menu|`` is unchanged as
    long as ``max_alpha >= alpha/|menu|``.
    """

    alpha_grid_step: float = 1e-3
    mean_grid_step: float = 1e-3
    ratio_bound: float = 1.0
    alpha_split: float = 0.1
    max_alpha: float = 1.0

    def __post_init__(self):
        for name in ("alpha_grid_step", "mean_grid_step", "alpha_split"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not self.ratio_bound >= 1:
            raise ValueError(f"ratio_bound must be >= 1, got {self.ratio_bound}")


def as_labeled(labeled) -> np.ndarray:
    """Coerce GSamples (or an (n, 3) array) to an (n, 3) float array."""
    arr = np.asarray(labeled, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("labeled samples must be rows of (g_label, g_pred, weight)")
    return arr


def labeled_columns(g_label, g_pred, weight) -> np.ndarray:
    return np.column_stack([np.asarray(g_label, float), np.asarray(g_pred, float),
                            np.asarray(weight, float)])


def _check_weights(w):
    if not np.all(np.isfinite(w)):
        raise ValueError("density ratios must be finite")
    if np.any(w < 0):
        raise ValueError("density ratios must be nonnegative")


def pp_estimate(design_g: Sequence[float], labeled) -> PPEstimate:
    """Prediction-powered point estimate with 1/n variance estimates."""
    dg = np.asarray(design_g, dtype=float)
    lab = as_labeled(labeled)
    if dg.size == 0 or lab.shape[0] == 0:
        raise ValueError("pp_estimate needs nonempty designs and labeled data")
    w = lab[:, 2]
    _check_weights(w)
    mu = float(np.mean(dg))
    resid = w * (lab[:, 0] - lab[:, 1])
    delta = float(np.mean(resid))
    var_pred = float(np.mean((dg - mu) ** 2))
    var_err = float(np.mean((resid - delta) ** 2))
    return PPEstimate(mu, delta, mu + delta, var_pred, var_err, dg.size, lab.shape[0])


def labeled_only_estimate(labeled) -> float:
    """Importance-weighted mean of labels, ignoring predictions entirely."""
    lab = as_labeled(labeled)
    if lab.shape[0] == 0:
        raise ValueError("labeled_only_estimate needs labeled data")
    _check_weights(lab[:, 2])
    return float(np.mean(lab[:, 2] * lab[:, 0]))


def normal_p_value(theta_hat: float, tau: float, variance: float) -> float:
    # zero variance: limit of the statistic as sigma -> 0+
    if variance <= 0:
        return 0.0 if theta_hat > tau else 1.0
    z = (theta_hat - tau) / math.sqrt(variance)
    return float(ndtr(-z))


def asymptotic_p_value(est: PPEstimate, tau: float) -> float:
    var = est.var_pred / est.n_designs + est.var_err / est.n_labeled
    return normal_p_value(est.theta_hat, tau, var)


def prediction_only_p_value(design_g: Sequence[float], tau: float) -> float:
    dg = np.asarray(design_g, dtype=float)
    if dg.size == 0:
        raise ValueError("prediction_only_p_value needs designs")
    theta = float(np.mean(dg))
    var_pred = float(np.mean((dg - theta) ** 2))
    return normal_p_value(theta, tau, var_pred / dg.size)


def self_normalized_estimate(design_g, labeled_unnormalized):
    """Return ``(theta_hat, variance)`` using self-normalized weights.

    The variance is the prediction variance over N plus the delta-method
    variance of the ratio-of-means rectifier.
    """
    dg = np.asarray(design_g, dtype=float)
    lab = as_labeled(labeled_unnormalized)
    if dg.size == 0 or lab.shape[0] == 0:
        raise ValueError("self-normalized estimate needs designs and labeled data")
    w = lab[:, 2]
    _check_weights(w)
    wsum = float(np.sum(w))
    if wsum <= 0:
        raise ValueError("at least one unnormalized weight must be positive")
    n = lab.shape[0]
    r = lab[:, 0] - lab[:, 1]
    delta_u = float(np.sum(w * r) / wsum)
    mean_w = wsum / n
    var_delta = float(np.mean(w**2 * (r - delta_u) ** 2) / mean_w**2) / n
    mu = float(np.mean(dg))
    var_pred = float(np.mean((dg - mu) ** 2))
    return mu + delta_u, var_pred / dg.size + var_delta


def self_normalized_p_value(design_g, labeled_unnormalized, tau: float) -> float:
    theta, var = self_normalized_estimate(design_g, labeled_unnormalized)
    return normal_p_value(theta, tau, var)


def effective_sample_size(weights) -> float:
    """Kish effective sample size of a set of importance weights."""
    w = np.asarray(weights, dtype=float)
    s2 = float(np.sum(w**2))
    return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0


# --- betting-martingale mean lower bound -------------------------------------

_FIRST_BLOCK = 64


def _bet_sizes(z: np.ndarray, alpha: float) -> np.ndarray:
    """Predictable bet sizes lambda_t, t = 1..n, for data already in [0, 1]."""
    n = z.size
    t = np.arange(1, n + 1, dtype=float)
    zc = z - 0.5
    s1 = np.cumsum(zc)
    s2 = np.cumsum(zc * zc)
    # running mean is 0.5 + s1/(t+1); sum of squared deviations from it
    d = s1 / (t + 1)
    ss = np.maximum(s2 - 2 * d * s1 + t * d * d, 0.0)
    sig2 = (0.25 + ss) / (t + 1)
    sig2_prev = np.concatenate(([0.25], sig2[:-1]))
    return np.sqrt(2 * math.log(2 / alpha) / (n * sig2_prev))


def _survivors(z, lam, m, log_thresh):
    """Boolean mask of candidate means ``m`` never eliminated over all of z."""
    n = z.size
    alive = np.ones(m.size, dtype=bool)
    logw = np.zeros(m.size)
    with np.errstate(divide="ignore"):
        cap = np.where(m > 0, 0.5 / np.where(m > 0, m, 1.0), np.inf)
    t0, block = 0, _FIRST_BLOCK
    while t0 < n and alive.any():
        t1 = min(n, t0 + block)
        idx = np.flatnonzero(alive)
        mm = m[idx, None]
        bets = np.minimum(lam[None, t0:t1], cap[idx, None])
        path = logw[idx, None] + np.cumsum(np.log1p(bets * (z[None, t0:t1] - mm)), axis=1)
        hit = (path >= log_thresh).any(axis=1)
        logw[idx] = path[:, -1]
        alive[idx[hit]] = False
        t0, block = t1, block * 2
    return alive


def _mean_grid(step):
    k = int(round(1.0 / step))
    return np.linspace(0.0, 1.0, k + 1)


def _rescaled(samples, lo, hi):
    x = np.asarray(samples, dtype=float)
    if not lo < hi:
        raise ValueError(f"range must satisfy L < U, got [{lo}, {hi}]")
    tol = 1e-9 * (hi - lo)
    if x.size and (x.min() < lo - tol or x.max() > hi + tol):
        raise ValueError(f"samples fall outside the declared range [{lo}, {hi}]")
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def wsr_mean_lower_bound(alpha: float, samples, lo: float, hi: float,
                         grid_step: float = 1e-3) -> float:
    """Betting-martingale lower confidence bound on the mean of ``samples``.

    Candidate means on a grid of spacing ``grid_step`` over the rescaled
    range are eliminated once their capital reaches ``1/alpha``; the bound
    is the smallest surviving candidate mapped back to ``[lo, hi]``. It is
    conservative by at most one grid step relative to the continuous
    version.
    """
    z = _rescaled(samples, lo, hi)
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0 or z.size == 0:
        return float(lo)
    if alpha >= 1:
        warnings.warn("alpha = 1 eliminates every candidate mean; returning U",
                      stacklevel=2)
        return float(hi)
    grid = _mean_grid(grid_step)
    lam = _bet_sizes(z, alpha)
    k = _min_survivor(z, lam, grid, -math.log(alpha), alpha)
    return float(hi) if k is None else float(_grid_values(grid, lo, hi)[k])


def _grid_values(grid, lo, hi):
    vals = grid * (hi - lo) + lo
    vals[-1] = hi
    return vals


def _all_eliminated(z, lam, m, log_thresh):
    if m.size == 0:
        return True
    # the top point is the likeliest survivor; test it alone first
    if _survivors(z, lam, m[-1:], log_thresh)[0]:
        return False
    return not _survivors(z, lam, m[:-1], log_thresh).any()


def _bound_exceeds(alpha, samples, lo, hi, grid_step, offset, tau):
    """Whether ``wsr_mean_lower_bound(alpha, ...) + offset > tau``, exactly."""
    z = _rescaled(samples, lo, hi)
    if alpha == 0 or z.size == 0:
        return lo + offset > tau
    if alpha >= 1:
        return hi + offset > tau
    grid = _mean_grid(grid_step)
    vals = _grid_values(grid, lo, hi)
    k = int(np.count_nonzero(vals + offset <= tau))
    if k == 0:
        return True
    if k == grid.size:
        return False
    return _all_eliminated(z, _bet_sizes(z, alpha), grid[:k], -math.log(alpha))


def _min_survivor(z, lam, grid, log_thresh, alpha):
    """Index of the smallest never-eliminated grid point, or None.

    Exact: a surviving point ``c`` near a normal-approximation guess is
    located first, then every grid point below ``c`` is settled together.
    """
    n = z.size
    width = math.sqrt(2 * max(float(np.var(z)), 1.0 / n) * math.log(1 / alpha) / n)
    guess = min(max(float(np.mean(z)) - width, 0.0), 1.0)
    c = int(np.searchsorted(grid, guess))
    c = min(c, grid.size - 1)
    step = 1
    while not _survivors(z, lam, grid[c:c + 1], log_thresh)[0]:
        if c == grid.size - 1:
            c = None
            break
        c = min(c + step, grid.size - 1)
        step *= 2
    if c is None:
        # no survivor at or above the guess; settle the lower part directly
        alive = _survivors(z, lam, grid[:int(np.searchsorted(grid, guess))], log_thresh)
        return int(np.argmax(alive)) if alive.any() else None
    if c == 0:
        return 0
    alive = _survivors(z, lam, grid[:c], log_thresh)
    return int(np.argmax(alive)) if alive.any() else c


def _rectifier_setup(design_g, labeled, crit, cfg):
    lo, hi = crit.checked_range()
    lab = as_labeled(labeled)
    w = lab[:, 2]
    _check_weights(w)
    if w.size and w.max() > cfg.ratio_bound:
        raise ValueError(f"density ratio {w.max():.6g} exceeds the bound "
                         f"D = {cfg.ratio_bound:.6g}")
    D = cfg.ratio_bound
    rect = w * (lab[:, 0] - lab[:, 1])
    return np.asarray(design_g, dtype=float), rect, (lo, hi), (D * (lo - hi), D * (hi - lo))


def pp_mean_lower_bound(alpha: float, design_g, labeled, crit: SuccessCriterion,
                        cfg: BoundConfig = BoundConfig()) -> float:
    """Finite-sample lower confidence bound on theta at level ``alpha``.

    Sum of a bound on the mean design prediction (level ``alpha_split *
    alpha``) and a bound on the weighted rectifier (the remaining level).
    """
    dg, rect, drange, rrange = _rectifier_setup(design_g, labeled, crit, cfg)
    a_design = cfg.alpha_split * alpha
    a_rect = (1 - cfg.alpha_split) * alpha
    return (wsr_mean_lower_bound(a_design, dg, *drange, grid_step=cfg.mean_grid_step)
            + wsr_mean_lower_bound(a_rect, rect, *rrange, grid_step=cfg.mean_grid_step))


def alpha_grid(cfg: BoundConfig) -> np.ndarray:
    k = int(round(1.0 / cfg.alpha_grid_step))
    grid = np.linspace(0.0, 1.0, k + 1)
    return grid[grid <= cfg.max_alpha + 1e-15]


def pp_lower_bound_curve(design_g, labeled, crit: SuccessCriterion,
                         cfg: BoundConfig = BoundConfig()):
    """``(alphas, bounds)`` for every grid level up to ``cfg.max_alpha``.

    A finite-sample p-value for any threshold ``tau`` is then the first
    level whose bound exceeds ``tau`` (see :func:`p_value_from_curve`).
    """
    dg, rect, drange, rrange = _rectifier_setup(design_g, labeled, crit, cfg)
    alphas = alpha_grid(cfg)
    bounds = np.array([
        wsr_mean_lower_bound(cfg.alpha_split * a, dg, *drange, grid_step=cfg.mean_grid_step)
        + wsr_mean_lower_bound((1 - cfg.alpha_split) * a, rect, *rrange,
                               grid_step=cfg.mean_grid_step)
        for a in alphas
    ])
    return alphas, bounds


def p_value_from_curve(alphas, bounds, tau: float) -> float:
    above = np.flatnonzero(np.asarray(bounds) > tau)
    return float(alphas[above[0]]) if above.size else 1.0


def finite_sample_p_value(design_g, labeled, crit: SuccessCriterion,
                          cfg: BoundConfig = BoundConfig()) -> float:
    """Smallest grid level whose lower bound exceeds ``crit.tau``; 1 if none."""
    dg, rect, drange, rrange = _rectifier_setup(design_g, labeled, crit, cfg)
    for a in alpha_grid(cfg):
        a = float(a)
        rect_lb = wsr_mean_lower_bound((1 - cfg.alpha_split) * a, rect, *rrange,
                                       grid_step=cfg.mean_grid_step)
        if _bound_exceeds(cfg.alpha_split * a, dg, *drange, cfg.mean_grid_step,
                          rect_lb, crit.tau):
            return a
    return 1.0
