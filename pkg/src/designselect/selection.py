"""Choosing configurations whose design labels meet a success criterion.

Each configuration gets a p-value for the null ``theta < tau``; the
configurations with ``p <= alpha / |menu|`` are selected (Bonferroni), which
bounds the chance of selecting any unsuccessful configuration by ``alpha``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

import numpy as np

from . import inference as inf
from .inference import BoundConfig, SuccessCriterion


class Backend(str, Enum):
    ASYMPTOTIC = "asymptotic"
    FINITE_SAMPLE = "finite_sample"
    SELF_NORMALIZED = "self_normalized"
    PREDICTION_ONLY = "prediction_only"
    CONFORMAL = "conformal"
    CALIBRATED_FORECAST = "calibrated_forecast"

    @property
    def uses_p_values(self):
        return self not in (Backend.CONFORMAL, Backend.CALIBRATED_FORECAST)


@dataclass(frozen=True, eq=False)
class ConfigurationSpec:
    """One menu entry: design distribution parameters, predictor and ratios."""

    id: str
    design_params: Any = None
    predictor: Any = None
    ratio_provider: Any = None


@dataclass(frozen=True, eq=False)
class Menu:
    entries: tuple

    def __init__(self, entries):
        entries = tuple(e if isinstance(e, ConfigurationSpec) else ConfigurationSpec(str(e))
                        for e in entries)
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("configuration ids must be unique within a menu")
        object.__setattr__(self, "entries", entries)

    @property
    def ids(self):
        return [e.id for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class ConfigResult:
    p_value: float | None
    theta_hat: float | None = None
    mu_hat: float | None = None
    delta_hat: float | None = None
    effective_sample_size: float | None = None
    lower_bound: float | None = None

    def to_dict(self):
        return {k: _json_float(getattr(self, k)) for k in self.__dataclass_fields__}


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return v


def _from_json_float(v):
    if v is None:
        return None
    return float(v)


@dataclass
class SelectionReport:
    """Per-configuration statistics and the selected ids, both in menu order."""

    per_config: dict
    selected: list
    alpha: float
    backend: Backend
    tau: float
    n_menu: int = field(default=0)

    def __post_init__(self):
        self.backend = Backend(self.backend)
        if not self.n_menu:
            self.n_menu = len(self.per_config)

    @property
    def threshold(self):
        return self.alpha / self.n_menu if self.n_menu else 0.0

    def recompute_selected(self):
        """Apply the selection rule to the stored statistics."""
        if self.backend.uses_p_values:
            return [cid for cid, r in self.per_config.items()
                    if r.p_value <= self.threshold]
        return [cid for cid, r in self.per_config.items()
                if r.lower_bound is not None and r.lower_bound >= self.tau]

    def to_dict(self):
        return {
            "backend": self.backend.value,
            "alpha": self.alpha,
            "tau": self.tau,
            "n_menu": self.n_menu,
            "threshold": self.threshold,
            "selected": list(self.selected),
            "per_config": {cid: r.to_dict() for cid, r in self.per_config.items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        per = {cid: ConfigResult(**{k: _from_json_float(v) for k, v in r.items()})
               for cid, r in d["per_config"].items()}
        return cls(per, list(d["selected"]), d["alpha"], d["backend"], d["tau"],
                   d.get("n_menu", len(per)))


def apply_g(crit: SuccessCriterion, raw):
    """Identity for the mean criterion, ``1[y >= gamma]`` for exceedance."""
    return crit.g(raw)


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _bound_config(cfg, entry: ConfigurationSpec):
    if isinstance(cfg, Mapping):
        return cfg[entry.id]
    if cfg is not None:
        return cfg
    D = getattr(entry.ratio_provider, "max_ratio", None)
    if D is None:
        raise ValueError(f"configuration {entry.id!r} needs a ratio bound for the "
                         "finite-sample backend; pass a BoundConfig")
    return BoundConfig(ratio_bound=max(1.0, float(D)))


def config_p_value(backend: Backend, design_g, labeled, crit: SuccessCriterion,
                   cfg: BoundConfig | None = None) -> ConfigResult:
    """p-value and diagnostics for one configuration."""
    backend = Backend(backend)
    dg = np.asarray(design_g, dtype=float)
    if backend is Backend.PREDICTION_ONLY:
        mu = float(np.mean(dg))
        return ConfigResult(inf.prediction_only_p_value(dg, crit.tau), mu, mu, 0.0)
    lab = inf.as_labeled(labeled)
    ess = inf.effective_sample_size(lab[:, 2])
    if backend is Backend.SELF_NORMALIZED:
        theta, var = inf.self_normalized_estimate(dg, lab)
        mu = float(np.mean(dg))
        return ConfigResult(inf.normal_p_value(theta, crit.tau, var), theta, mu,
                            theta - mu, ess)
    est = inf.pp_estimate(dg, lab)
    if backend is Backend.ASYMPTOTIC:
        p = inf.asymptotic_p_value(est, crit.tau)
    elif backend is Backend.FINITE_SAMPLE:
        p = inf.finite_sample_p_value(dg, lab, crit, cfg or BoundConfig())
    else:
        raise ValueError(f"{backend.value} is not a p-value backend; see the baselines module")
    return ConfigResult(p, est.theta_hat, est.mu_hat, est.delta_hat, ess)


def report_from_p_values(ids, results: Mapping[str, ConfigResult], alpha, backend,
                         tau) -> SelectionReport:
    ids = list(ids)
    threshold = alpha / len(ids) if ids else 0.0
    selected = [cid for cid in ids if results[cid].p_value <= threshold]
    return SelectionReport({cid: results[cid] for cid in ids}, selected, alpha,
                           backend, tau, len(ids))


def select(menu: Menu, design_batches: Mapping, labeled: Mapping, crit: SuccessCriterion,
           alpha: float, backend: Backend | str = Backend.ASYMPTOTIC,
           cfg: BoundConfig | Mapping | None = None) -> SelectionReport:
    """Test every configuration and keep those with ``p <= alpha / |menu|``.

    ``design_batches[id]`` holds g-transformed design predictions and
    ``labeled[id]`` holds ``(g(y), g(y_hat), w)`` rows with that
    configuration's predictions and weights. ``cfg`` applies to the
    finite-sample backend: one BoundConfig for all, a mapping by id, or None
    to take each ratio provider's ``max_ratio`` as the bound.
    """
    _check_alpha(alpha)
    backend = Backend(backend)
    if not backend.uses_p_values:
        raise ValueError(f"{backend.value} is not a p-value backend; see the baselines module")
    results = {}
    for entry in menu:
        if entry.id not in design_batches:
            raise KeyError(f"no design batch for configuration {entry.id!r}")
        lab = None
        if backend is not Backend.PREDICTION_ONLY:
            if entry.id not in labeled:
                raise KeyError(f"no labeled samples for configuration {entry.id!r}")
            lab = labeled[entry.id]
        bcfg = _bound_config(cfg, entry) if backend is Backend.FINITE_SAMPLE else None
        results[entry.id] = config_p_value(backend, design_batches[entry.id], lab, crit, bcfg)
    return report_from_p_values(menu.ids, results, alpha, backend, crit.tau)
