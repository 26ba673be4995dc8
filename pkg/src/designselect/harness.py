"""Multi-trial selection experiments on the synthetic design world.

Every trial draws a fresh labeled set and fresh design batches from its own
seed substream, runs each backend, and records which configurations were
selected. Threshold sweeps reuse each trial's samples for every threshold.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import yaml

from . import inference as inf
from .baselines import (WeightedResidualSet, calibrated_expectation, fit_calibrator)
from .inference import BoundConfig, SuccessCriterion
from .ratios import (ClassifierRatio, ExactRatio, SmoothedRatio, UnnormalizedRatio,
                     fit_mdre)
from .selection import Backend
from .sim import InstanceSpec, build_instance, sample_designs, sample_labeled

SCHEMA_VERSION = 1
RATIO_METHODS = ("exact", "smoothed", "mdre")


def _tau_values(spec, thetas=None):
    if spec is None:
        return ()
    if isinstance(spec, (int, float)):
        return (float(spec),)
    if isinstance(spec, dict):
        if "theta_quantile" in spec:
            if thetas is None:
                raise ValueError("theta_quantile needs the menu's true metrics")
            return (float(np.quantile(list(thetas.values()), spec["theta_quantile"])),)
        start, stop, step = float(spec["start"]), float(spec["stop"]), float(spec["step"])
        if step <= 0:
            raise ValueError("tau step must be positive")
        if stop < start:
            return ()
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(float(start + k * step) for k in range(count))
    return tuple(float(v) for v in spec)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce an experiment.

    ``tau`` is a number, a list, ``{start, stop, step}`` (inclusive), or
    ``{theta_quantile: q}`` for the q-quantile of the menu's true metrics.
    Backends may also be callables ``fn(context, tau) -> selected ids``.
    """

    instance: InstanceSpec = field(default_factory=InstanceSpec)
    criterion: str = "mean"
    gamma: float | None = None
    tau: object = field(default_factory=lambda: {"theta_quantile": 0.5})
    alpha: float = 0.1
    backends: tuple = ("asymptotic", "finite_sample")
    n_labeled: int = 2000
    n_designs: int = 50000
    trials: int = 500
    master_seed: int = 0
    ratio_method: str = "exact"
    g_range: tuple | None = None
    g_range_margin: float = 8.0
    alpha_grid_step: float = 1e-3
    mean_grid_step: float = 1e-3
    alpha_split: float = 0.1
    truncate_alpha_grid: bool = True
    mdre_samples_per_class: int = 5000
    backend_trials: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_labeled < 1 or self.n_designs < 1:
            raise ValueError("n_labeled and n_designs must be positive")
        if self.ratio_method not in RATIO_METHODS:
            raise ValueError(f"ratio_method must be one of {RATIO_METHODS}")
        if self.criterion not in (inf.MEAN, inf.EXCEEDANCE):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.criterion == inf.EXCEEDANCE and self.gamma is None:
            raise ValueError("exceedance criterion needs gamma")
        for b in self.backends:
            if not callable(b):
                Backend(b)
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version}")
        inst = InstanceSpec.from_dict(d.pop("instance", {}) or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        for key in ("backends", "g_range"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(instance=inst, **d)

    @classmethod
    def from_yaml(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self):
        d = {"schema_version": SCHEMA_VERSION}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if k == "instance":
                v = v.to_dict()
            elif k == "backends":
                v = [b if isinstance(b, str) else getattr(b, "__name__", repr(b)) for b in v]
            elif isinstance(v, tuple):
                v = list(v)
            d[k] = v
        return d

    def backend_names(self):
        return [b if isinstance(b, str) else getattr(b, "__name__", "custom")
                for b in self.backends]


@dataclass
class TrialContext:
    """Data one trial hands to a custom backend."""

    trial: int
    ids: list
    thetas: dict
    criterion: SuccessCriterion
    alpha: float
    design_g: dict
    labeled: dict


class _World:
    """Per-process state: the instance, ground truth and fixed settings."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.inst = build_instance(cfg.instance)
        self.ids = list(self.inst.ids)
        base = (SuccessCriterion.mean() if cfg.criterion == inf.MEAN
                else SuccessCriterion.exceedance(cfg.gamma))
        self.thetas = self.inst.thetas(base)
        if cfg.criterion == inf.MEAN:
            if cfg.g_range is not None:
                g_range = tuple(cfg.g_range)
            else:
                x = self.inst.space.enumerate()
                m, f = self.inst.oracle.mean(x), self.inst.predictor(x)
                pad = cfg.g_range_margin * self.inst.oracle.noise_sd
                g_range = (float(min(m.min(), f.min()) - pad), float(max(m.max(), f.max()) + pad))
            base = SuccessCriterion.mean(0.0, g_range)
        self.crit = base
        self.exact = {cid: ExactRatio(d.q, self.inst.labeled_dist)
                      for cid, d in zip(self.ids, self.inst.designs)}
        lab = self.inst.labeled_dist
        self.unnormalized = {
            cid: UnnormalizedRatio(d.log_unnormalized, lambda x, lab=lab: lab.log_prob(x) + 3.0)
            for cid, d in zip(self.ids, self.inst.designs)}
        self.max_alpha = cfg.alpha / len(self.ids) if cfg.truncate_alpha_grid else 1.0

    def bound_config(self, D):
        # a hair of slack so a weight equal to D in exact arithmetic passes
        return BoundConfig(self.cfg.alpha_grid_step, self.cfg.mean_grid_step,
                           max(1.0, D * (1 + 1e-12)), self.cfg.alpha_split, self.max_alpha)

    def providers(self, x_lab, batches):
        method = self.cfg.ratio_method
        if method == "exact":
            return self.exact
        L, A = self.inst.space.L, self.inst.space.A
        if method == "smoothed":
            out = {}
            for cid in self.ids:
                p = SmoothedRatio.from_samples(batches[cid].sequences, x_lab, L, A)
                p.max_ratio = ExactRatio(p.design, p.labeled).max_ratio
                out[cid] = p
            return out
        k = self.cfg.mdre_samples_per_class
        sets = [("labeled", x_lab)] + [(cid, batches[cid].sequences[:k]) for cid in self.ids]
        model = fit_mdre(sets, A)
        return {cid: ClassifierRatio(model, cid, "labeled") for cid in self.ids}


_WORLD: _World | None = None


def _init_worker(cfg):
    global _WORLD
    _WORLD = _World(cfg)


def _trial_seeds(master_seed, trial, count):
    ss = np.random.SeedSequence(master_seed, spawn_key=(trial,))
    return ss.spawn(count)


def _p_value_records(backend, world, taus, design_g, labeled, providers, batches,
                     x_lab, y_lab, pred_lab):
    """Per-tau lists of (selected ids, per-config statistic)."""
    cfg, ids, crit = world.cfg, world.ids, world.crit
    thr = cfg.alpha / len(ids)
    stats = {tau: {} for tau in taus}
    b = Backend(backend)
    if b is Backend.ASYMPTOTIC:
        for cid in ids:
            est = inf.pp_estimate(design_g[cid], labeled[cid])
            for tau in taus:
                stats[tau][cid] = inf.asymptotic_p_value(est, tau)
    elif b is Backend.PREDICTION_ONLY:
        for cid in ids:
            for tau in taus:
                stats[tau][cid] = inf.prediction_only_p_value(design_g[cid], tau)
    elif b is Backend.SELF_NORMALIZED:
        for cid in ids:
            lab = labeled[cid]
            if cfg.ratio_method == "exact":
                lab = lab.copy()
                lab[:, 2] = world.unnormalized[cid](x_lab)
            theta, var = inf.self_normalized_estimate(design_g[cid], lab)
            for tau in taus:
                stats[tau][cid] = inf.normal_p_value(theta, tau, var)
    elif b is Backend.FINITE_SAMPLE:
        for cid in ids:
            bcfg = world.bound_config(providers[cid].max_ratio)
            if len(taus) == 1:
                stats[taus[0]][cid] = inf.finite_sample_p_value(
                    design_g[cid], labeled[cid], crit.with_tau(taus[0]), bcfg)
            else:
                alphas, bounds = inf.pp_lower_bound_curve(design_g[cid], labeled[cid], crit, bcfg)
                for tau in taus:
                    stats[tau][cid] = inf.p_value_from_curve(alphas, bounds, tau)
    elif b is Backend.CONFORMAL:
        if crit.kind != inf.MEAN:
            raise ValueError("the conformal baseline supports the mean criterion only")
        for cid in ids:
            rs = WeightedResidualSet(pred_lab - y_lab, labeled[cid][:, 2])
            preds = batches[cid].predictions
            level = cfg.alpha / (len(ids) * preds.size)
            lb = float(np.mean(preds - rs.quantile_radius(providers[cid](batches[cid].sequences),
                                                          level)))
            for tau in taus:
                stats[tau][cid] = lb
        return {tau: ([c for c in ids if stats[tau][c] >= tau], stats[tau]) for tau in taus}
    elif b is Backend.CALIBRATED_FORECAST:
        sd = world.inst.predictor_sd
        cal = fit_calibrator(pred_lab, np.full(pred_lab.shape, sd), y_lab)
        for cid in ids:
            est = calibrated_expectation(batches[cid].predictions, sd, cal, crit)
            for tau in taus:
                stats[tau][cid] = est
        return {tau: ([c for c in ids if stats[tau][c] >= tau], stats[tau]) for tau in taus}
    return {tau: ([c for c in ids if stats[tau][c] <= thr], stats[tau]) for tau in taus}


def _run_trial(t, taus, custom=None):
    world = _WORLD
    cfg, ids, inst = world.cfg, world.ids, world.inst
    seeds = _trial_seeds(cfg.master_seed, t, 1 + len(ids))
    x_lab, y_lab = sample_labeled(inst.labeled_dist, inst.oracle, cfg.n_labeled, seeds[0])
    pred_lab = inst.predictor(x_lab)
    batches = {cid: sample_designs(d.q, inst.predictor, cfg.n_designs, s)
               for cid, d, s in zip(ids, inst.designs, seeds[1:])}
    providers = world.providers(x_lab, batches)
    crit = world.crit
    design_g = {cid: crit.g(batches[cid].predictions) for cid in ids}
    labeled = {cid: inf.labeled_columns(crit.g(y_lab), crit.g(pred_lab), providers[cid](x_lab))
               for cid in ids}
    names = cfg.backend_names()
    rows = []
    for name, backend in zip(names, cfg.backends):
        if t >= cfg.backend_trials.get(name, cfg.trials):
            continue
        if callable(backend):
            ctx = TrialContext(t, ids, world.thetas, crit, cfg.alpha, design_g, labeled)
            out = {tau: (list(backend(ctx, tau)), {}) for tau in taus}
            kind = "none"
        else:
            out = _p_value_records(backend, world, taus, design_g, labeled, providers,
                                   batches, x_lab, y_lab, pred_lab)
            kind = "p_value" if Backend(backend).uses_p_values else "estimate"
        for tau in taus:
            selected, stats = out[tau]
            rows.append(_record(t, tau, name, kind, selected, stats, world))
    return rows


def _record(t, tau, name, kind, selected, stats, world):
    ids = world.ids
    unknown = set(selected) - set(ids)
    if unknown:
        raise ValueError(f"backend {name!r} selected unknown ids {sorted(unknown)}")
    sel = [c for c in ids if c in set(selected)]
    worst = min((world.thetas[c] for c in sel), default=None)
    rec = {
        "trial": t,
        "tau": tau,
        "backend": name,
        "n_selected": len(sel),
        "selected": ";".join(sel),
        "error": int(any(world.thetas[c] < tau for c in sel)),
        "worst_selected_theta": worst,
        "stat": kind,
    }
    for c in ids:
        rec[f"stat_{c}"] = stats.get(c)
    return rec


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    ids: list
    thetas: dict
    taus: tuple
    records: list
    metrics: list

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "records.csv"), "w", newline="") as fh:
            fh.write(records_to_csv(self.records, self.ids))
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            fh.write(metrics_to_csv(self.metrics))
        summary = {
            "config": self.config.to_dict(),
            "thetas": self.thetas,
            "metrics": self.metrics,
        }
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


RECORD_COLUMNS = ["trial", "tau", "backend", "n_selected", "selected", "error",
                  "worst_selected_theta", "stat"]
METRIC_COLUMNS = ["tau", "backend", "trials", "error_rate", "selection_rate",
                  "worst_theta_p20", "worst_theta_p50", "worst_theta_p80"]


def records_to_csv(records, ids):
    cols = RECORD_COLUMNS + [f"stat_{c}" for c in ids]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def read_records(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        rec = dict(r)
        rec["trial"] = int(r["trial"])
        rec["tau"] = float(r["tau"])
        rec["n_selected"] = int(r["n_selected"])
        rec["error"] = int(r["error"])
        rec["worst_selected_theta"] = (float(r["worst_selected_theta"])
                                       if r["worst_selected_theta"] else None)
        out.append(rec)
    return out


def metrics_to_csv(metrics):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in metrics:
        w.writerow([_fmt(m[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def summarize(records):
    """Error rate, selection rate and worst-selected percentiles per (backend, tau)."""
    groups = {}
    for r in records:
        groups.setdefault((r["backend"], r["tau"]), []).append(r)
    out = []
    for (backend, tau), rs in groups.items():
        worst = [r["worst_selected_theta"] for r in rs if r["n_selected"] > 0]
        pct = (np.percentile(worst, [20, 50, 80]).tolist() if worst else [None] * 3)
        out.append({
            "tau": tau,
            "backend": backend,
            "trials": len(rs),
            "error_rate": sum(r["error"] for r in rs) / len(rs),
            "selection_rate": sum(r["n_selected"] > 0 for r in rs) / len(rs),
            "worst_theta_p20": pct[0],
            "worst_theta_p50": pct[1],
            "worst_theta_p80": pct[2],
        })
    return out


def _run(cfg: ExperimentConfig, taus=None, single=False) -> ExperimentResult:
    global _WORLD
    _WORLD = world = _World(cfg)
    if taus is None:
        taus = _tau_values(cfg.tau, world.thetas)
    taus = tuple(taus)
    if single and len(taus) != 1:
        raise ValueError("run_experiment needs exactly one tau; use sweep_tau for ranges")
    if not taus:
        return ExperimentResult(cfg, world.ids, world.thetas, taus, [], [])
    trials = range(cfg.trials)
    if cfg.workers > 1:
        if any(callable(b) for b in cfg.backends):
            raise ValueError("custom backends run in-process only; set workers to 1")
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker,
                                 initargs=(cfg,)) as pool:
            chunks = list(pool.map(_run_trial, trials, [taus] * cfg.trials,
                                   chunksize=max(1, cfg.trials // (4 * cfg.workers))))
    else:
        chunks = [_run_trial(t, taus) for t in trials]
    records = [r for chunk in chunks for r in chunk]
    # order: backend, tau, trial so each metric's rows are contiguous
    order = {n: i for i, n in enumerate(cfg.backend_names())}
    records.sort(key=lambda r: (order[r["backend"]], taus.index(r["tau"]), r["trial"]))
    return ExperimentResult(cfg, world.ids, world.thetas, taus, records, summarize(records))


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run ``cfg.trials`` trials at a single threshold."""
    return _run(cfg, single=True)


def sweep_tau(cfg: ExperimentConfig, taus=None) -> ExperimentResult:
    """Run every threshold on the same per-trial samples."""
    return _run(cfg, taus)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})


CustomBackend = Callable[[TrialContext, float], object]
