"""Command-line entry point: ``designselect <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
import yaml

from . import harness
from .baselines import WeightedResidualSet, calibrated_select, conformal_select, fit_calibrator
from .harness import ExperimentConfig
from .inference import BoundConfig, SuccessCriterion, labeled_columns
from .ratios import (ExactRatio, ProductCategorical, SmoothedRatio, UnnormalizedRatio,
                     exact_ratio, fit_mdre, mdre_ratio)
from .selection import Backend, ConfigurationSpec, Menu, select
from .sim import (build_instance, read_dataset, sample_designs, sample_labeled,
                  write_dataset)


def _load_config(args):
    cfg = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    backends = None
    if getattr(args, "backend", None):
        backends = tuple(b for item in args.backend for b in item.split(","))
    return harness.with_overrides(cfg, master_seed=args.seed, alpha=args.alpha,
                                  trials=getattr(args, "trials", None), backends=backends)


def cmd_simulate(args):
    cfg = _load_config(args)
    inst = build_instance(cfg.instance)
    out = args.out
    os.makedirs(os.path.join(out, "designs"), exist_ok=True)
    os.makedirs(os.path.join(out, "distributions"), exist_ok=True)
    seeds = harness._trial_seeds(cfg.master_seed, 0, 1 + len(inst.ids))
    x, y = sample_labeled(inst.labeled_dist, inst.oracle, cfg.n_labeled, seeds[0])
    write_dataset(os.path.join(out, "labeled.csv"), x, y, inst.predictor(x))
    with open(os.path.join(out, "distributions", "labeled.txt"), "w") as fh:
        fh.write(inst.labeled_dist.to_text())
    crit = SuccessCriterion.mean()
    thetas = inst.thetas(crit)
    xs = inst.space.enumerate()
    m, f = inst.oracle.mean(xs), inst.predictor(xs)
    pad = cfg.g_range_margin * inst.oracle.noise_sd
    rows = []
    for cid, d, s in zip(inst.ids, inst.designs, seeds[1:]):
        batch = sample_designs(d.q, inst.predictor, cfg.n_designs, s)
        write_dataset(os.path.join(out, "designs", f"{cid}.csv"), batch.sequences,
                      np.full(cfg.n_designs, np.nan), batch.predictions)
        with open(os.path.join(out, "distributions", f"{cid}.txt"), "w") as fh:
            fh.write(d.q.to_text())
        rows.append([cid, repr(d.temperature), repr(thetas[cid]),
                     repr(ExactRatio(d.q, inst.labeled_dist).max_ratio)])
    with open(os.path.join(out, "thetas.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "temperature", "theta", "max_ratio"])
        w.writerows(rows)
    meta = {
        "ids": inst.ids,
        "predictor_sd": inst.predictor_sd,
        "noise_sd": inst.oracle.noise_sd,
        "g_range": [float(min(m.min(), f.min()) - pad), float(max(m.max(), f.max()) + pad)],
    }
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    print(f"wrote {len(inst.ids)} design batches and {cfg.n_labeled} labeled points to {out}")
    return 0


def _read_data_dir(path):
    with open(os.path.join(path, "meta.json")) as fh:
        meta = json.load(fh)
    x_lab, y_lab, pred_lab = read_dataset(os.path.join(path, "labeled.csv"))

    def dist(name):
        with open(os.path.join(path, "distributions", f"{name}.txt")) as fh:
            return ProductCategorical.from_text(fh.read())

    lab = dist("labeled")
    designs, dists = {}, {}
    for cid in meta["ids"]:
        x, _, pred = read_dataset(os.path.join(path, "designs", f"{cid}.csv"))
        designs[cid] = (x, pred)
        dists[cid] = dist(cid)
    return meta, (x_lab, y_lab, pred_lab), lab, designs, dists


def cmd_select(args):
    meta, (x_lab, y_lab, pred_lab), lab, designs, dists = _read_data_dir(args.data)
    alpha = 0.1 if args.alpha is None else args.alpha
    if args.gamma is not None:
        crit = SuccessCriterion.exceedance(args.gamma, args.tau)
    else:
        crit = SuccessCriterion.mean(args.tau, tuple(meta["g_range"]))
    backend = Backend(args.backend[0] if args.backend else "asymptotic")
    ids = meta["ids"]
    providers = {cid: ExactRatio(dists[cid], lab) for cid in ids}
    if backend is Backend.CONFORMAL:
        if args.gamma is not None:
            raise SystemExit("the conformal baseline supports the mean criterion only")
        rsets = {cid: WeightedResidualSet(pred_lab - y_lab, providers[cid](x_lab)) for cid in ids}
        report = conformal_select(ids, {c: designs[c][1] for c in ids},
                                  {c: providers[c](designs[c][0]) for c in ids},
                                  rsets, args.tau, alpha)
    elif backend is Backend.CALIBRATED_FORECAST:
        sd = meta["predictor_sd"]
        cal = fit_calibrator(pred_lab, np.full(pred_lab.shape, sd), y_lab)
        report = calibrated_select(ids, {c: (designs[c][1], sd) for c in ids}, cal, crit,
                                   alpha=alpha)
    else:
        menu = Menu([ConfigurationSpec(cid, dists[cid], None, providers[cid]) for cid in ids])
        gy, gp = crit.g(y_lab), crit.g(pred_lab)
        labeled = {}
        for cid in ids:
            w = providers[cid](x_lab)
            if backend is Backend.SELF_NORMALIZED:
                w = UnnormalizedRatio(dists[cid].log_prob, lab.log_prob)(x_lab)
            labeled[cid] = labeled_columns(gy, gp, w)
        cfg = None
        if backend is Backend.FINITE_SAMPLE:
            cfg = {cid: BoundConfig(ratio_bound=max(1.0, providers[cid].max_ratio * (1 + 1e-12)),
                                    max_alpha=alpha / len(ids))
                   for cid in ids}
        report = select(menu, {c: crit.g(designs[c][1]) for c in ids}, labeled, crit,
                        alpha, backend, cfg)
    text = report.to_json()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(text)
    print("selected:", " ".join(report.selected) if report.selected else "(none)")
    return 0


def cmd_sweep(args):
    cfg = _load_config(args)
    result = harness.sweep_tau(cfg)
    result.write(args.out)
    sys.stdout.write(harness.metrics_to_csv(result.metrics))
    return 0


def cmd_ratios(args):
    meta, (x_lab, _, _), lab, designs, dists = _read_data_dir(args.data)
    ids = meta["ids"]
    L, A = lab.L, lab.A
    exact = {cid: exact_ratio(dists[cid], lab, x_lab) for cid in ids}
    if args.method == "exact":
        est = exact
    elif args.method == "smoothed":
        est = {cid: SmoothedRatio.from_samples(designs[cid][0], x_lab, L, A)(x_lab) for cid in ids}
    else:
        sets = [("labeled", x_lab)] + [(cid, designs[cid][0][:args.per_class]) for cid in ids]
        model = fit_mdre(sets, A)
        est = {cid: mdre_ratio(model, x_lab, cid, "labeled") for cid in ids}
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ratios.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + ids)
        for i in range(x_lab.shape[0]):
            w.writerow([i] + [repr(float(est[c][i])) for c in ids])
    for cid in ids:
        err = np.mean(np.abs(np.log(est[cid]) - np.log(exact[cid])))
        print(f"{cid}\tmean |log ratio error| = {err:.4g}")
    return 0


def cmd_report(args):
    records = harness.read_records(args.records)
    metrics = harness.summarize(records)
    text = harness.metrics_to_csv(metrics)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="designselect", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, trials=False):
        p.add_argument("--config", help="experiment config (YAML)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--alpha", type=float, help="error level (default 0.1)")
        p.add_argument("--backend", action="append",
                       help="backend name; repeat or comma-separate for several")
        if trials:
            p.add_argument("--trials", type=int, help="number of trials")

    p = sub.add_parser("simulate", help="generate an instance and its datasets")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", help="one selection run from a simulate output directory")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--gamma", type=float, help="use the exceedance criterion at gamma")
    p.add_argument("--out")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("sweep", help="multi-trial experiment over a tau range")
    common(p, trials=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ratios", help="evaluate or fit density ratios on labeled inputs")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["exact", "smoothed", "mdre"], default="exact")
    p.add_argument("--per-class", type=int, default=5000,
                   help="design sequences per class for MDRE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ratios)

    p = sub.add_parser("report", help="recompute summary metrics from raw records")
    p.add_argument("--records", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
