"""Command-line entry point: ``idealrec {train,build-mrd,train-detector,sweep,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .metrics import read_csv
from .runner import ConfigError, ExperimentConfig, StageError, run, validate

STOP = {"train": "train", "build-mrd": "build-mrd", "train-detector": "train-detector", "sweep": None}


def _overrides(args) -> dict[str, str]:
    o = {}
    if args.budget is not None:
        o["sweep.budgets"] = args.budget
    if args.policy is not None:
        o["policy.list"] = args.policy
    if args.seed is not None:
        o["sweep.seeds"] = args.seed
    if args.out is not None:
        o["out"] = args.out
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        o[k.strip()] = v.strip()
    return o


def summarize(path: str | Path) -> str:
    """Mean metrics per (policy, budget) over seeds, plus budget/AUC Spearman per detector curve."""
    rows = read_csv(path)
    groups = defaultdict(list)
    for r in rows:
        groups[(r["policy"], float(r["budget"]))].append(r)
    lines = [f"{'policy':<14} {'budget':>6} {'freq':>6} {'auc':>7} {'uauc':>7} {'ndcg@10':>8} {'hr@10':>6} seeds"]
    for (pol, b), rs in sorted(groups.items()):
        m = {k: np.mean([float(r[k]) for r in rs]) for k in ("realized_freq", "auc", "uauc", "ndcg@10", "hr@10")}
        lines.append(f"{pol:<14} {b:6.2f} {m['realized_freq']:6.3f} {m['auc']:7.4f} {m['uauc']:7.4f} "
                     f"{m['ndcg@10']:8.4f} {m['hr@10']:6.3f} {len(rs)}")
    by_curve = defaultdict(list)
    for r in rows:
        if r["policy"].startswith("ideal"):
            by_curve[(r["policy"], r["seed"])].append((float(r["budget"]), float(r["auc"])))
    rho = defaultdict(list)
    for (pol, _), pts in by_curve.items():
        b, a = zip(*sorted(pts))
        if len(set(a)) > 1:
            rho[pol].append(spearmanr(b, a)[0])
    for pol, vals in sorted(rho.items()):
        lines.append(f"spearman(budget, auc) {pol}: mean {np.mean(vals):.3f} over {len(vals)} seeds")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="idealrec", description="Device-cloud parameter-request experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    for name, help_ in (("train", "train backbone and generator"),
                        ("build-mrd", "train, then build the detector dataset"),
                        ("train-detector", "train, build dataset, train detectors and mappers"),
                        ("sweep", "full pipeline: every stage plus budget sweep and revenue")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--budget", help="comma-separated budgets, e.g. 0,0.1,0.5,1")
        sp.add_argument("--policy", help="comma-separated policy names")
        sp.add_argument("--seed", help="comma-separated seeds")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config override")
        sp.add_argument("--check", action="store_true", help="validate the config and exit")
    rp = sub.add_parser("report", help="summarize a curves CSV")
    rp.add_argument("path", help="curves.csv or a run directory")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")

    if args.cmd == "report":
        path = Path(args.path)
        if path.is_dir():
            path = path / "curves.csv"
        if not path.exists():
            print(f"report: {path} not found", file=sys.stderr)
            return 2
        print(summarize(path))
        return 0

    try:
        cfg = ExperimentConfig.load(args.config, _overrides(args))
    except (ConfigError, OSError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return 2
    diags = validate(cfg)
    if diags:
        for d in diags:
            print(f"config: {d}", file=sys.stderr)
        return 2
    if args.check:
        print("config ok")
        return 0
    try:
        manifest = run(cfg, STOP[args.cmd])
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.cmd}: {manifest['status']} -> {cfg.out}")
    if args.cmd == "sweep":
        print(summarize(Path(cfg.out) / "curves.csv"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
