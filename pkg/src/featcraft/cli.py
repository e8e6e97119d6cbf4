"""Command-line entry point: ``featcraft <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Stages communicate through files in ``--out``: split files from ``gen-data``,
``models.fcn`` from ``pretrain``/``train-task``, ``features.npy`` from
``craft`` and CSV tables from the rest.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .crafter import craft, craft_z

log = logging.getLogger("featcraft")


def _config(args) -> harness.ExperimentConfig:
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    cfg = harness.load_config(args.config, overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def cmd_gen_data(cfg, args) -> int:
    split = harness.make_data(cfg)
    harness.save_data(split, cfg.out_dir)
    print(f"public {len(split.x_pub)}  train {len(split.x_train)}  test {len(split.x_test)} -> {cfg.out_dir}")
    return 0


def _split(cfg):
    out = Path(cfg.out_dir)
    if (out / harness.SPLIT_FILES["x_pub"]).exists():
        return harness.load_data(out)
    return harness.make_data(cfg)


def cmd_pretrain(cfg, args) -> int:
    prep = harness.pretrain_stage(cfg, _split(cfg))
    harness.save_prepared(prep, cfg.out_dir)
    print(f"wgan final critic gap {prep.reports['wgan'].losses[-1]:.4g}; autoencoder loss {prep.reports['autoencoder'].losses[-1]:.4g}")
    return 0


def cmd_train_task(cfg, args) -> int:
    prep = harness.task_stage(harness.load_prepared(cfg, cfg.out_dir))
    harness.save_prepared(prep, cfg.out_dir)
    print(f"task AUC on held-out private images {prep.reports['task'].final_metric:.4f}")
    return 0


def cmd_craft(cfg, args) -> int:
    prep = harness.load_prepared(cfg, cfg.out_dir)
    x = getattr(prep.split, f"x_{args.split}").flat
    ccfg = replace(cfg.craft, beta=args.beta, seed=cfg.seed)
    fn = craft if args.method == "craft" else craft_z
    out = fn(prep.bundle.enc, prep.bundle.gen, x, ccfg, rng=np.random.default_rng(cfg.seed))
    np.save(Path(cfg.out_dir) / "features.npy", out.features)
    if out.trajectory:
        harness.write_trajectory(out.trajectory, Path(cfg.out_dir) / "trajectory.csv")
    print(f"crafted {len(x)} features (beta={args.beta}, method={args.method})")
    return 0


def cmd_attack(cfg, args) -> int:
    prep = harness.load_prepared(cfg, cfg.out_dir)
    x, ids, attrs = prep.split.x_test.flat, prep.split.x_test.ids, prep.split.x_test.attrs
    path = Path(args.features) if args.features else Path(cfg.out_dir) / "features.npy"
    feats = np.load(path) if path.exists() else prep.bundle.enc.predict(x)
    if len(feats) != len(x):
        print(f"error: {path} holds {len(feats)} rows, test split has {len(x)}", file=sys.stderr)
        return 2
    from .pii import utility_score

    attacks = args.attacks.split(",") if args.attacks else cfg.attacks
    metrics = harness.evaluate_features(prep, feats, x, ids, utility_score(prep.bundle.task_head, feats, attrs), attacks, seed=cfg.seed)
    rec = harness.TradeoffRecord("crafter" if path.exists() else "none", cfg.scenario, args.beta, cfg.seed, metrics)
    harness.export_records([rec], Path(cfg.out_dir) / "attack.csv")
    print(f"{len(x)} private test images (epsilon sample count)")
    for a, m in metrics.items():
        print(f"{a:7s} eval_acc {m.eval_acc:.3f} ssim {m.ssim:.3f} fsim {m.fsim:.3f} eps {m.epsilon:.5f} auc {m.utility:.4f}")
    return 0


def cmd_sweep(cfg, args) -> int:
    out = Path(cfg.out_dir)
    prep = harness.load_prepared(cfg, out) if (out / "models.fcn").exists() and not args.fresh else harness.prepare(cfg, _split(cfg))
    if cfg.scenario == "deployment":
        records = harness.run_deployment_pipeline(cfg, prep)
    else:
        records = harness.run_development_pipeline(cfg, prep)
    harness.export_records(records, out / f"sweep_{cfg.scenario}.csv")
    print(f"{len(records)} records -> {out / f'sweep_{cfg.scenario}.csv'}")
    return 0


def cmd_adaptive(cfg, args) -> int:
    out = Path(cfg.out_dir)
    prep = harness.load_prepared(cfg, out) if (out / "models.fcn").exists() else harness.prepare(cfg, _split(cfg))
    res = harness.adaptive_robustness_experiment(cfg, prep, out_dir=out, include_a3=not args.no_a3)
    for k, v in res.verdicts.items():
        print(f"{k}: {'yes' if v else 'no'}")
    return 0


def summarize(path) -> list[tuple]:
    """Mean metrics per (defense, scenario, beta, attack) over seeds."""
    groups: dict[tuple, list[list[float]]] = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["defense"], row["scenario"], float(row["beta"]), row["attack"])
            groups[key].append([float(row[c]) for c in ("utility_auc", "eval_acc", "ssim", "fsim", "epsilon")])
    rows = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], math.inf if math.isnan(k[2]) else k[2], k[3])):
        vals = np.array(groups[key])
        rows.append((*key, len(vals), *np.mean(vals, axis=0)))
    return rows


def cmd_report(cfg, args) -> int:
    paths = [Path(p) for p in args.csv] or sorted(Path(cfg.out_dir).glob("sweep_*.csv"))
    if not paths:
        print(f"error: no sweep CSVs in {cfg.out_dir}", file=sys.stderr)
        return 2
    print(f"{'defense':12s} {'scenario':12s} {'beta':>6s} {'attack':7s} {'n':>2s} {'auc':>7s} {'acc':>6s} {'ssim':>6s} {'fsim':>6s} {'eps':>9s}")
    for p in paths:
        for d, sc, beta, atk, n, auc, acc, ss, fs, eps in summarize(p):
            print(f"{d:12s} {sc:12s} {beta:6g} {atk:7s} {n:2d} {auc:7.4f} {acc:6.3f} {ss:6.3f} {fs:6.3f} {eps:9.5f}")
    return 0


HELP = {
    "gen-data": "generate and split the synthetic face dataset",
    "pretrain": "train the prior generator and the general-purpose autoencoder",
    "train-task": "train the task model, black-box decoder, identity oracle and amortizer",
    "craft": "craft protected features for one split",
    "attack": "run inversion attacks on saved or unprotected features",
    "sweep": "run the beta sweep for the configured scenario",
    "adaptive": "run the adaptive (A1, A3) robustness experiment",
    "report": "summarise sweep CSVs as per-beta means",
}

COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-task": cmd_train_task,
    "craft": cmd_craft,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "adaptive": cmd_adaptive,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="experiment seed (non-negative)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="featcraft", description="Feature crafting against model inversion on synthetic faces.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
        if name == "craft":
            sp.add_argument("--beta", type=float, default=1.0)
            sp.add_argument("--method", choices=("craft", "craft-z"), default="craft")
            sp.add_argument("--split", choices=("test", "train"), default="test")
        elif name == "attack":
            sp.add_argument("--features", help="features .npy (default: OUT/features.npy, else unprotected)")
            sp.add_argument("--attacks", help="comma-separated subset of white,black,hybrid,a2")
            sp.add_argument("--beta", type=float, default=float("nan"), help="beta recorded in the CSV row")
        elif name == "sweep":
            sp.add_argument("--fresh", action="store_true", help="retrain models even if OUT/models.fcn exists")
        elif name == "adaptive":
            sp.add_argument("--no-a3", action="store_true")
        elif name == "report":
            sp.add_argument("csv", nargs="*")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except harness.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing input {exc.filename}; run the earlier stage first", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
