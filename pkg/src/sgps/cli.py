"""``sgps`` command-line entry point: gen, train, eval, ablate."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from sgps import config as cfgmod
from sgps.datagen import (
    DatasetParseError,
    gen_mixture,
    inject_small_cluster,
    inject_symmetric,
    read_dataset,
    write_dataset,
)
from sgps.numkit import ModelFormatError, load_model, save_model
from sgps.trainer import NumericalError, SGPSTrainer, evaluate

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(kind):
    def parse(text):
        items = [s.strip() for s in text.split(",") if s.strip()]
        try:
            return [kind(s) for s in items]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}") from None
    return parse


# flag name -> config key, for the training overrides shared by train and ablate
_TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "warmup_epochs": int,
    "tau": float, "delta": float, "gamma1": float, "gamma2": float, "K": int,
    "ppm_mode": str, "sgm_sources": str, "sgm_worker": str, "pcs": None,
}


def _add_common(p, out_required=True):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="flat 'key = value' file")
    p.add_argument("--out", required=out_required)


def _add_train_flags(p, skip=()):
    for key, kind in _TRAIN_FLAGS.items():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        if kind is None:
            p.add_argument(flag, dest=key, default=None, type=lambda s: cfgmod.parse_value("pcs", s))
        else:
            p.add_argument(flag, dest=key, type=kind, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser():
    parser = _Parser(prog="sgps", description="Noise-robust metric learning on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a labelled mixture dataset")
    _add_common(g)
    g.add_argument("--classes-train", type=int, default=20)
    g.add_argument("--classes-test", type=int, default=20)
    g.add_argument("--per-class", type=int, default=30)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--spread", type=float, default=0.08)
    g.add_argument("--noise", choices=("none", "symmetric", "small-cluster"), default="none")
    g.add_argument("--rate", type=float, default=0.0)
    g.add_argument("--cluster-size", type=int, default=5)

    t = sub.add_parser("train", help="train and write results.jsonl + model.bin")
    _add_common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--sgm-dump", default=None, help="append subgroup snapshots to this CSV")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="retrieval metrics of a saved model on a dataset split")
    _add_common(e, out_required=False)
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")

    a = sub.add_parser("ablate", help="grid over subgroup sources, prototype modes and loss values")
    _add_common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--sgm", type=_csv_list(str), default=["both", "B", "T"])
    a.add_argument("--ppm", type=_csv_list(str), default=["softmax", "max", "mean"])
    a.add_argument("--taus", type=_csv_list(float), default=None)
    a.add_argument("--deltas", type=_csv_list(float), default=None)
    a.add_argument("--gamma1s", type=_csv_list(float), default=None)
    a.add_argument("--gamma2s", type=_csv_list(float), default=None)
    _add_train_flags(a, skip=("ppm_mode", "sgm_sources", "tau", "delta", "gamma1", "gamma2"))
    return parser


def _read_text(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _resolve_config(args):
    overrides = {}
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = cfgmod.parse_value(key.strip(), value)
    for key in _TRAIN_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    text = _read_text(args.config) if args.config else None
    return cfgmod.build_config(text, overrides)


def _dumps(obj):
    return json.dumps(obj, sort_keys=False, allow_nan=False)


def cmd_gen(args):
    if args.noise != "none" and not 0.0 <= args.rate < 1.0:
        raise UsageError(f"--rate must lie in [0, 1), got {args.rate}")
    if args.noise == "none" and args.rate != 0.0:
        raise UsageError("--rate requires --noise symmetric or small-cluster")
    if min(args.classes_train, args.per_class, args.dim) < 1 or args.classes_test < 0 or args.spread < 0:
        raise UsageError("class counts, --per-class and --dim must be positive, --spread non-negative")
    seed = args.seed if args.seed is not None else 0
    try:
        ds = gen_mixture(args.classes_train, args.classes_test, args.per_class, args.dim, args.spread, seed)
        if args.noise == "symmetric":
            ds = inject_symmetric(ds, args.rate, seed)
        elif args.noise == "small-cluster":
            ds = inject_small_cluster(ds, args.rate, args.cluster_size, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_dataset(ds, args.out)
    print(f"N={ds.N} M={ds.M} noise_rate={ds.noise_rate():.6f}")
    return EXIT_OK


def _train_one(ds, cfg, sgm_dump=None):
    trainer = SGPSTrainer(ds, cfg, sgm_dump=sgm_dump)
    reports = trainer.run()
    return trainer, reports


def cmd_train(args):
    cfg = _resolve_config(args)
    ds = read_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    results = os.path.join(args.out, "results.jsonl")
    with open(results, "w", encoding="utf-8") as fh:
        fh.write(_dumps({"config": asdict(cfg)}) + "\n")
        fh.flush()

        def emit(report):
            fh.write(_dumps(report.to_dict()) + "\n")
            fh.flush()

        trainer = SGPSTrainer(ds, cfg, sgm_dump=args.sgm_dump)
        trainer.run(emit)
    save_model(trainer.net, os.path.join(args.out, "model.bin"))
    last = trainer.reports[-1] if trainer.reports else None
    if last is not None:
        print(f"epochs={last.epoch} p_at_1={last.p_at_1:.4f} map_at_r={last.map_at_r:.4f}")
    return EXIT_OK


def cmd_eval(args):
    ds = read_dataset(args.data)
    net = load_model(args.model)
    mask = {"test": ~ds.is_train, "train": ds.is_train, "all": np.ones(ds.N, dtype=bool)}[args.split]
    if net.d_in != ds.D:
        raise UsageError(f"model expects {net.d_in} features, dataset has {ds.D}")
    m = evaluate(net.forward(ds.X[mask]), ds.gt_labels[mask])
    out = {"split": args.split, "n": int(mask.sum()), "p_at_1": m.p_at_1, "r_precision": m.r_precision,
           "map_at_r": m.map_at_r, "r_valid": m.r_valid}
    text = _dumps(out) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


ABLATE_COLUMNS = ("cell", "sgm_sources", "ppm_mode", "tau", "delta", "gamma1", "gamma2", "p_at_1", "map_at_r")


def cmd_ablate(args):
    base = _resolve_config(args)
    axes = [
        args.sgm, args.ppm,
        args.taus if args.taus is not None else [base.tau],
        args.deltas if args.deltas is not None else [base.delta],
        args.gamma1s if args.gamma1s is not None else [base.gamma1],
        args.gamma2s if args.gamma2s is not None else [base.gamma2],
    ]
    if any(len(ax) == 0 for ax in axes):
        raise UsageError("ablation grid is empty")
    cells = []
    for combo in itertools.product(*axes):
        src, mode, tau, delta, g1, g2 = combo
        try:
            cells.append(base.replace(sgm_sources=src, ppm_mode=mode, tau=tau, delta=delta, gamma1=g1, gamma2=g2))
        except ValueError as exc:
            raise UsageError(f"invalid grid value: {exc}") from None
    ds = read_dataset(args.data)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATE_COLUMNS)
        for i, cfg in enumerate(cells):
            _, reports = _train_one(ds, cfg)
            last = reports[-1] if reports else None
            p1 = last.p_at_1 if last else float("nan")
            mapr = last.map_at_r if last else float("nan")
            writer.writerow([i, cfg.sgm_sources, cfg.ppm_mode, cfg.tau, cfg.delta, cfg.gamma1, cfg.gamma2,
                             repr(p1), repr(mapr)])
            fh.flush()
            print(f"cell {i}: sources={cfg.sgm_sources} ppm={cfg.ppm_mode} tau={cfg.tau} p_at_1={p1:.4f}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetParseError, ModelFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError, ValueError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
