"""Command-line interface.

Subcommands: pretrain, linear-probe, knn-eval, export-metrics, gradcheck,
make-data. Any TrainConfig field can be overridden with a dotted flag,
e.g. `--loss.lambda_c 0`.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
"""

import argparse
import sys

import numpy as np

from . import gradcheck as gc
from . import train as train_mod
from .config import load_config
from .data import load_data_dir, make_synthetic_cifar, Dataset
from .errors import ConfigError, DataError, NumericError
from .train import Trainer


def _parse(argv):
    parser = argparse.ArgumentParser(
        prog="dualmim",
        description="Dual-teacher masked-image-modeling pretraining")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--data-dir", default=None)
        p.add_argument("--out", default="run")

    p = sub.add_parser("pretrain", help="run the pretraining pipeline")
    common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--max-iters", type=int, default=None)

    p = sub.add_parser("linear-probe", help="linear probe a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe-epochs", type=int, default=10)
    p.add_argument("--holdout", type=int, default=2000,
                   help="records held out for evaluation")

    p = sub.add_parser("knn-eval", help="kNN-classify on frozen features")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-k", type=int, default=20)
    p.add_argument("--holdout", type=int, default=2000)

    p = sub.add_parser("export-metrics", help="re-emit metrics CSV + summary")
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)

    p = sub.add_parser("make-data", help="write a synthetic CIFAR-format file")
    common(p)
    p.add_argument("--n", type=int, default=12000)

    # dotted config overrides are collected from the unknown remainder
    args, rest = parser.parse_known_args(argv)
    overrides = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not (tok.startswith("--") and "." in tok):
            parser.error(f"unrecognized argument: {tok}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
        else:
            if i + 1 >= len(rest):
                parser.error(f"missing value for {tok}")
            key, val = tok[2:], rest[i + 1]
            i += 1
        overrides[key] = val
        i += 1
    return args, overrides


def _config(args, overrides):
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _split(dataset, holdout):
    if holdout >= len(dataset):
        raise DataError(f"holdout {holdout} >= dataset size {len(dataset)}")
    train = Dataset(labels=dataset.labels[:-holdout],
                    images=dataset.images[:-holdout])
    test = Dataset(labels=dataset.labels[-holdout:],
                   images=dataset.images[-holdout:])
    return train, test


def main(argv=None):
    args, overrides = _parse(argv if argv is not None else sys.argv[1:])
    try:
        if args.command == "pretrain":
            cfg = _config(args, overrides)
            if args.data_dir is None:
                raise DataError("pretrain needs --data-dir")
            ds = load_data_dir(args.data_dir)
            train_mod.pretrain(cfg, ds, args.out, resume=args.resume,
                               max_iters=args.max_iters)
            print(f"done; checkpoint and metrics under {args.out}")

        elif args.command in ("linear-probe", "knn-eval"):
            if args.data_dir is None:
                raise DataError(f"{args.command} needs --data-dir")
            trainer = Trainer.load(args.checkpoint)
            ds = load_data_dir(args.data_dir)
            train_ds, test_ds = _split(ds, args.holdout)
            if args.command == "linear-probe":
                acc = train_mod.linear_probe(
                    trainer.encoder, trainer.cfg.model, train_ds, test_ds,
                    args.probe_epochs, seed=trainer.cfg.seed,
                    augment_cfg=trainer.cfg.augment)
                print(f"linear probe top-1: {acc:.4f}")
            else:
                f_train = train_mod.encode_features(
                    trainer.encoder, trainer.cfg.model, train_ds,
                    trainer.cfg.augment)
                f_test = train_mod.encode_features(
                    trainer.encoder, trainer.cfg.model, test_ds,
                    trainer.cfg.augment)
                acc = train_mod.knn_eval(f_train, train_ds.labels,
                                         f_test, test_ds.labels, args.k)
                print(f"knn top-1 (k={args.k}): {acc:.4f}")

        elif args.command == "export-metrics":
            rows, skipped, _ = train_mod.export_metrics(args.out)
            print(f"exported {rows} rows ({skipped} skipped) to {args.out}")

        elif args.command == "gradcheck":
            if not gc.run_suite(verbose=True):
                return 1

        elif args.command == "make-data":
            cfg = _config(args, overrides)
            if args.data_dir is None:
                raise DataError("make-data needs --data-dir (output file)")
            make_synthetic_cifar(args.data_dir, args.n, cfg.seed)
            print(f"wrote {args.n} synthetic records to {args.data_dir}")

    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
