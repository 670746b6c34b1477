"""Command line front end.

Four subcommands cover the pipeline: gen-data builds a synthetic benchmark
file, train runs the full schedule on it, eval scores checkpoints on a
split, purify-report fits the score mixture for a checkpoint and writes
the report.  Exit codes: 0 success, 1 bad usage or config, 2 runtime
failure (malformed files, numeric aborts).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import datagen, evalkit, model, purifier
from .meta_loop import TrainConfig, fit_purifier, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

_SECTIONS = ("data", "noise", "train")
_NOISE_KEYS = frozenset({"ratio", "seed"})


class ConfigError(ValueError):
    """Config file or command line arguments are unusable."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; route them through
    # ConfigError so bad usage lands on exit code 1 like other config trouble
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _field_names(cls) -> frozenset:
    return frozenset(f.name for f in dataclasses.fields(cls))


def load_config(path) -> dict:
    """Strict loader: unknown sections or keys are errors, not surprises."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)} "
                          f"(expected subset of {list(_SECTIONS)})")
    allowed = {"data": _field_names(datagen.GenConfig),
               "noise": _NOISE_KEYS,
               "train": _field_names(TrainConfig)}
    for section, keys in allowed.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        bad = set(body) - keys
        if bad:
            raise ConfigError(f"unknown keys in config section {section!r}: "
                              f"{sorted(bad)}")
    return raw


def build_gen_config(cfg: dict, seed=None) -> datagen.GenConfig:
    try:
        gc = datagen.GenConfig(**cfg.get("data", {}))
        if seed is not None:
            gc = dataclasses.replace(gc, seed=int(seed))
        gc.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad data config: {e}")
    return gc


def build_train_config(cfg: dict, seed=None, mode=None) -> TrainConfig:
    try:
        body = dict(cfg.get("train", {}))
        if "eval_ks" in body:
            body["eval_ks"] = tuple(int(k) for k in body["eval_ks"])
        tc = TrainConfig(**body)
        if seed is not None:
            tc = dataclasses.replace(tc, seed=int(seed))
        if mode is not None:
            tc = dataclasses.replace(tc, mode=mode)
        tc.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train config: {e}")
    return tc


def noise_spec(cfg: dict, ratio=None, seed=None):
    body = cfg.get("noise", {})
    out_ratio = float(body.get("ratio", 0.0) if ratio is None else ratio)
    out_seed = int(body.get("seed", 1) if seed is None else seed)
    if not 0.0 <= out_ratio < 1.0:
        raise ConfigError(f"noise ratio must lie in [0, 1), got {out_ratio}")
    return out_ratio, out_seed


def _load_maybe_config(args) -> dict:
    return load_config(args.config) if args.config else {}


def cmd_gen_data(args) -> int:
    cfg = _load_maybe_config(args)
    gc = build_gen_config(cfg, seed=args.seed)
    ratio, noise_seed = noise_spec(cfg, args.noise_ratio, args.noise_seed)
    ds = datagen.generate(gc)
    if ratio > 0:
        ds = datagen.inject_noise(ds, ratio, noise_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.mscd"
    datagen.write_dataset(path, ds)
    corrupted = int(np.sum(~ds.train.clean))
    print(f"wrote {path}")
    for name, split in ds.splits():
        print(f"  {name}: {len(split)} pairs")
    print(f"  corrupted train pairs: {corrupted} (ratio {ratio})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_maybe_config(args)
    tc = build_train_config(cfg, seed=args.seed, mode=args.mode)
    ds = datagen.read_dataset(args.data)
    out = Path(args.out)
    result = train(ds, tc, out_dir=out)
    print(f"trained {tc.warmup_epochs + tc.epochs} epochs "
          f"({tc.mode}); best val rsum {result.best_rsum:.17g} "
          f"at epoch {result.best_epoch}")
    scorer = "mscn" if tc.mode == "mscn" else "cosine"
    # test numbers come from the best-validation checkpoint, not the last epoch
    report = evalkit.evaluate(result.best_nets, ds.test, ks=tc.eval_ks,
                              scorer=scorer, threads=args.threads)
    (out / "test_report.tsv").write_text(report.format_kv(), encoding="utf-8")
    print(report.format_text())
    print(f"outputs in {out}")
    return EXIT_OK


def _load_models(paths):
    return [model.load_checkpoint(p) for p in paths]


def cmd_eval(args) -> int:
    ds = datagen.read_dataset(args.data)
    split = dict(ds.splits())[args.split]
    models = _load_models(args.checkpoint)
    ks = tuple(int(k) for k in args.ks.split(","))
    report = evalkit.evaluate(models, split, ks=ks, scorer=args.scorer,
                              threads=args.threads)
    print(report.format_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(report.format_kv(), encoding="utf-8")
        print(f"wrote {out / 'report.tsv'}")
    return EXIT_OK


def cmd_purify_report(args) -> int:
    ds = datagen.read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for idx, path in enumerate(args.checkpoint, start=1):
        main_p, meta_p = model.load_checkpoint(path)
        net = SimpleNamespace(main=main_p, meta=meta_p)
        admitted, fit, scores = fit_purifier(net, ds.train, ds.meta,
                                             seed=args.seed, epoch=0,
                                             net_idx=idx - 1)
        report_path = out / f"purifier_net{idx}.tsv"
        purifier.write_report(report_path, fit, scores, ds.train.clean)
        clean, noisy = fit.mixture.means()
        print(f"net {idx}: admitted {admitted.size}/{scores.size} pairs; "
              f"component means clean {clean:.4f} noisy {noisy:.4f}; "
              f"{fit.iterations} EM iterations")
        print(f"wrote {report_path}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="mscn", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark file")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the generation seed")
    p.add_argument("--noise-ratio", type=float,
                   help="fraction of train pairs to corrupt")
    p.add_argument("--noise-seed", type=int, help="corruption seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a benchmark file")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", required=True, help="dataset file (.mscd)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--mode", choices=["mscn", "fixed_margin_baseline"],
                   help="override the training mode")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a split")
    p.add_argument("--data", required=True, help="dataset file (.mscd)")
    p.add_argument("--checkpoint", required=True, action="append",
                   help="checkpoint file; repeat to average networks")
    p.add_argument("--split", default="test", choices=list(datagen.SPLIT_NAMES))
    p.add_argument("--scorer", default="mscn", choices=["mscn", "cosine"])
    p.add_argument("--ks", default="1,5,10", help="comma-separated cutoffs")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", help="directory for report.tsv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("purify-report",
                       help="fit the score mixture for checkpoints")
    p.add_argument("--data", required=True, help="dataset file (.mscd)")
    p.add_argument("--checkpoint", required=True, action="append",
                   help="checkpoint file; repeat for several networks")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for constructed negative pairs")
    p.set_defaults(func=cmd_purify_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        # config problems (bad JSON, unknown keys, invalid values) exit 1;
        # anything that breaks after a valid config exits 2
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, ValueError, OSError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
