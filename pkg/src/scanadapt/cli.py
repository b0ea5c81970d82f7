"""Command-line entry point: ``python3 -m scanadapt <subcommand>``.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, InputError, NumericError
from .harness import (Dataset, ExperimentConfig, baseline_config, bench, build_dataset,
                      run_adapt, run_eval, run_pretrain, reconstruct_scan, split_labels)
from .mesh import read_points, write_mesh

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(s):
    v = int(s)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--precision", choices=("f32", "f64"), help="scalar precision")
    common.add_argument("--threads", type=_positive,
                        help="BLAS threads (default 1; more than 1 voids bit-exact reproducibility)")
    common.add_argument("--data-dir", help="dataset directory (overrides config)")
    common.add_argument("--run-dir", help="run directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="scanadapt", description="Scan-to-shape reconstruction with domain adaptation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build-data", parents=[common], help="generate shapes, scans and labels")
    s.add_argument("--force", action="store_true", help="replace an existing dataset")
    s.add_argument("--n-per-category", type=_positive)

    s = sub.add_parser("split", parents=[common], help="print the nested labeled splits")
    s.add_argument("--fractions", type=float, nargs="+", default=None)

    s = sub.add_parser("pretrain", parents=[common], help="train g_s and the decoder on source data")
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", type=Path)

    s = sub.add_parser("adapt", parents=[common], help="joint adaptation stage")
    s.add_argument("--pretrained", type=Path, help="default: <run_dir>/checkpoints/pretrain.ckpt")
    s.add_argument("--steps", type=int)
    s.add_argument("--mode", help="fusion mode")
    s.add_argument("--augmentation")
    s.add_argument("--no-vcst", action="store_true")
    s.add_argument("--baseline", action="store_true",
                   help="naive baseline: source-only mode without self-training")
    s.add_argument("--resume", type=Path)

    s = sub.add_parser("reconstruct", parents=[common], help="single scan to mesh file")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--scan", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--mode")
    s.add_argument("--domain", choices=("source", "target"), default="target")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    s.add_argument("--checkpoint", type=Path, help="default: <run_dir>/checkpoints/adapt.ckpt")
    s.add_argument("--mode")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s = sub.add_parser("bench", parents=[common], help="timing report")
    s.add_argument("--repeats", type=_positive, default=3)
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    over = {}
    for key in ("seed", "precision", "threads", "data_dir", "run_dir"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    return cfg.replace(**over) if over else cfg


def _cmd_build(cfg, args):
    if args.n_per_category:
        cfg = cfg.replace(n_per_category=args.n_per_category)
    path = build_dataset(cfg, overwrite=args.force)
    print(f"manifest={path}")


def _cmd_split(cfg, args):
    data = Dataset(cfg.data_dir)
    fr = tuple(args.fractions) if args.fractions else cfg.label_fractions()
    targets = {}
    for r in data.records:
        if r.domain == "target":
            targets.setdefault(r.category, []).append(r.sample_id)
    sys.stdout.write(split_labels(targets, fr, cfg.seed).to_json())


def _cmd_pretrain(cfg, args):
    if args.steps is not None:
        cfg = cfg.replace(pretrain_steps=args.steps)
    print(f"checkpoint={run_pretrain(cfg, args.resume)}")


def _cmd_adapt(cfg, args):
    over = {}
    if args.steps is not None:
        over["adapt_steps"] = args.steps
    if args.mode:
        over["fusion_mode"] = args.mode
    if args.augmentation:
        over["augmentation"] = args.augmentation
    if args.no_vcst:
        over["vcst"] = False
    cfg = cfg.replace(**over) if over else cfg
    pre = args.pretrained or Path(cfg.run_dir) / "checkpoints" / "pretrain.ckpt"
    if args.baseline:
        cfg = baseline_config(cfg, cfg.run_dir)
    print(f"checkpoint={run_adapt(cfg, pre, args.resume)}")


def _cmd_reconstruct(cfg, args):
    mesh = reconstruct_scan(cfg, args.checkpoint, read_points(args.scan), args.mode, args.domain)
    write_mesh(args.out, mesh)
    print(f"vertices={len(mesh.vertices)} triangles={len(mesh.triangles)} out={args.out}")


def _cmd_eval(cfg, args):
    ckpt = args.checkpoint or Path(cfg.run_dir) / "checkpoints" / "adapt.ckpt"
    result, path = run_eval(cfg, ckpt, args.mode)
    sys.stdout.write(result.render())
    print(f"table={path}")


def _cmd_gradcheck(cfg, args):
    from .verify import TOLERANCE, run_all

    worst = 0.0
    for name, err, secs in run_all():
        worst = max(worst, err)
        print(f"check={name} max_rel_err={err:.3e} seconds={secs:.2f} "
              f"{'ok' if err < TOLERANCE else 'FAIL'}")
    print(f"worst={worst:.3e}")
    if worst >= TOLERANCE:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {TOLERANCE}")


def _cmd_bench(cfg, args):
    for k, v in bench(cfg, args.repeats).items():
        print(f"{k}_s={v:.4f}")


COMMANDS = {"build-data": _cmd_build, "split": _cmd_split, "pretrain": _cmd_pretrain,
            "adapt": _cmd_adapt, "reconstruct": _cmd_reconstruct, "eval": _cmd_eval,
            "gradcheck": _cmd_gradcheck, "bench": _cmd_bench}


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
