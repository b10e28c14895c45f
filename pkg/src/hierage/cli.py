"""Command-line entry point: ``hierage <subcommand> [options]``.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import matrix, run_ablation
from .autodiff import ContractError, NumericError
from .bias import GROUPINGS, PredictionsFormatError, error_histogram, group_report
from .data import DatasetFormatError, generate_dataset, read_dataset, write_dataset
from .estimator import HierarchicalAgeRegressor
from .selfcheck import TERMS, gradient_errors
from .train import (ConfigError, evaluate, load_config, load_or_generate, manifest,
                    synthetic_config, train, write_json, write_predictions)

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Bad command line; reported with usage text and exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. training.epochs=5 (repeatable)")
    p.add_argument("--quick", action="store_true", help="shrunken preset for smoke runs")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hierage", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    _common(p)

    p = sub.add_parser("train", help="train on a split and evaluate the held-out part")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset CSV (default: regenerate from the config)")
    p.add_argument("--eval-views", type=int, help="views per sample at test time")

    p = sub.add_parser("ablate", help="run the ablation matrix")
    _common(p)
    p.add_argument("--seeds", type=int, default=None,
                   help="number of seeds per cell (default 5, or 1 with --quick)")

    p = sub.add_parser("bias", help="per-group error report from predictions.csv")
    p.add_argument("predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--grouping", action="append", choices=GROUPINGS,
                   help="grouping to report (repeatable; default all)")
    p.add_argument("--age-bin-width", type=float, default=5.0)
    p.add_argument("--age-anchor", type=float)
    p.add_argument("--ddof", type=int, choices=(0, 1), default=0)
    p.add_argument("--hist-bin-width", type=float, default=1.0)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--l2-mode", choices=("soft", "hard"), default="soft")
    p.add_argument("--out")
    return parser


def _config(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides, quick=args.quick)


def _out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> None:
    cfg = _config(args)
    out = _out(args.out)
    sc = synthetic_config(cfg)
    ds = generate_dataset(sc)
    write_dataset(ds, out / "dataset.csv")
    write_json(out / "manifest.json", manifest(cfg, "synth", n_samples=len(ds)))
    print(f"wrote {len(ds)} samples to {out / 'dataset.csv'}")


def cmd_train(args) -> None:
    cfg = _config(args)
    result = train(cfg, args.out)
    print(f"held-out MAE {result.val_mae:.4f} ({len(result.test_set)} samples); "
          f"outputs in {args.out}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    out = _out(args.out)
    est = HierarchicalAgeRegressor.load(args.checkpoint)
    if args.eval_views is not None:
        est.eval_views = args.eval_views
    ds = read_dataset(args.data) if args.data else load_or_generate(cfg)
    ev = evaluate(est, ds)
    write_predictions(ev, out / "predictions.csv")
    write_json(out / "manifest.json", manifest(
        cfg, "eval", checkpoint=str(args.checkpoint), data=args.data,
        eval_views=est.eval_views, n_samples=len(ds), mae=ev.mae))
    print(f"MAE {ev.mae:.4f} over {len(ds)} samples")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    out = _out(args.out)
    n_seeds = args.seeds if args.seeds is not None else (1 if args.quick else 5)
    if n_seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    seeds = [cfg["seed"] + i for i in range(n_seeds)]
    cells = matrix(cfg, quick=args.quick)
    t0 = time.perf_counter()
    _, summary = run_ablation(cfg, cells, seeds, out, log=print)
    write_json(out / "manifest.json", manifest(
        cfg, "ablate", seeds=seeds, cells=[c.setting for c in cells],
        runtime_s=round(time.perf_counter() - t0, 1)))
    for row in summary:
        print(f"{row['table']:>13} | {row['setting']:<18} MAE {row['mae']:.4f}")


def cmd_bias(args) -> None:
    out = _out(args.out)
    groupings = args.grouping or list(GROUPINGS)
    for g in groupings:
        report = group_report(args.predictions, g, args.age_bin_width, args.age_anchor, args.ddof)
        (out / f"bias_{g}.csv").write_text(report.to_csv())
        (out / f"bias_{g}.txt").write_text(report.to_text())
        print(report.to_text())
    hist = error_histogram(args.predictions, args.hist_bin_width)
    (out / "error_histogram.csv").write_text(hist.to_csv())
    (out / "error_within.csv").write_text(hist.within_csv())
    write_json(out / "manifest.json", {
        "command": "bias", "predictions": str(args.predictions), "groupings": groupings,
        "age_bin_width": args.age_bin_width, "age_anchor": args.age_anchor, "ddof": args.ddof,
        "hist_bin_width": args.hist_bin_width,
        "versions": {"hierage": __version__, "numpy": np.__version__}})


def cmd_gradcheck(args) -> int:
    if not 1e-7 <= args.eps <= 1e-4:
        raise ConfigError("--eps must lie in [1e-7, 1e-4]")
    errors = gradient_errors(args.seed, args.eps, args.l2_mode)
    ok = all(errors[t] < GRADCHECK_TOL for t in TERMS)
    for t in TERMS:
        flag = "ok" if errors[t] < GRADCHECK_TOL else "FAIL"
        print(f"{t:<6} max relative error {errors[t]:.3e}  {flag}")
    if args.out:
        write_json(_out(args.out) / "manifest.json", {
            "command": "gradcheck", "seed": args.seed, "eps": args.eps, "l2_mode": args.l2_mode,
            "errors": errors, "tolerance": GRADCHECK_TOL, "passed": ok,
            "versions": {"hierage": __version__, "numpy": np.__version__}})
    return 0 if ok else 2


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "bias": cmd_bias, "gradcheck": cmd_gradcheck}

_VALIDATION = (ConfigError, DatasetFormatError, PredictionsFormatError, FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        code = COMMANDS[args.command](args)
    except _VALIDATION as exc:
        print(f"hierage {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ContractError, ValueError, OSError, RuntimeError) as exc:
        print(f"hierage {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
