"""Command line: ``lsakit {train,lsa,eval,boundary,repro}``.

Exit codes: 0 success, 2 invalid configuration, 3 training diverged,
4 checkpoint does not match the configured model, 5 decision boundary
requested for a model without 2-D inputs, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as C
from . import pipeline as P
from .checkpoint import CheckpointError
from .evaluation import BoundaryError, export_report
from .training import TrainingDivergedError

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_NOT_2D = 0, 1, 2, 3, 4, 5


def _config(args) -> C.RunConfig:
    if args.config:
        cfg = C.load(args.config)
    else:
        cfg = C.preset(getattr(args, "suite", None) or "moon")
    if getattr(args, "full", False):
        cfg = C.full_scale(cfg)
    cfg = P.seeded(cfg, args.seed)
    cfg = P.with_output(cfg, args.out)
    C.validate(cfg)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output.dir)
    P.snapshot(cfg, out)
    _, tlog, sha = P.train_stage(cfg, out)
    last = tlog.entries[-1] if tlog.entries else None
    print(f"checkpoint {out / 'model.ckpt'} sha256={sha}")
    if last:
        print(f"epoch {last.epoch}: clean_acc={last.clean_acc:.2f} robust_acc={last.robust_acc:.2f}")
    return EXIT_OK


def cmd_lsa(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output.dir)
    model = P.load_checkpoint(cfg, args.checkpoint)
    P.snapshot(cfg, out)
    train_ds, test_ds = P.load_data(cfg)
    reports = P.lsa_stage(cfg, model, test_ds, train_ds)
    export_report(out, reports=reports)
    for r in reports:
        print(f"{r.label} {r.mvl.format()} (eta={r.stats.eta:g}, mu={r.stats.mu:.6g}, sigma={r.stats.sigma:.6g})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output.dir)
    models = [(Path(p).stem, P.load_checkpoint(cfg, p)) for p in args.checkpoints]
    P.snapshot(cfg, out)
    _, test_ds = P.load_data(cfg)
    grids = [P.eval_stage(cfg, m, test_ds, tag) for tag, m in models]
    export_report(out, grids)
    for g in grids:
        print(f"{g.tag}: " + " ".join(f"{a:.2f}" for a in g.accuracies) + f"  R&G={g.rg:.2f}")
    return EXIT_OK


def cmd_boundary(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output.dir)
    model = P.checkpoint.load(args.checkpoint)
    if model.input_shape != (2,):
        raise BoundaryError(f"{args.checkpoint}: decision boundaries need a model with 2-D inputs, "
                            f"this one takes {model.input_shape}")
    P.check_architecture(cfg, model, args.checkpoint)
    P.snapshot(cfg, out)
    _, test_ds = P.load_data(cfg)
    grid = P.boundary_stage(cfg, model, test_ds)
    written = export_report(out, boundary=grid, boundary_title=f"{Path(args.checkpoint).stem} decision boundary")
    print(f"{len(grid.adv_points)} adversarial points; wrote " + ", ".join(p.name for p in written))
    return EXIT_OK


def cmd_repro(args) -> int:
    if args.config is None:
        cfg = C.preset(args.suite)
    else:
        cfg = C.load(args.config)
        if args.suite and cfg.repro.suite != args.suite:
            raise C.ConfigError("repro.suite", f"config is for suite {cfg.repro.suite!r}, not {args.suite!r}")
    if args.full:
        cfg = C.full_scale(cfg)
    cfg = P.with_output(P.seeded(cfg, args.seed), args.out)
    C.validate(cfg)
    results = P.repro(cfg, cfg.output.dir, args.jobs)
    for res in sorted(results, key=lambda r: (-r.grid.rg, r.name)):
        print(f"{res.name:<18} R&G={res.grid.rg:8.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsakit", description="Layer sustainability analysis and "
                                     "layer-wise regularized adversarial training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="INI run configuration")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="override every seed in the configuration")

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--full", action="store_true", help="whole training split, 100 epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lsa", help="layer sustainability analysis of a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_lsa)

    p = sub.add_parser("eval", help="robust accuracy grids and leaderboard")
    common(p)
    p.add_argument("checkpoints", nargs="+")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("boundary", help="decision boundary of a 2-D model")
    common(p)
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_boundary)

    p = sub.add_parser("repro", help="run a full experiment suite")
    p.add_argument("suite", nargs="?", choices=("moon", "mnist"))
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="train variants in N parallel processes")
    p.add_argument("--full", action="store_true", help="whole training split, 100 epochs")
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "repro" and args.suite is None and args.config is None:
        parser.error("repro needs a suite name or --config")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except C.ConfigError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (P.ArchitectureMismatch, CheckpointError) as e:
        print(f"error: checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except BoundaryError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOT_2D
    except P.StageError as e:
        cause = e.cause
        print(f"error: {e}", file=sys.stderr)
        if isinstance(cause, TrainingDivergedError):
            return EXIT_DIVERGED
        if isinstance(cause, C.ConfigError):
            return EXIT_CONFIG
        return EXIT_ERROR
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
