"""Command-line entry point.

    flowgeom gen-data|train|eval|ablate|scale-study|pseudo3d --config FILE ...

Exit codes: 0 success, 2 configuration error, 3 numerical failure (NaN halt),
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .train import NumericalFailure


def _add_common(p, needs_config=True):
    if needs_config:
        p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowgeom",
                                 description="factored-flow visual geometry experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(g)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    g.add_argument("--num-labeled", type=int, default=None)
    g.add_argument("--num-unlabeled", type=int, default=None)
    g.add_argument("--num-eval", type=int, default=None)
    g.add_argument("--dynamic-frac", type=float, default=None)

    t = sub.add_parser("train", help="train one variant")
    _add_common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output CSV path")
    e.add_argument("--gt-inject", action="store_true",
                   help="score ground truth against itself (sanity bound)")
    e.add_argument("--verbose", action="store_true")

    a = sub.add_parser("ablate", help="run the four-variant comparison")
    _add_common(a)

    s = sub.add_parser("scale-study", help="unlabeled-count scaling study")
    _add_common(s)
    s.add_argument("--counts", type=int, nargs="+", required=True)
    s.add_argument("--enlarged-labeled", type=int, default=None)

    q = sub.add_parser("pseudo3d", help="flow supervision vs pseudo-labeled 3D")
    _add_common(q)
    q.add_argument("--noise-level", type=float, default=1.0)
    return ap


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    quiet = not getattr(args, "verbose", False)
    try:
        if args.command == "gen-data":
            cfg = _load(args)
            if args.num_labeled is not None:
                cfg.data.n_labeled = args.num_labeled
            if args.num_unlabeled is not None:
                cfg.data.n_unlabeled = args.num_unlabeled
            if args.num_eval is not None:
                cfg.data.n_eval = args.num_eval
            if args.dynamic_frac is not None:
                cfg.data.gen.fraction_dynamic = args.dynamic_frac
            out = args.out if args.out else cfg.data_dir
            from .harness import cmd_gen_data
            manifest = cmd_gen_data(cfg, out, force=args.force, quiet=quiet)
            print(f"wrote {len(manifest['sequences'])} sequences to {out} "
                  f"(gen hash {manifest['gen_hash']})")
        elif args.command == "train":
            cfg = _load(args)
            from .harness import cmd_train
            record = cmd_train(cfg, out_dir=args.out, quiet=quiet)
            final = record.get("final_metrics", {})
            print(json.dumps({"variant": cfg.variant,
                              "final_metrics": final}, indent=1, sort_keys=True))
        elif args.command == "eval":
            from .harness import cmd_eval
            rows = cmd_eval(args.checkpoint if not args.gt_inject else None,
                            args.data, args.out, gt_inject=args.gt_inject)
            print(f"wrote {len(rows)} rows to {args.out}")
        elif args.command == "ablate":
            cfg = _load(args)
            from .harness import cmd_ablate
            out = args.out if args.out else cfg.out_dir
            cmd_ablate(cfg, out, quiet=quiet)
        elif args.command == "scale-study":
            cfg = _load(args)
            from .harness import cmd_scale_study
            out = args.out if args.out else cfg.out_dir
            cmd_scale_study(cfg, args.counts, out,
                            enlarged_labeled=args.enlarged_labeled, quiet=quiet)
        elif args.command == "pseudo3d":
            cfg = _load(args)
            from .harness import cmd_pseudo3d_ablation
            out = args.out if args.out else cfg.out_dir
            cmd_pseudo3d_ablation(cfg, args.noise_level, out, quiet=quiet)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (IOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
