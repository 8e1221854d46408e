"""Command line surface: gen-data | pretrain | meta-train | eval | ablate | gradcheck.

Config-file values are overridden by flags. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .adversary import LambdaSchedule
from .data import default_benchmark, gen_synthetic
from .harness import (
    ExperimentConfig,
    resolve_dataset,
    run_ablation_suite,
    run_eval,
    run_gradcheck,
    run_meta_train,
    run_pretrain,
)
from .rng import Rng


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> Parser:
    parser = Parser(prog="afa", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--head", choices=["matching", "proto", "tpn"], default=None)
        p.add_argument("--ablation", choices=["none", "no_dd", "no_lg", "nonlinear", "no_afa"],
                       default=None)
        p.add_argument("--lambda", dest="lam", type=str, default=None,
                       metavar="dann|const:VALUE")
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--pretrain-iters", type=int, default=None)
        p.add_argument("--shots", type=int, default=None)
        p.add_argument("--ways", type=int, default=None)
        p.add_argument("--queries", type=int, default=None)
        p.add_argument("--shared-bn-stats", action="store_true", default=None)
        p.add_argument("--no-dd-mode", choices=["gram", "lc"], default=None)
        p.add_argument("--data", type=str, default=None, help="dataset manifest path")
        return p

    common(sub.add_parser("gen-data", help="render the procedural benchmark")) \
        .add_argument("--samples", type=int, default=None, help="samples per class per domain")
    common(sub.add_parser("pretrain", help="base-class pretraining"))
    mt = common(sub.add_parser("meta-train", help="episodic adversarial training"))
    mt.add_argument("--checkpoint", type=str, default=None, help="pretrain checkpoint dir")
    mt.add_argument("--from-scratch", action="store_true", default=None)
    ev = common(sub.add_parser("eval", help="multi-trial evaluation"))
    ev.add_argument("--checkpoint", type=str, default=None)
    ev.add_argument("--domain", type=int, default=None)
    ev.add_argument("--pool", choices=["base", "novel"], default="novel")
    common(sub.add_parser("ablate", help="run the full ablation table"))
    common(sub.add_parser("gradcheck", help="finite-difference check of all loss paths"))
    return parser


def config_from_args(args) -> ExperimentConfig:
    base = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise RuntimeError(f"config file not found: {path}")
        base = json.loads(path.read_text())
    config = ExperimentConfig.from_dict(base) if base else ExperimentConfig()

    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    if args.head is not None:
        config.head.kind = args.head
    if args.ablation is not None:
        config.ablation = args.ablation
    if args.lam is not None:
        config.lam = LambdaSchedule.parse(args.lam)
    if args.trials is not None:
        config.eval_trials = args.trials
    if args.iters is not None:
        config.iterations = args.iters
    if args.pretrain_iters is not None:
        config.pretrain_iterations = args.pretrain_iters
    if args.shots is not None:
        config.k_shot = args.shots
    if args.ways is not None:
        config.n_way = args.ways
    if args.queries is not None:
        config.q_queries = args.queries
    if args.shared_bn_stats:
        config.shared_bn_stats = True
    if args.no_dd_mode is not None:
        config.no_dd_mode = args.no_dd_mode
    if args.data is not None:
        config.data_path = args.data
    if getattr(args, "from_scratch", None):
        config.from_scratch = True
    config.__post_init__()  # re-validate after overrides
    return config


def cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1

    try:
        config = config_from_args(args)
        if args.command == "gen-data":
            samples = args.samples or (config.generate or {}).get("samples_per_cell", 60)
            out = Path(config.out_dir)
            classes, domains = default_benchmark()
            manifest = gen_synthetic(classes, domains, samples,
                                     Rng(config.seed).substream("data"), out)
            print(manifest.root / "manifest.json")
        elif args.command == "pretrain":
            ckpt = run_pretrain(config)
            print(ckpt)
        elif args.command == "meta-train":
            if args.checkpoint is None and not config.from_scratch:
                raise RuntimeError("meta-train needs --checkpoint or --from-scratch")
            init = Path(args.checkpoint) if args.checkpoint else None
            ckpt = run_meta_train(config, init)
            print(ckpt)
        elif args.command == "eval":
            if args.checkpoint is None:
                raise RuntimeError("eval needs --checkpoint")
            manifest = resolve_dataset(config)
            domain = args.domain
            if domain is None:
                targets = [d for d in manifest.domain_ids() if d != config.source_domain]
                domain = targets[-1] if targets else config.source_domain
            stats = run_eval(config, Path(args.checkpoint), domain, args.pool,
                             manifest=manifest)
            print(f"domain {domain} {args.pool}: "
                  f"{stats.mean:.4f}±{stats.half_width:.4f} over {len(stats.accuracies)} trials")
        elif args.command == "ablate":
            tsv = run_ablation_suite(config)
            print(tsv)
        elif args.command == "gradcheck":
            report = run_gradcheck(config)
            for name, entry in report["paths"].items():
                print(f"{name}: max_rel_err={entry['max_rel_err']:.3e} "
                      f"{'pass' if entry['pass'] else 'FAIL'}")
            if not report["pass"]:
                raise RuntimeError(
                    f"gradient check failed for {report.get('failing')}")
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failures map to exit 2
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(cli(sys.argv[1:]))
