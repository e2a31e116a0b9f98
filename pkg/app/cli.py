import argparse
import json
import logging
import sys
from typing import List, Optional

from app.core.config import load_experiment_config, settings
from app.core.errors import DpSimError
from app.db.models import ExperimentConfig
from app.db.trace_store import read_trace
from app.services.diagnostics import trace_diagnostics
from app.services.experiment_service import experiment_service, parse_variants
from app.services.flops import breakdown, format_flops, method_total, resolve_method

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None):
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )


def _workers(args) -> int:
    return settings.WORKERS if args.parallel else 1


def _load(args) -> ExperimentConfig:
    return load_experiment_config(args.config, seed=args.seed)


def cmd_train(args) -> int:
    config = _load(args)
    out_dir = settings.resolve_output_dir(args.out, config.output_dir)
    result = experiment_service.train(config, out_dir, workers=_workers(args))
    print(f"trained {len(result.trace)} steps, final loss {result.losses[-1]:.6f} -> {out_dir}")
    return 0


def cmd_diff(args) -> int:
    config = _load(args)
    out_dir = settings.resolve_output_dir(args.out, config.output_dir)
    tolerance = settings.DEFAULT_TOLERANCE if args.tolerance is None else args.tolerance
    variants = parse_variants(args.variants)
    outcome = experiment_service.diff(config, out_dir, variants, tolerance, workers=_workers(args))

    print(f"{'variant':<10} {'copy_policy':<24} {'agg_mode':<18} {'max_rel_diff':>13} {'verdict':<16} status")
    print(f"{'reference':<10} {'single-device':<24} {'global_token_mean':<18} {0.0:>13.3e} {'-':<16} -")
    for row in outcome.report["variants"]:
        verdict = row["verdict"]["label"] if row["verdict"] else "-"
        status = "MATCHES ORACLE" if row["matches_oracle"] else f"diverges at step {row['first_divergence_step']}"
        print(
            f"{row['variant']:<10} {row['copy_policy']:<24} {row['agg_mode']:<18} "
            f"{row['max_param_rel_diff']:>13.3e} {verdict:<16} {status}"
        )
    return 0 if outcome.fixed_matches else 1


def cmd_detect(args) -> int:
    candidate = read_trace(args.candidate)
    reference = read_trace(args.reference)
    verdict = trace_diagnostics.detect(candidate, reference, args.accum_steps)
    print(json.dumps({"label": verdict.label, **verdict.model_dump()}, indent=2))
    return verdict.exit_code


def cmd_flops(args) -> int:
    preset = resolve_method(args.method, n_params=args.n_params)
    total = method_total(preset.method, preset.cost_model)
    if args.breakdown:
        for name, value in breakdown(preset.method, preset.cost_model).items():
            print(f"{name:<20} {format_flops(value)}")
    else:
        print(format_flops(total))
    return 0


def cmd_grpo_demo(args) -> int:
    config = _load(args) if args.config else ExperimentConfig()
    if args.seed is not None and not args.config:
        config = config.model_copy(update={"run": config.run.model_copy(update={"seed": args.seed})})
    out_dir = settings.resolve_output_dir(args.out, config.output_dir)
    run = experiment_service.grpo_demo(config, out_dir, steps=args.steps)
    print(f"expected reward {run.trace[0].loss:.4f} -> {run.final_reward:.4f} over {len(run.trace)} steps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpsim",
        description="Data-parallel SFT bug simulator: oracle diffs, trace diagnostics, FLOPs estimates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p, config_required: bool = True):
        if config_required:
            p.add_argument("config", help="experiment config (JSON)")
        else:
            p.add_argument("config", nargs="?", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--parallel", action="store_true", help="evaluate ranks on a worker pool")

    p = sub.add_parser("train", help="run one simulated data-parallel training job")
    run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diff", help="copy-policy x aggregation-mode ablation against the reference")
    run_flags(p)
    p.add_argument("--variants", default=None, help="comma list of buggy,opt-bug,agg-bug,fixed")
    p.add_argument("--tolerance", type=float, default=None, help="relative parameter tolerance")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("detect", help="classify a candidate trace against a reference trace")
    p.add_argument("candidate")
    p.add_argument("reference")
    p.add_argument("--accum-steps", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("flops", help="training FLOPs for a preset or a method spec file")
    p.add_argument("method", help="preset name or path to a method spec")
    p.add_argument("--breakdown", action="store_true")
    p.add_argument("--n-params", type=float, default=None)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("grpo-demo", help="toy GRPO bandit; reward goes in the trace's loss field")
    run_flags(p, config_required=False)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_grpo_demo)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging()

    try:
        settings.validate()
        return args.func(args)
    except DpSimError as e:
        logger.error(f"✗ {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"✗ Unexpected error: {e}")
        return 1
