import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from app.core.errors import ConfigError, TraceError
from app.core.model import MicroBatch, TinyLM, generate_dataset
from app.db.models import AggregationMode, CopyPolicy, ExperimentConfig
from app.db.trace_store import TraceStore, write_json, write_params
from app.services.diagnostics import MIN_STEPS, lower_median, trace_diagnostics
from app.services.engine import RunResult, run_training
from app.services.grpo import BanditRun, run_bandit
from app.services.oracle import Trajectory, compare, reference_train

logger = logging.getLogger(__name__)

# name -> (copy policy, aggregation mode); ordered like the 2x2 ablation table
VARIANTS: Dict[str, Tuple[CopyPolicy, AggregationMode]] = {
    "buggy": (CopyPolicy.FIRST_MICRO_BATCH_ONLY, AggregationMode.MEAN_OF_MEANS),
    "opt-bug": (CopyPolicy.FIRST_MICRO_BATCH_ONLY, AggregationMode.GLOBAL_TOKEN_MEAN),
    "agg-bug": (CopyPolicy.EVERY_MICRO_BATCH, AggregationMode.MEAN_OF_MEANS),
    "fixed": (CopyPolicy.EVERY_MICRO_BATCH, AggregationMode.GLOBAL_TOKEN_MEAN),
}


@dataclass
class DiffOutcome:
    report: Dict[str, Any]
    fixed_matches: bool


def parse_variants(raw: Optional[str]) -> List[str]:
    """Comma-separated variant names; fixed is always included"""
    if not raw:
        return list(VARIANTS)
    names = [v.strip() for v in raw.split(",") if v.strip()]
    unknown = [v for v in names if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {', '.join(unknown)}; known: {', '.join(VARIANTS)}")
    if "fixed" not in names:
        names.append("fixed")
    return [v for v in VARIANTS if v in names]


def median_or_none(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return lower_median(defined) if defined else None


class ExperimentService:
    """Runs experiments from an ExperimentConfig and writes their artifacts"""

    def prepare(self, config: ExperimentConfig) -> Tuple[TinyLM, List[MicroBatch]]:
        """Seeded model and dataset; everything random flows from run.seed"""
        run, data = config.run, config.data
        n_samples = data.n_samples or run.samples_per_step * run.total_steps
        model = TinyLM.init(data.vocab, data.hidden, run.seed, data.init_scale)
        dataset = generate_dataset(data, n_samples, run.seed)
        return model, dataset

    def train(self, config: ExperimentConfig, out_dir: Path, workers: int = 1) -> RunResult:
        model, dataset = self.prepare(config)
        result = run_training(config.run, model, dataset, workers=workers)

        out_dir = Path(out_dir)
        TraceStore(out_dir / "trace.jsonl").record_all(result.trace)
        write_params(out_dir / "final_params.bin", result.final_params)
        write_json(out_dir / "summary.json", {
            "config": config.model_dump(mode="json"),
            "n_params": int(result.final_params.size),
            "summary": trace_diagnostics.summarize(result.trace),
        })
        logger.info(f"✓ Train artifacts written to {out_dir}")
        return result

    def diff(
        self,
        config: ExperimentConfig,
        out_dir: Path,
        variants: Sequence[str],
        tolerance: float,
        workers: int = 1,
    ) -> DiffOutcome:
        """Run the copy-policy x aggregation-mode ablation against the single-device reference"""
        if tolerance < 0:
            raise ConfigError(f"tolerance must be >= 0, got {tolerance}")
        model, dataset = self.prepare(config)
        run = config.run
        out_dir = Path(out_dir)

        reference = reference_train(
            model, dataset, run.optimizer, run.schedule, run.total_steps, run.samples_per_step
        )
        reference_trace = reference.to_trace()
        TraceStore(out_dir / "trace_reference.jsonl").record_all(reference_trace)

        can_detect = run.total_steps >= MIN_STEPS
        if not can_detect:
            logger.warning(f"⚠ {run.total_steps} steps < {MIN_STEPS}: detect verdicts skipped")

        rows = []
        for name in variants:
            copy_policy, agg_mode = VARIANTS[name]
            cfg = run.model_copy(update={"offload": True, "copy_policy": copy_policy, "agg_mode": agg_mode})
            result = run_training(cfg, model, dataset, workers=workers)
            TraceStore(out_dir / f"trace_{name}.jsonl").record_all(result.trace)

            report = compare(Trajectory.from_run(result), reference, tolerance)
            verdict = None
            if can_detect:
                try:
                    verdict = trace_diagnostics.detect(result.trace, reference_trace, run.accum_steps)
                except TraceError as e:
                    logger.warning(f"⚠ detect skipped for {name}: {e}")

            rows.append({
                "variant": name,
                "copy_policy": copy_policy.value,
                "agg_mode": agg_mode.value,
                "matches_oracle": report.matches,
                "first_divergence_step": report.first_divergence_step,
                "max_param_rel_diff": report.max_param_rel_diff,
                "final_loss": result.losses[-1],
                "final_loss_delta": report.loss_deltas[-1],
                "median_grad_norm_ratio": median_or_none(report.grad_norm_ratios),
                "verdict": None if verdict is None else {"label": verdict.label, **verdict.model_dump()},
            })
            logger.info(
                f"{'✓' if report.matches else '✗'} {name}: max rel diff {report.max_param_rel_diff:.3e}"
            )

        fixed_matches = next(r["matches_oracle"] for r in rows if r["variant"] == "fixed")
        document = {
            "config": config.model_dump(mode="json"),
            "tolerance": tolerance,
            "reference": {
                "final_loss": reference.losses[-1],
                "summary": trace_diagnostics.summarize(reference_trace),
            },
            "variants": rows,
            "fixed_matches_oracle": fixed_matches,
        }
        write_json(out_dir / "diff_report.json", document)
        return DiffOutcome(report=document, fixed_matches=fixed_matches)

    def grpo_demo(
        self,
        config: ExperimentConfig,
        out_dir: Path,
        steps: Optional[int] = None,
    ) -> BanditRun:
        bandit = config.bandit
        run = run_bandit(
            bandit.grpo,
            steps or bandit.steps,
            seed=config.run.seed,
            vocab=bandit.vocab,
            hidden=bandit.hidden,
            lr=bandit.lr,
        )
        out_dir = Path(out_dir)
        TraceStore(out_dir / "trace.jsonl").record_all(run.trace)
        write_json(out_dir / "summary.json", {
            "config": config.model_dump(mode="json"),
            "initial_reward": run.trace[0].loss,
            "final_reward": run.final_reward,
            "steps": len(run.trace),
        })
        return run


# Global instance
experiment_service = ExperimentService()
