import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from app.core.errors import AggregationError, ConfigError, DataError, NumericsError
from app.core.model import MicroBatch, TinyLM, backward, masked_ce
from app.core.numerics import AdamWState, adamw_step, l2_norm, lr_at
from app.db.models import AdamWConfig, CopyPolicy, DivergenceReport, DpConfig, LrSchedule, TraceRecord
from app.services.engine import RunResult, partition_batch, run_training, step_counts
from app.services.loss_agg import masked_stats

logger = logging.getLogger(__name__)

REL_FLOOR = 1e-15


@dataclass
class Trajectory:
    """Per-step parameters (after the step's update), losses and gradient norms"""

    params: List[np.ndarray]
    losses: List[float]
    grad_norms: List[float]
    lrs: List[float]
    token_counts: List[int]

    def __len__(self) -> int:
        return len(self.params)

    @classmethod
    def from_run(cls, result: RunResult) -> "Trajectory":
        return cls(
            params=[p.copy() for p in result.param_history],
            losses=list(result.losses),
            grad_norms=[r.grad_norm for r in result.trace],
            lrs=[r.lr for r in result.trace],
            token_counts=[r.global_token_count for r in result.trace],
        )

    def to_trace(self) -> List[TraceRecord]:
        return [
            TraceRecord(
                step=i,
                loss=self.losses[i],
                grad_norm=self.grad_norms[i],
                lr=self.lrs[i],
                global_token_count=self.token_counts[i],
                per_rank_counts=[self.token_counts[i]],
            )
            for i in range(len(self))
        ]


def reference_train(
    model: TinyLM,
    dataset: Sequence[MicroBatch],
    optimizer: AdamWConfig,
    schedule: LrSchedule,
    total_steps: int,
    samples_per_step: int,
) -> Trajectory:
    """Single-device full-batch trainer: true global token mean, one AdamW step per macro batch"""
    params = model.params
    state = AdamWState.fresh(params.size)
    traj = Trajectory(params=[], losses=[], grad_norms=[], lrs=[], token_counts=[])

    for step in range(total_steps):
        start = step * samples_per_step
        if start + samples_per_step > len(dataset):
            raise DataError(f"insufficient data: reference step {step} runs past {len(dataset)} samples")
        batch = MicroBatch.concat(list(dataset[start:start + samples_per_step]))
        current = model.with_params(params)

        per_token, count = masked_ce(current, batch)
        stats = masked_stats(per_token, batch.mask)
        if count == 0:
            raise AggregationError("no active tokens in step")

        grad = backward(current, batch, 1 / count)
        lr = lr_at(schedule, step)
        params, state = adamw_step(params, grad, state, optimizer, lr)

        traj.params.append(params.copy())
        traj.losses.append(stats.loss_sum / count)
        traj.grad_norms.append(l2_norm(grad))
        traj.lrs.append(lr)
        traj.token_counts.append(count)

    logger.info(f"✓ Reference run finished: {total_steps} steps")
    return traj


def _rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    return float(np.max(np.abs(a - b) / denom, initial=0.0))


def compare(a: Trajectory, b: Trajectory, tol_rel: float) -> DivergenceReport:
    """Step-wise relative parameter difference plus loss/grad-norm series"""
    if len(a) != len(b):
        raise NumericsError(f"length mismatch: trajectories of {len(a)} and {len(b)} steps")

    per_step = [_rel_diff(pa, pb) for pa, pb in zip(a.params, b.params)]
    first = next((i + 1 for i, d in enumerate(per_step) if d > tol_rel), None)

    ratios: List[Optional[float]] = []
    for ga, gb in zip(a.grad_norms, b.grad_norms):
        if gb == 0.0:
            ratios.append(1.0 if ga == 0.0 else None)
        else:
            ratios.append(ga / gb)

    return DivergenceReport(
        tolerance=tol_rel,
        first_divergence_step=first,
        max_param_rel_diff=max(per_step, default=0.0),
        per_step_param_rel_diff=per_step,
        loss_deltas=[la - lb for la, lb in zip(a.losses, b.losses)],
        grad_norm_ratios=ratios,
    )


def zero_mask_transform(dataset: Sequence[MicroBatch], cfg: DpConfig) -> List[MicroBatch]:
    """Zero the mask of every sample routed to micro-steps 1..G-1 of any rank"""
    k, g = cfg.dp_size, cfg.accum_steps
    per_step = cfg.samples_per_step
    out = list(dataset)
    for step in range(cfg.total_steps):
        base = step * per_step
        for i in range(per_step):
            if (i // k) % g != 0:
                out[base + i] = out[base + i].zero_mask()
    return out


def buggy_first_batch_oracle(
    cfg: DpConfig,
    model: TinyLM,
    dataset: Sequence[MicroBatch],
    tol_rel: float = 1e-12,
    workers: int = 1,
) -> bool:
    """
    True iff the run reproduces "only the first micro-batch reaches the optimizer":
    the buggy trajectory equals a fixed run whose micro-steps 1..G-1 carry
    zero-mask batches, with loss scaling pinned to the original step counts.
    """
    if not cfg.offload:
        raise ConfigError("buggy_first_batch_oracle needs offload=true")

    counts = [step_counts(partition_batch(dataset, s, cfg)) for s in range(cfg.total_steps)]
    candidate = run_training(cfg, model, dataset, workers=workers)

    if cfg.copy_policy == CopyPolicy.EVERY_MICRO_BATCH:
        # Sanity arm: a fixed run is its own characterization
        expected = run_training(cfg, model, dataset, workers=workers)
    else:
        fixed_cfg = cfg.model_copy(update={"copy_policy": CopyPolicy.EVERY_MICRO_BATCH})
        transformed = zero_mask_transform(dataset, cfg)
        expected = run_training(fixed_cfg, model, transformed, workers=workers, count_overrides=counts)

    report = compare(Trajectory.from_run(candidate), Trajectory.from_run(expected), tol_rel)
    grad_diff = max(
        (abs(a - b) / max(abs(a), abs(b), REL_FLOOR) for a, b in zip(candidate.grad_norms, expected.grad_norms)),
        default=0.0,
    )
    verdict = report.matches and grad_diff <= tol_rel
    logger.info(
        f"{'✓' if verdict else '✗'} First-micro-batch characterization "
        f"(policy={cfg.copy_policy.value}, G={cfg.accum_steps}): max rel diff {report.max_param_rel_diff:.3e}"
    )
    return verdict

