"""
Simulated data-parallel SFT engine.

One macro step = every rank runs G micro-steps (backward with the aggregation
mode's scale, accumulate on device, optionally copy to the host staging
buffer), then the staged (or device) gradients are averaged across ranks and
each rank applies AdamW to the parameter slice it owns.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import AggregationError, DataError
from app.core.model import MicroBatch, TinyLM, backward, masked_ce
from app.core.numerics import AdamWState, adamw_step, l2_norm, lr_at, pairwise_sum_rows
from app.db.models import CopyPolicy, DpConfig, TraceRecord
from app.services.loss_agg import CellGrid, RankLossStats, backward_scale, effective_global_loss, masked_stats

logger = logging.getLogger(__name__)


@dataclass
class StagingBuffer:
    """Host-side copy of a rank's accumulated gradient"""

    grad: np.ndarray
    dirty: bool = False


@dataclass(frozen=True)
class PartitionMap:
    """Contiguous equal-size parameter slices per rank; the last rank takes the remainder"""

    n_params: int
    bounds: Tuple[Tuple[int, int], ...]

    @classmethod
    def build(cls, n_params: int, dp_size: int) -> "PartitionMap":
        base = n_params // dp_size
        bounds = []
        for rank in range(dp_size):
            start = rank * base
            stop = n_params if rank == dp_size - 1 else start + base
            bounds.append((start, stop))
        return cls(n_params=n_params, bounds=tuple(bounds))

    @property
    def dp_size(self) -> int:
        return len(self.bounds)

    def slice(self, rank: int) -> slice:
        start, stop = self.bounds[rank]
        return slice(start, stop)

    def size(self, rank: int) -> int:
        start, stop = self.bounds[rank]
        return stop - start

    def owner(self, index: int) -> int:
        if not 0 <= index < self.n_params:
            raise IndexError(f"parameter index {index} out of range")
        for rank, (start, stop) in enumerate(self.bounds):
            if start <= index < stop:
                return rank
        raise IndexError(f"parameter index {index} has no owner")


@dataclass
class RankState:
    """Everything one simulated rank holds between micro-steps"""

    rank: int
    model: TinyLM
    device_grad: np.ndarray
    staging: StagingBuffer
    adam: AdamWState  # owned slice only
    micro_index: int = 0
    cell_stats: List[RankLossStats] = field(default_factory=list)
    reduced_grad: Optional[np.ndarray] = None  # stage 1: full vector, stage 2: owned shard

    @classmethod
    def fresh(cls, rank: int, model: TinyLM, owned: int) -> "RankState":
        n = model.params.size
        return cls(
            rank=rank,
            model=model,
            device_grad=np.zeros(n),
            staging=StagingBuffer(grad=np.zeros(n)),
            adam=AdamWState.fresh(owned),
        )

    def reset_buffers(self):
        self.device_grad[:] = 0.0
        self.staging.grad[:] = 0.0
        self.staging.dirty = False
        self.micro_index = 0
        self.cell_stats = []


@dataclass
class RunResult:
    final_params: np.ndarray
    trace: List[TraceRecord]
    losses: List[float]
    param_history: List[np.ndarray]

    @property
    def grad_norms(self) -> List[float]:
        return [rec.grad_norm for rec in self.trace]


def partition_batch(dataset: Sequence[MicroBatch], step: int, cfg: DpConfig) -> List[List[MicroBatch]]:
    """
    Round-robin sharding of the step's K*G*micro_batch_size slice:
    sample i goes to rank i mod K, micro-step (i div K) mod G.
    """
    k, g = cfg.dp_size, cfg.accum_steps
    per_step = cfg.samples_per_step
    start = step * per_step
    if start + per_step > len(dataset):
        raise DataError(
            f"insufficient data: step {step} needs samples [{start}, {start + per_step}), "
            f"dataset has {len(dataset)}"
        )

    buckets: List[List[List[MicroBatch]]] = [[[] for _ in range(g)] for _ in range(k)]
    for i, sample in enumerate(dataset[start:start + per_step]):
        buckets[i % k][(i // k) % g].append(sample)
    return [[MicroBatch.concat(cell) for cell in row] for row in buckets]


def step_counts(grid: List[List[MicroBatch]]) -> Tuple[int, int]:
    """(global active-token count, number of nonempty cells): the pre-backward all-reduce"""
    counts = [cell.active_count for row in grid for cell in row]
    return sum(counts), sum(1 for c in counts if c > 0)


def micro_step(
    rank_state: RankState,
    micro: MicroBatch,
    cfg: DpConfig,
    global_count: int,
    nonempty_cells: Optional[int] = None,
) -> RankState:
    """Backward one micro-batch into the device buffer, then apply the copy policy"""
    per_token, _ = masked_ce(rank_state.model, micro)
    stats = masked_stats(per_token, micro.mask)
    scale = backward_scale(
        cfg.agg_mode, stats, global_count, cfg.dp_size, cfg.accum_steps, nonempty_cells
    )
    rank_state.device_grad += backward(rank_state.model, micro, scale)
    rank_state.cell_stats.append(stats)

    if cfg.offload:
        policy = cfg.effective_copy_policy
        if policy == CopyPolicy.EVERY_MICRO_BATCH or rank_state.micro_index == 0:
            rank_state.staging.grad[:] = rank_state.device_grad
            rank_state.staging.dirty = True

    rank_state.micro_index += 1
    return rank_state


def reduce_gradients(rank_states: Sequence[RankState], cfg: DpConfig) -> np.ndarray:
    """Per-index cross-rank mean of the optimizer inputs, consumed in rank order"""
    sources = [s.staging.grad if cfg.offload else s.device_grad for s in rank_states]
    return pairwise_sum_rows(np.stack(sources)) / cfg.dp_size


def optimizer_step(
    rank_states: Sequence[RankState],
    partition: PartitionMap,
    cfg: DpConfig,
    lr: float,
    params: np.ndarray,
    reduced: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Each rank updates its owned slice; slices are concatenated back (broadcast)"""
    if reduced is None:
        reduced = reduce_gradients(rank_states, cfg)

    updated = []
    for state in rank_states:
        owned = partition.slice(state.rank)
        if cfg.zero_stage == 2:
            state.reduced_grad = reduced[owned].copy()
            shard = state.reduced_grad
        else:
            state.reduced_grad = reduced
            shard = reduced[owned]
        new_slice, state.adam = adamw_step(params[owned], shard, state.adam, cfg.optimizer, lr)
        updated.append(new_slice)

    for state in rank_states:
        state.reset_buffers()
    return np.concatenate(updated)


def _run_rank(state: RankState, cells: Sequence[MicroBatch], cfg: DpConfig, global_count: int, nonempty: int):
    for micro in cells:
        micro_step(state, micro, cfg, global_count, nonempty)
    return state


def run_training(
    cfg: DpConfig,
    model: TinyLM,
    dataset: Sequence[MicroBatch],
    workers: int = 1,
    count_overrides: Optional[Sequence[Tuple[int, int]]] = None,
) -> RunResult:
    """
    Execute cfg.total_steps macro steps.

    count_overrides replaces the per-step (global_count, nonempty_cells) used for
    loss scaling; the trace still records the counts seen in the data.
    """
    partition = PartitionMap.build(model.params.size, cfg.dp_size)
    states = [RankState.fresh(r, model, partition.size(r)) for r in range(cfg.dp_size)]
    params = model.params

    trace: List[TraceRecord] = []
    losses: List[float] = []
    history: List[np.ndarray] = []

    logger.info(
        f"Starting run: K={cfg.dp_size} G={cfg.accum_steps} stage={cfg.zero_stage} "
        f"offload={cfg.offload} copy={cfg.effective_copy_policy.value} agg={cfg.agg_mode.value} "
        f"steps={cfg.total_steps} workers={workers}"
    )

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step in range(cfg.total_steps):
            grid = partition_batch(dataset, step, cfg)
            global_count, nonempty = step_counts(grid)
            scale_count, scale_nonempty = (
                count_overrides[step] if count_overrides is not None else (global_count, nonempty)
            )
            if scale_nonempty == 0:
                raise AggregationError("no active tokens in step")

            replica = model.with_params(params)
            for state in states:
                state.model = replica

            if pool is not None:
                list(pool.map(
                    lambda pair: _run_rank(pair[0], pair[1], cfg, scale_count, scale_nonempty),
                    zip(states, grid),
                ))
            else:
                for state, cells in zip(states, grid):
                    _run_rank(state, cells, cfg, scale_count, scale_nonempty)

            stats_grid = CellGrid([list(s.cell_stats) for s in states])
            loss = effective_global_loss(cfg.agg_mode, stats_grid)
            reduced = reduce_gradients(states, cfg)
            lr = lr_at(cfg.schedule, step)
            params = optimizer_step(states, partition, cfg, lr, params, reduced=reduced)

            record = TraceRecord(
                step=step,
                loss=loss,
                grad_norm=l2_norm(reduced),
                lr=lr,
                global_token_count=global_count,
                per_rank_counts=stats_grid.rank_counts(),
            )
            trace.append(record)
            losses.append(loss)
            history.append(params.copy())
            logger.debug(f"step {step}: loss={loss:.6f} grad_norm={record.grad_norm:.6e} lr={lr:.3e}")
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    logger.info(f"✓ Run finished: {cfg.total_steps} steps, final loss {losses[-1]:.6f}")
    return RunResult(final_params=params, trace=trace, losses=losses, param_history=history)
