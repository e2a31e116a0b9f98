import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import AggregationError, NumericsError
from app.core.numerics import stable_sum
from app.db.models import AggregationMode

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankLossStats:
    """Masked loss sum S and active-token count n of one (rank, micro-batch) cell"""

    loss_sum: float
    token_count: int

    def __post_init__(self):
        if self.token_count < 0 or self.loss_sum < 0:
            raise AggregationError(f"invalid cell stats: {self}")
        if self.token_count == 0 and self.loss_sum != 0.0:
            raise AggregationError("empty cell must have zero loss_sum")

    @property
    def is_empty(self) -> bool:
        return self.token_count == 0


@dataclass(frozen=True)
class CellGrid:
    """stats[rank][micro_batch]"""

    stats: List[List[RankLossStats]]

    def __post_init__(self):
        if not self.stats or not self.stats[0]:
            raise AggregationError("grid needs at least one rank and one micro-batch")
        width = len(self.stats[0])
        if any(len(row) != width for row in self.stats):
            raise AggregationError("every rank must hold the same number of micro-batches")

    @classmethod
    def from_cells(cls, cells: Sequence[Tuple[float, int]], dp_size: int) -> "CellGrid":
        """Build from rank-major (loss_sum, token_count) pairs"""
        if dp_size < 1 or len(cells) % dp_size != 0:
            raise AggregationError(f"{len(cells)} cells do not split over {dp_size} ranks")
        width = len(cells) // dp_size
        stats = [RankLossStats(float(s), int(n)) for s, n in cells]
        return cls([stats[r * width:(r + 1) * width] for r in range(dp_size)])

    @property
    def dp_size(self) -> int:
        return len(self.stats)

    @property
    def accum_steps(self) -> int:
        return len(self.stats[0])

    def cells(self) -> List[RankLossStats]:
        """Rank-major canonical order"""
        return [cell for row in self.stats for cell in row]

    def rank_counts(self) -> List[int]:
        return [sum(c.token_count for c in row) for row in self.stats]

    def global_count(self) -> int:
        return sum(self.rank_counts())


def masked_stats(per_token_loss: Sequence[float], mask: Sequence[float]) -> RankLossStats:
    """Local loss sum and local token count"""
    losses = np.asarray(per_token_loss, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if losses.shape != mask.shape:
        raise NumericsError(f"length mismatch: {losses.size} losses vs {mask.size} mask entries")
    return RankLossStats(loss_sum=stable_sum(losses), token_count=int(mask.sum()))


def allreduce_sum(per_rank_values: Sequence[float]) -> float:
    """Simulated SUM all-reduce; every rank sees the same stable_sum"""
    if len(per_rank_values) == 0:
        raise AggregationError("allreduce needs at least one rank")
    return stable_sum(per_rank_values)


def backward_scale(
    mode: AggregationMode,
    cell: RankLossStats,
    global_count: int,
    dp_size: int,
    accum_steps: int,
    nonempty_cells: Optional[int] = None,
) -> float:
    """
    Upstream scale applied to a cell's masked-sum gradient at backward time.

    nonempty_cells is the step's count of cells with active tokens; None means
    every one of the K*G cells is nonempty.
    """
    if mode == AggregationMode.MEAN_OF_MEANS:
        if cell.is_empty:
            return 0.0
        if nonempty_cells is None or nonempty_cells == dp_size * accum_steps:
            return 1.0 / (cell.token_count * accum_steps)
        # Empty cells leave the mean-of-means denominator
        return dp_size / (cell.token_count * nonempty_cells)

    if global_count <= 0:
        raise AggregationError("no active tokens in step")
    return dp_size / global_count


def local_backward_loss(
    mode: AggregationMode,
    cell: RankLossStats,
    global_count: int,
    dp_size: int,
    accum_steps: int,
    nonempty_cells: Optional[int] = None,
) -> float:
    """
    Scalar a cell backpropagates before rank averaging and accumulation.

    MeanOfMeans: (S / n) / G, the local masked mean split over G micro-steps.
    GlobalTokenMean: S / N * D, the fixed per-rank loss with DP scaling.
    """
    scale = backward_scale(mode, cell, global_count, dp_size, accum_steps, nonempty_cells)
    return cell.loss_sum * scale


def effective_global_loss(mode: AggregationMode, grid: CellGrid) -> float:
    """Closed-form loss whose gradient the whole pipeline applies"""
    cells = grid.cells()
    nonempty = [c for c in cells if not c.is_empty]
    if not nonempty:
        raise AggregationError("no active tokens in step")

    if mode == AggregationMode.MEAN_OF_MEANS:
        means = [c.loss_sum / c.token_count for c in nonempty]
        return stable_sum(means) / len(nonempty)

    total = stable_sum([c.loss_sum for c in cells])
    count = allreduce_sum([c.token_count for c in cells])
    return total / count


def concat_mean(per_token_losses: Sequence[Sequence[float]], masks: Sequence[Sequence[float]]) -> float:
    """Plain token mean after concatenating every cell into one batch"""
    losses = np.concatenate([np.asarray(x, dtype=np.float64) for x in per_token_losses])
    mask = np.concatenate([np.asarray(m, dtype=np.float64) for m in masks])
    count = mask.sum()
    if count == 0:
        raise AggregationError("no active tokens in step")
    return stable_sum(losses) / count
