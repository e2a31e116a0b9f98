"""
Deterministic dense numerics shared by every simulator component.

All reductions go through one canonical order: an index-ascending pairwise
tree ((x0+x1)+(x2+x3))+... with odd tails padded by +0.0. Identical inputs in
identical order give bit-identical results regardless of thread count.
"""

import math
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from app.core.errors import NumericsError
from app.db.models import AdamWConfig, LrSchedule, ScheduleKind


def _as_vector(values) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


def _check_finite(arr: np.ndarray, what: str = "operand"):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite {what}")


def pairwise_sum_rows(matrix) -> np.ndarray:
    """Column-wise pairwise tree sum over axis 0 (one row per rank/term)"""
    rows = _as_vector(matrix)
    if rows.ndim == 1:
        rows = rows.reshape(-1, 1)
    if rows.shape[0] == 0:
        return np.zeros(rows.shape[1:], dtype=np.float64)
    while rows.shape[0] > 1:
        if rows.shape[0] % 2:
            rows = np.concatenate([rows, np.zeros((1,) + rows.shape[1:])], axis=0)
        rows = rows[0::2] + rows[1::2]
    return rows[0]


def stable_sum(values: Iterable[float]) -> float:
    """Pairwise sum in the canonical order; raises on non-finite input"""
    arr = _as_vector(list(values) if not isinstance(values, np.ndarray) else values).ravel()
    _check_finite(arr)
    if arr.size == 0:
        return 0.0
    return float(pairwise_sum_rows(arr.reshape(-1, 1))[0])


def compensated_sum(values: Iterable[float]) -> float:
    """Neumaier summation, the high-accuracy reference for stable_sum"""
    total = 0.0
    comp = 0.0
    for x in values:
        x = float(x)
        t = total + x
        if abs(total) >= abs(x):
            comp += (total - t) + x
        else:
            comp += (x - t) + total
        total = t
    return total + comp


def l2_norm(vec) -> float:
    arr = _as_vector(vec).ravel()
    return math.sqrt(stable_sum(arr * arr))


@dataclass
class AdamWState:
    """First/second moments and the count of applied steps"""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, size: int) -> "AdamWState":
        return cls(m=np.zeros(size), v=np.zeros(size), t=0)


def adamw_step(
    params,
    grad,
    state: AdamWState,
    cfg: AdamWConfig,
    lr: float,
) -> Tuple[np.ndarray, AdamWState]:
    """One AdamW update with bias correction and decoupled weight decay"""
    theta = _as_vector(params)
    g = _as_vector(grad)
    if theta.shape != g.shape or state.m.shape != theta.shape or state.v.shape != theta.shape:
        raise NumericsError(
            f"length mismatch: params {theta.shape}, grad {g.shape}, state {state.m.shape}"
        )
    _check_finite(g, "gradient")
    if lr < 0:
        raise NumericsError(f"learning rate must be >= 0, got {lr}")

    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2

    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * (g * g)

    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)

    new_theta = theta - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta)
    return new_theta, AdamWState(m=m, v=v, t=t)


def warmup_steps(sched: LrSchedule) -> int:
    # round() is half-to-even: 0.1 * 25 = 2.5 gives 2
    return int(round(sched.warmup_frac * sched.total_steps))


def lr_at(sched: LrSchedule, step: int) -> float:
    """Learning rate at a 0-based step index"""
    if step < 0 or step > sched.total_steps:
        raise NumericsError(f"step {step} outside [0, {sched.total_steps}]")

    if sched.kind == ScheduleKind.CONSTANT:
        return sched.peak

    w = warmup_steps(sched)
    if step < w:
        return sched.peak * step / w

    decay_span = max(sched.total_steps - w, 1)
    progress = (step - w) / decay_span
    if sched.kind == ScheduleKind.LINEAR:
        decay = 1.0 - progress
    else:
        decay = 0.5 * (1.0 + math.cos(math.pi * progress))
    return sched.min_ratio * sched.peak + (1.0 - sched.min_ratio) * sched.peak * decay
