"""
Trace diagnostics: classify a candidate run against a paired reference run.

Both traces come from the same initial model, data and schedule. The optimizer
bug (only the first micro-batch reaches the optimizer) shows as gradient norms
well below the reference. The aggregation bug (mean of per-cell means) changes
the loss definition itself, so the candidate-minus-reference loss residual
carries step-to-step noise even before the parameters drift apart; a correct
pipeline leaves only a smooth residual there.
"""

import logging
from typing import Dict, Sequence

import numpy as np

from app.core.errors import TraceError
from app.core.numerics import stable_sum
from app.db.models import TraceRecord, Verdict
from app.db.trace_store import TraceStore

logger = logging.getLogger(__name__)

TAU_NORM = 0.6
TAU_VAR = 1.05
WINDOW = 9
MIN_STEPS = 20
# Leading steps where candidate and reference parameters are still close
PAIRED_STEPS = 30


def lower_median(values: Sequence[float]) -> float:
    """Median; even lengths take the lower of the two middle values"""
    if len(values) == 0:
        raise TraceError("empty series has no median")
    ordered = sorted(values)
    return float(ordered[(len(ordered) - 1) // 2])


def moving_average_detrend(values: Sequence[float], window: int = WINDOW) -> np.ndarray:
    """
    Residuals after subtracting a centered moving average.

    Only positions with a full window are kept, so the edges never compare a
    point against a truncated average.
    """
    x = np.asarray(values, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if x.size < window:
        raise TraceError(f"insufficient trace: {x.size} points for window {window}")
    half = window // 2
    trend = np.convolve(x, np.ones(window) / window, mode="valid")
    return x[half:x.size - half] - trend


def _variance(x: np.ndarray) -> float:
    mean = stable_sum(x) / x.size
    return stable_sum((x - mean) ** 2) / x.size


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0.0:
        if num == 0.0:
            return 1.0
        raise TraceError(f"degenerate reference: zero {what}")
    return num / den


class TraceDiagnostics:
    """Bug-signature detector with frozen thresholds"""

    def __init__(
        self,
        tau_norm: float = TAU_NORM,
        tau_var: float = TAU_VAR,
        window: int = WINDOW,
        paired_steps: int = PAIRED_STEPS,
    ):
        if paired_steps < window:
            raise ValueError(f"paired_steps ({paired_steps}) must cover the window ({window})")
        self.tau_norm = tau_norm
        self.tau_var = tau_var
        self.window = window
        self.paired_steps = paired_steps

    def record(self, sink: TraceStore, rec: TraceRecord):
        """Append one record to the sink (out-of-order steps raise TraceError)"""
        sink.record(rec)

    def detect(
        self,
        candidate: Sequence[TraceRecord],
        reference: Sequence[TraceRecord],
        accum_steps: int,
    ) -> Verdict:
        """
        Bug signatures of candidate relative to reference.

        norm_ratio is the ratio of median gradient norms. variance_ratio is
        1 + var(detrended residual over the paired steps) / var(detrended
        reference loss), so identical losses give exactly 1.0.
        """
        if len(candidate) != len(reference) or len(candidate) < MIN_STEPS:
            raise TraceError(
                f"insufficient trace: candidate has {len(candidate)} steps, "
                f"reference has {len(reference)}, need equal lengths >= {MIN_STEPS}"
            )

        norm_ratio = _ratio(
            lower_median([r.grad_norm for r in candidate]),
            lower_median([r.grad_norm for r in reference]),
            "median grad norm",
        )

        cand_loss = np.array([r.loss for r in candidate])
        ref_loss = np.array([r.loss for r in reference])
        residual = cand_loss - ref_loss

        half = len(candidate) // 2
        mean_shift = stable_sum(residual[half:]) / residual[half:].size

        paired = residual[:self.paired_steps]
        resid_var = _variance(moving_average_detrend(paired, self.window))
        ref_var = _variance(moving_average_detrend(ref_loss, self.window))
        variance_ratio = _ratio(ref_var + resid_var, ref_var, "loss variance")

        verdict = Verdict(
            optimizer_bug=norm_ratio < self.tau_norm,
            aggregation_bug=variance_ratio > self.tau_var,
            mean_shift=mean_shift,
            variance_ratio=variance_ratio,
            norm_ratio=norm_ratio,
        )
        logger.info(
            f"Verdict {verdict.label} (G={accum_steps}): norm_ratio={norm_ratio:.4f} "
            f"variance_ratio={variance_ratio:.4f} mean_shift={mean_shift:+.4e}"
        )
        return verdict

    def summarize(self, trace: Sequence[TraceRecord]) -> Dict[str, float]:
        """Median loss, median grad norm, loss std and token-count dispersion"""
        if len(trace) == 0:
            raise TraceError("cannot summarize an empty trace")

        losses = np.array([r.loss for r in trace], dtype=np.float64)
        counts = np.array([r.global_token_count for r in trace], dtype=np.float64)
        count_mean = stable_sum(counts) / counts.size
        count_std = float(np.sqrt(_variance(counts)))

        return {
            "steps": len(trace),
            "median_loss": lower_median(losses.tolist()),
            "median_grad_norm": lower_median([r.grad_norm for r in trace]),
            "loss_std": float(np.sqrt(_variance(losses))),
            "final_loss": float(losses[-1]),
            "token_count_mean": count_mean,
            # coefficient of variation of the per-step global token count
            "token_count_cv": count_std / count_mean if count_mean > 0 else 0.0,
        }


# Global instance
trace_diagnostics = TraceDiagnostics()
