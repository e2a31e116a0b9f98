from pathlib import Path

import numpy as np
import pytest

from app.core.config import load_experiment_config
from app.core.errors import TraceError
from app.core.model import TinyLM, generate_dataset
from app.db.models import CopyPolicy, DataConfig, LrSchedule, ScheduleKind, TraceRecord
from app.db.trace_store import TraceStore
from app.services.diagnostics import (
    TraceDiagnostics,
    lower_median,
    moving_average_detrend,
    trace_diagnostics,
)
from app.services.engine import run_training
from app.services.experiment_service import VARIANTS, experiment_service
from app.services.oracle import reference_train
from tests.conftest import make_cfg

DETECTOR_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "detector.json"

detect = trace_diagnostics.detect


def synthetic_trace(rng, steps=40, norm_scale=1.0, noise=0.05):
    losses = 2.0 * np.exp(-np.arange(steps) / 30.0) + noise * rng.normal(size=steps)
    norms = norm_scale * (1.0 + 0.1 * rng.random(steps))
    return from_series(losses, norms)


def from_series(losses, norms):
    return [
        TraceRecord(step=i, loss=float(losses[i]), grad_norm=float(norms[i]), lr=1e-3,
                    global_token_count=100, per_rank_counts=[50, 50])
        for i in range(len(losses))
    ]


def rescaled(trace, factor):
    return [r.model_copy(update={"grad_norm": r.grad_norm * factor}) for r in trace]


def shifted(trace, offsets):
    return [r.model_copy(update={"loss": r.loss + float(d)}) for r, d in zip(trace, offsets)]


class TestDetect:
    def test_self_comparison_is_clean(self, rng):
        trace = synthetic_trace(rng)
        verdict = detect(trace, trace, accum_steps=4)
        assert verdict.norm_ratio == 1.0
        assert verdict.variance_ratio == 1.0
        assert verdict.mean_shift == 0.0
        assert verdict.exit_code == 0 and verdict.label == "clean"

    def test_norm_ratio_scale_equivariance(self, rng):
        cand, ref = synthetic_trace(rng, norm_scale=0.3), synthetic_trace(rng)
        base = detect(cand, ref, 4).norm_ratio
        for factor in (1e-3, 0.7, 12.0):
            scaled = detect(rescaled(cand, factor), rescaled(ref, factor), 4).norm_ratio
            assert abs(scaled - base) <= 1e-12 * base

    def test_low_norm_flags_optimizer_bug(self, rng):
        ref = synthetic_trace(rng)
        verdict = detect(rescaled(ref, 0.25), ref, 8)
        assert verdict.optimizer_bug and not verdict.aggregation_bug
        assert verdict.exit_code == 3

    def test_smooth_loss_drift_is_not_an_aggregation_bug(self, rng):
        # parameters drifting apart move the loss smoothly; a quadratic survives detrending as a constant
        ref = synthetic_trace(rng)
        steps = np.arange(len(ref), dtype=float)
        verdict = detect(shifted(ref, 1e-3 * steps ** 2), ref, 8)
        assert verdict.variance_ratio == pytest.approx(1.0, abs=1e-6)
        assert not verdict.aggregation_bug
        assert verdict.mean_shift > 0.0

    def test_noisy_residual_flags_aggregation_bug(self, rng):
        ref = synthetic_trace(rng)
        cand = shifted(ref, 0.05 * rng.normal(size=len(ref)))
        verdict = detect(cand, ref, 8)
        assert verdict.aggregation_bug and not verdict.optimizer_bug
        assert verdict.exit_code == 4

    def test_both_flags(self, rng):
        ref = synthetic_trace(rng)
        cand = rescaled(shifted(ref, 0.05 * rng.normal(size=len(ref))), 0.1)
        assert detect(cand, ref, 8).label == "both"

    def test_insufficient_trace(self, rng):
        trace = synthetic_trace(rng, steps=19)
        with pytest.raises(TraceError, match="insufficient trace"):
            detect(trace, trace, 1)

    def test_length_mismatch(self, rng):
        trace = synthetic_trace(rng, steps=30)
        with pytest.raises(TraceError, match="insufficient trace"):
            detect(trace[:25], trace, 1)

    def test_zero_reference_norm(self, rng):
        ref = rescaled(synthetic_trace(rng), 0.0)
        cand = synthetic_trace(rng)
        with pytest.raises(TraceError, match="degenerate reference"):
            detect(cand, ref, 1)
        assert detect(ref, ref, 1).norm_ratio == 1.0

    def test_constant_reference_loss(self):
        flat = from_series(np.zeros(30), np.ones(30))
        with pytest.raises(TraceError, match="degenerate reference"):
            detect(shifted(flat, np.arange(30) % 2), flat, 1)
        assert detect(flat, flat, 1).variance_ratio == 1.0

    def test_statistics_are_finite(self, rng):
        verdict = detect(synthetic_trace(rng, noise=0.3), synthetic_trace(rng, norm_scale=2.0), 4)
        assert all(np.isfinite([verdict.norm_ratio, verdict.variance_ratio, verdict.mean_shift]))

    def test_custom_thresholds(self, rng):
        ref = synthetic_trace(rng)
        strict = TraceDiagnostics(tau_norm=0.2)
        assert not strict.detect(rescaled(ref, 0.25), ref, 8).optimizer_bug

    def test_paired_steps_must_cover_window(self):
        with pytest.raises(ValueError):
            TraceDiagnostics(window=9, paired_steps=5)

    def test_identical_micro_batches_give_one_over_g(self):
        # constant params (lr 0) and identical micro-batches: the buggy step sees exactly 1/G of the gradient
        steps, g = 20, 8
        cfg = make_cfg(dp_size=2, accum_steps=g, total_steps=steps,
                       schedule=LrSchedule(kind=ScheduleKind.CONSTANT, peak=0.0, total_steps=steps))
        model = TinyLM.init(8, 4, seed=3)
        sample = generate_dataset(DataConfig(vocab=8, hidden=4), 1, seed=3)[0]
        dataset = [sample] * (cfg.samples_per_step * steps)

        fixed = run_training(cfg, model, dataset)
        buggy = run_training(cfg.model_copy(update={"copy_policy": CopyPolicy.FIRST_MICRO_BATCH_ONLY}), model, dataset)
        verdict = detect(buggy.trace, fixed.trace, g)
        assert verdict.norm_ratio == pytest.approx(0.125, rel=1e-12)
        assert verdict.optimizer_bug


class TestHelpers:
    def test_lower_median(self):
        assert lower_median([1.0, 2.0, 3.0, 4.0]) == 2.0
        assert lower_median([3.0, 1.0, 2.0]) == 2.0
        with pytest.raises(TraceError):
            lower_median([])

    def test_detrend_removes_linear_trend(self):
        residuals = moving_average_detrend(np.arange(30, dtype=float) * 0.5 + 3.0, 9)
        assert residuals.size == 22
        np.testing.assert_allclose(residuals, 0.0, atol=1e-12)

    def test_detrend_window_checks(self):
        with pytest.raises(ValueError):
            moving_average_detrend(np.zeros(20), 4)
        with pytest.raises(TraceError):
            moving_average_detrend(np.zeros(5), 9)


class TestSummarize:
    def test_constant_series(self):
        trace = [TraceRecord(step=i, loss=1.5, grad_norm=0.5, lr=0.1, global_token_count=10, per_rank_counts=[10])
                 for i in range(6)]
        summary = trace_diagnostics.summarize(trace)
        assert summary["loss_std"] == 0.0
        assert summary["median_loss"] == 1.5
        assert summary["token_count_cv"] == 0.0
        assert summary["steps"] == 6

    def test_matches_direct_formula(self, rng):
        trace = synthetic_trace(rng, steps=33)
        losses = np.array([r.loss for r in trace])
        summary = trace_diagnostics.summarize(trace)
        assert summary["loss_std"] == pytest.approx(float(np.std(losses)), rel=1e-12)
        assert summary["final_loss"] == losses[-1]

    def test_empty(self):
        with pytest.raises(TraceError):
            trace_diagnostics.summarize([])


class TestRecord:
    def test_order_enforced(self, rng):
        sink = TraceStore()
        trace = synthetic_trace(rng, steps=3)
        trace_diagnostics.record(sink, trace[0])
        trace_diagnostics.record(sink, trace[2])
        with pytest.raises(TraceError, match="out-of-order step"):
            trace_diagnostics.record(sink, trace[1])
        with pytest.raises(TraceError):
            trace_diagnostics.record(sink, trace[2])

    def test_written_records_read_back(self, tmp_path, rng):
        trace = synthetic_trace(rng, steps=5)
        sink = TraceStore(tmp_path / "trace.jsonl")
        for rec in trace:
            trace_diagnostics.record(sink, rec)
        assert sink.read() == trace


@pytest.mark.slow
class TestDetectorSuite:
    """K=2, G=8, 100 steps on the default generator ranges, scored against the fixed run"""

    EXPECTED = {"buggy": 5, "opt-bug": 3, "agg-bug": 4}

    def test_generator_ranges(self):
        data = load_experiment_config(DETECTOR_CONFIG).data
        assert data.len_range == DataConfig().len_range == (4, 32)
        assert data.mask_density_range == DataConfig().mask_density_range == (0.2, 0.9)

    @pytest.mark.parametrize("seed", range(20))
    def test_quadrants_classified(self, seed):
        config = load_experiment_config(DETECTOR_CONFIG, seed=seed)
        run = config.run
        model, dataset = experiment_service.prepare(config)

        traces = {}
        for name, (copy_policy, agg_mode) in VARIANTS.items():
            cfg = run.model_copy(update={"offload": True, "copy_policy": copy_policy, "agg_mode": agg_mode})
            traces[name] = run_training(cfg, model, dataset).trace

        for name, expected in self.EXPECTED.items():
            verdict = detect(traces[name], traces["fixed"], run.accum_steps)
            assert verdict.exit_code == expected, (name, verdict)

        # clean arm: an independent single-device pipeline on the same data
        single_device = reference_train(
            model, dataset, run.optimizer, run.schedule, run.total_steps, run.samples_per_step
        ).to_trace()
        verdict = detect(single_device, traces["fixed"], run.accum_steps)
        assert verdict.exit_code == 0, verdict
