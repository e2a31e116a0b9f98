import numpy as np
import pytest

from app.core.errors import ConfigError, NumericsError
from app.db.models import AggregationMode, CopyPolicy, LrSchedule, ScheduleKind
from app.services.engine import run_training
from app.services.experiment_service import median_or_none
from app.services.oracle import (
    Trajectory,
    buggy_first_batch_oracle,
    compare,
    reference_train,
    zero_mask_transform,
)
from tests.conftest import make_cfg, make_setup


def reference_for(cfg, model, data):
    return reference_train(model, data, cfg.optimizer, cfg.schedule, cfg.total_steps, cfg.samples_per_step)


def final_rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-15)))


class TestReferenceTrain:
    def test_single_rank_single_micro_is_bit_identical(self):
        for mode in AggregationMode:
            for policy in CopyPolicy:
                cfg = make_cfg(dp_size=1, accum_steps=1, total_steps=6, agg_mode=mode, copy_policy=policy)
                model, data = make_setup(cfg, seed=2)
                run = Trajectory.from_run(run_training(cfg, model, data))
                ref = reference_for(cfg, model, data)
                for a, b in zip(run.params, ref.params):
                    np.testing.assert_array_equal(a, b)
                assert run.losses == ref.losses
                assert run.grad_norms == ref.grad_norms

    def test_fixed_run_matches_reference(self):
        cfg = make_cfg(dp_size=4, accum_steps=2, total_steps=20)
        model, data = make_setup(cfg, seed=3)
        run = run_training(cfg, model, data)
        ref = reference_for(cfg, model, data)
        assert final_rel_diff(run.final_params, ref.params[-1]) <= 1e-9

    def test_zero_lr_keeps_params(self):
        cfg = make_cfg(total_steps=4, schedule=LrSchedule(kind=ScheduleKind.CONSTANT, peak=0.0, total_steps=4))
        model, data = make_setup(cfg)
        ref = reference_for(cfg, model, data)
        for p in ref.params:
            np.testing.assert_array_equal(p, model.params)

    def test_sample_order_within_step(self):
        cfg = make_cfg(dp_size=2, accum_steps=2, total_steps=1)
        model, data = make_setup(cfg)
        a = reference_for(cfg, model, data)
        n = cfg.samples_per_step
        b = reference_for(cfg, model, data[:n][::-1] + data[n:])
        assert abs(a.losses[0] - b.losses[0]) <= 1e-12 * abs(a.losses[0])


class TestCompare:
    def test_reflexive(self):
        cfg = make_cfg(total_steps=3)
        model, data = make_setup(cfg)
        traj = reference_for(cfg, model, data)
        report = compare(traj, traj, 0.0)
        assert report.matches
        assert report.max_param_rel_diff == 0.0
        assert report.grad_norm_ratios == [1.0] * 3

    def test_buggy_diverges_at_first_update(self):
        cfg = make_cfg(dp_size=2, accum_steps=4, total_steps=5,
                       schedule=LrSchedule(kind=ScheduleKind.CONSTANT, peak=1e-2, total_steps=5))
        model, data = make_setup(cfg)
        fixed = Trajectory.from_run(run_training(cfg, model, data))
        buggy = Trajectory.from_run(run_training(
            cfg.model_copy(update={"copy_policy": CopyPolicy.FIRST_MICRO_BATCH_ONLY}), model, data
        ))
        assert compare(fixed, buggy, 1e-9).first_divergence_step == 1
        assert compare(buggy, fixed, 1e-9).first_divergence_step == 1

    def test_zero_reference_grad_norm_has_no_ratio(self):
        cfg = make_cfg(total_steps=3)
        model, data = make_setup(cfg)
        traj = reference_for(cfg, model, data)
        flat = Trajectory(traj.params, traj.losses, [0.0, traj.grad_norms[1], 0.0], traj.lrs, traj.token_counts)
        zeros = Trajectory(traj.params, traj.losses, [0.0, 0.0, 0.0], traj.lrs, traj.token_counts)

        report = compare(flat, zeros, 1e-9)
        assert report.grad_norm_ratios == [1.0, None, 1.0]
        assert "Infinity" not in report.model_dump_json()
        assert compare(zeros, flat, 1e-9).grad_norm_ratios == [1.0, 0.0, 1.0]
        assert median_or_none(report.grad_norm_ratios) == 1.0
        assert median_or_none([None, None]) is None

    def test_length_mismatch(self):
        cfg = make_cfg(total_steps=3)
        model, data = make_setup(cfg)
        traj = reference_for(cfg, model, data)
        short = Trajectory(traj.params[:2], traj.losses[:2], traj.grad_norms[:2], traj.lrs[:2], traj.token_counts[:2])
        with pytest.raises(NumericsError, match="length mismatch"):
            compare(traj, short, 1e-9)

    def test_trace_conversion(self):
        cfg = make_cfg(total_steps=3)
        model, data = make_setup(cfg)
        trace = reference_for(cfg, model, data).to_trace()
        assert [r.step for r in trace] == [0, 1, 2]
        assert all(r.per_rank_counts == [r.global_token_count] for r in trace)


class TestBuggyOracle:
    @pytest.mark.parametrize("g", [2, 4, 8])
    @pytest.mark.parametrize("mode", list(AggregationMode))
    def test_characterization_holds(self, g, mode):
        cfg = make_cfg(dp_size=2, accum_steps=g, total_steps=4, agg_mode=mode,
                       copy_policy=CopyPolicy.FIRST_MICRO_BATCH_ONLY)
        model, data = make_setup(cfg, seed=g)
        assert buggy_first_batch_oracle(cfg, model, data)

    def test_single_micro_batch_vacuous(self):
        cfg = make_cfg(accum_steps=1, total_steps=3, copy_policy=CopyPolicy.FIRST_MICRO_BATCH_ONLY)
        model, data = make_setup(cfg)
        assert buggy_first_batch_oracle(cfg, model, data)

    def test_fixed_policy_sanity_arm(self):
        cfg = make_cfg(total_steps=3)
        model, data = make_setup(cfg)
        assert buggy_first_batch_oracle(cfg, model, data)

    def test_requires_offload(self):
        cfg = make_cfg(offload=False, copy_policy=CopyPolicy.FIRST_MICRO_BATCH_ONLY)
        model, data = make_setup(cfg)
        with pytest.raises(ConfigError):
            buggy_first_batch_oracle(cfg, model, data)

    def test_transform_masks_later_micro_steps(self):
        cfg = make_cfg(dp_size=2, accum_steps=3, total_steps=2)
        _, data = make_setup(cfg)
        out = zero_mask_transform(data, cfg)
        for i, sample in enumerate(out):
            if (i % 6) // 2 == 0:
                assert sample is data[i]
            else:
                assert sample.active_count == 0
                np.testing.assert_array_equal(sample.tokens, data[i].tokens)


@pytest.mark.slow
class TestAcceptanceSweeps:
    def _random_cfg(self, rng, **fixed):
        steps = 20
        return make_cfg(
            dp_size=int(rng.choice([1, 2, 4, 8])),
            accum_steps=int(rng.choice([1, 2, 4, 8])),
            zero_stage=int(rng.choice([1, 2])),
            offload=bool(rng.integers(0, 2)),
            total_steps=steps,
            schedule=LrSchedule(kind=ScheduleKind.COSINE_WARMUP, peak=1e-2, total_steps=steps),
            **fixed,
        )

    def test_oracle_equivalence_sweep(self):
        rng = np.random.default_rng(2024)
        for trial in range(200):
            cfg = self._random_cfg(rng)
            vocab, hidden = int(rng.integers(2, 17)), int(rng.integers(1, 9))
            model, data = make_setup(cfg, seed=trial, vocab=vocab, hidden=hidden, len_range=(2, 8))
            run = run_training(cfg, model, data)
            ref = reference_for(cfg, model, data)
            assert final_rel_diff(run.final_params, ref.params[-1]) <= 1e-9, cfg

    def test_buggy_characterization_sweep(self):
        rng = np.random.default_rng(7)
        for trial in range(50):
            cfg = self._random_cfg(rng, copy_policy=CopyPolicy.FIRST_MICRO_BATCH_ONLY)
            cfg = cfg.model_copy(update={
                "offload": True,
                "accum_steps": int(rng.choice([2, 4, 8])),
                "agg_mode": AggregationMode(rng.choice([m.value for m in AggregationMode])),
            })
            model, data = make_setup(cfg, seed=trial, len_range=(2, 8))
            assert buggy_first_batch_oracle(cfg, model, data, tol_rel=1e-12), cfg

    def test_replay_is_byte_identical(self):
        from app.db.trace_store import encode_record

        rng = np.random.default_rng(2024)
        for trial in range(10):
            cfg = self._random_cfg(rng)
            vocab, hidden = int(rng.integers(2, 17)), int(rng.integers(1, 9))
            model, data = make_setup(cfg, seed=trial, vocab=vocab, hidden=hidden, len_range=(2, 8))
            runs = [run_training(cfg, model, data, workers=w) for w in (1, 1, 4)]
            lines = [[encode_record(r) for r in run.trace] for run in runs]
            assert lines[0] == lines[1] == lines[2]
