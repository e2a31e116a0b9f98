import numpy as np
import pytest

from app.core.model import MicroBatch, TinyLM, generate_dataset
from app.db.models import (
    AggregationMode,
    CopyPolicy,
    DataConfig,
    DpConfig,
    LrSchedule,
    ScheduleKind,
)


def make_cfg(**overrides) -> DpConfig:
    """Small run config; total_steps also sizes the schedule"""
    steps = overrides.pop("total_steps", 5)
    schedule = overrides.pop(
        "schedule",
        LrSchedule(kind=ScheduleKind.COSINE_WARMUP, peak=1e-2, total_steps=steps),
    )
    base = dict(
        dp_size=2,
        accum_steps=4,
        zero_stage=2,
        offload=True,
        copy_policy=CopyPolicy.EVERY_MICRO_BATCH,
        agg_mode=AggregationMode.GLOBAL_TOKEN_MEAN,
        total_steps=steps,
        schedule=schedule,
    )
    base.update(overrides)
    return DpConfig(**base)


def make_setup(cfg: DpConfig, seed: int = 0, vocab: int = 8, hidden: int = 4, **data_kw):
    data = DataConfig(vocab=vocab, hidden=hidden, **data_kw)
    model = TinyLM.init(vocab, hidden, seed)
    dataset = generate_dataset(data, cfg.samples_per_step * cfg.total_steps, seed)
    return model, dataset


def random_batch(rng: np.random.Generator, vocab: int, length: int, density: float = 0.6) -> MicroBatch:
    tokens = rng.integers(0, vocab, size=length)
    targets = rng.integers(0, vocab, size=length)
    mask = (rng.random(length) < density).astype(float)
    mask[rng.integers(0, length)] = 1.0
    return MicroBatch.build(tokens, targets, mask)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return TinyLM.init(vocab=6, hidden=3, seed=7)
