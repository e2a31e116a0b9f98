from enum import Enum
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StrictModel(BaseModel):
    """Base for every config/record model: unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid")


class CopyPolicy(str, Enum):
    """Device -> host gradient copy placement under optimizer offload"""

    FIRST_MICRO_BATCH_ONLY = "first_micro_batch_only"  # copy sits in the micro_step == 0 branch
    EVERY_MICRO_BATCH = "every_micro_batch"


class AggregationMode(str, Enum):
    """How per-cell token losses become the loss that is backpropagated"""

    MEAN_OF_MEANS = "mean_of_means"
    GLOBAL_TOKEN_MEAN = "global_token_mean"


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    COSINE_WARMUP = "cosine_warmup"
    LINEAR = "linear"


class AdamWConfig(StrictModel):
    """AdamW hyperparameters (SFT defaults)"""

    beta1: float = Field(default=0.9, gt=0.0, lt=1.0)
    beta2: float = Field(default=0.999, gt=0.0, lt=1.0)
    # eps=0 is allowed so the first-step analytic value can be checked exactly
    eps: float = Field(default=1e-8, ge=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)


class LrSchedule(StrictModel):
    """Learning-rate schedule: constant (RL), or linear warmup followed by cosine or linear decay (SFT)"""

    kind: ScheduleKind = ScheduleKind.COSINE_WARMUP
    peak: float = Field(default=5e-5, ge=0.0)
    total_steps: int = Field(default=20, ge=1)
    warmup_frac: float = Field(default=0.1, ge=0.0, lt=1.0)
    min_ratio: float = Field(default=0.1, ge=0.0, le=1.0)


class DpConfig(StrictModel):
    """Full description of one simulated data-parallel run"""

    dp_size: int = Field(default=2, ge=1)
    accum_steps: int = Field(default=4, ge=1)
    zero_stage: Literal[1, 2] = 2
    offload: bool = True
    copy_policy: CopyPolicy = CopyPolicy.EVERY_MICRO_BATCH
    agg_mode: AggregationMode = AggregationMode.GLOBAL_TOKEN_MEAN
    optimizer: AdamWConfig = Field(default_factory=AdamWConfig)
    schedule: LrSchedule = Field(default_factory=LrSchedule)
    total_steps: int = Field(default=20, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    micro_batch_size: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_schedule_covers_run(self):
        if self.schedule.total_steps < self.total_steps:
            raise ValueError(
                f"schedule.total_steps ({self.schedule.total_steps}) "
                f"must cover total_steps ({self.total_steps})"
            )
        return self

    @property
    def samples_per_step(self) -> int:
        return self.dp_size * self.accum_steps * self.micro_batch_size

    @property
    def effective_copy_policy(self) -> CopyPolicy:
        # Without offload there is no staging copy to misplace
        if not self.offload:
            return CopyPolicy.EVERY_MICRO_BATCH
        return self.copy_policy


class DataConfig(StrictModel):
    """Synthetic SFT data and toy-model shape"""

    n_samples: Optional[int] = Field(default=None, ge=1)  # None: exactly what the run consumes
    vocab: int = Field(default=16, ge=2)
    hidden: int = Field(default=8, ge=1)
    len_range: Tuple[int, int] = (4, 32)
    mask_density_range: Tuple[float, float] = (0.2, 0.9)
    init_scale: float = Field(default=0.5, gt=0.0)
    label_noise: float = Field(default=0.2, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_ranges(self):
        lo, hi = self.len_range
        if not 1 <= lo <= hi:
            raise ValueError(f"len_range must satisfy 1 <= min <= max, got {self.len_range}")
        dlo, dhi = self.mask_density_range
        if not 0.0 < dlo <= dhi <= 1.0:
            raise ValueError(
                f"mask_density_range must satisfy 0 < lo <= hi <= 1, got {self.mask_density_range}"
            )
        return self


class TraceRecord(BaseModel):
    """One optimizer step as seen by the diagnostics (field order is the file schema)"""

    model_config = ConfigDict(extra="forbid")

    step: int = Field(ge=0)
    loss: float
    grad_norm: float = Field(ge=0.0)
    lr: float
    global_token_count: int = Field(ge=0)
    per_rank_counts: List[int]


class Verdict(BaseModel):
    """Bug signature classification of a candidate trace against a reference"""

    optimizer_bug: bool
    aggregation_bug: bool
    mean_shift: float
    variance_ratio: float
    norm_ratio: float

    @property
    def exit_code(self) -> int:
        if self.optimizer_bug and self.aggregation_bug:
            return 5
        if self.aggregation_bug:
            return 4
        if self.optimizer_bug:
            return 3
        return 0

    @property
    def label(self) -> str:
        return {0: "clean", 3: "optimizer-bug", 4: "aggregation-bug", 5: "both"}[self.exit_code]


class DivergenceReport(BaseModel):
    """Trajectory comparison; steps count optimizer updates from 1"""

    tolerance: float
    first_divergence_step: Optional[int]
    max_param_rel_diff: float
    per_step_param_rel_diff: List[float]
    loss_deltas: List[float]
    # None where the second trajectory's norm is 0 and the first's is not
    grad_norm_ratios: List[Optional[float]]

    @property
    def matches(self) -> bool:
        return self.first_divergence_step is None


class CostModel(StrictModel):
    n_params: float = Field(gt=0)


class ExtraSft(StrictModel):
    """SFT updates interleaved with RL"""

    updates: int = Field(ge=0)
    batch: int = Field(ge=0)
    tokens: float = Field(ge=0)


class SftPretrain(StrictModel):
    """SFT stage run before RL"""

    epochs: int = Field(ge=0)
    samples: int = Field(ge=0)
    tokens: float = Field(ge=0)


class MethodSpec(StrictModel):
    """Training-compute description of a method"""

    name: str
    steps: int = Field(default=0, ge=0)
    batch_size: int = Field(default=0, ge=0)
    on_policy_rollouts: int = Field(default=0, ge=0)
    rollout_tokens: float = Field(default=0, ge=0)
    off_policy_traces: int = Field(default=0, ge=0)
    trace_tokens: float = Field(default=0, ge=0)
    extra_sft: Optional[ExtraSft] = None
    sft_pretrain: Optional[SftPretrain] = None
    prompt_multiplier: float = Field(default=1.0, gt=0)
    # Generation settings recorded for reference only; they do not enter the cost model
    metadata: dict = Field(default_factory=dict)


class FlopsPreset(StrictModel):
    method: MethodSpec
    cost_model: CostModel


class GrpoConfig(StrictModel):
    """Clipped token-level policy-gradient objective"""

    eps_low: float = Field(default=0.2, gt=0.0, lt=1.0)
    eps_high: float = Field(default=0.28, gt=0.0, lt=1.0)
    rollouts_per_prompt: int = Field(default=8, ge=1)
    ppo_epochs: int = Field(default=2, ge=1)


class BanditConfig(StrictModel):
    """Toy GRPO driver settings for grpo-demo"""

    steps: int = Field(default=200, ge=1)
    lr: float = Field(default=0.05, gt=0.0)
    vocab: int = Field(default=16, ge=2)
    hidden: int = Field(default=8, ge=1)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)


class ExperimentConfig(StrictModel):
    """Top-level experiment document consumed by the CLI"""

    run: DpConfig = Field(default_factory=DpConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    bandit: BanditConfig = Field(default_factory=BanditConfig)
    output_dir: str = "runs/default"
    label: str = "default"

    @model_validator(mode="after")
    def check_data_covers_run(self):
        needed = self.run.samples_per_step * self.run.total_steps
        if self.data.n_samples is not None and self.data.n_samples < needed:
            raise ValueError(f"data.n_samples={self.data.n_samples} < {needed} samples consumed by the run")
        return self
