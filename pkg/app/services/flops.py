"""
Training-compute estimates: 2ND forward, 4ND backward.

SFT costs 6ND per sample; an on-policy rollout costs 8ND (one generation
pass plus one training forward/backward). Only response tokens are counted
unless a prompt multiplier is set.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, Optional

from pydantic import ValidationError

from app.core.errors import ConfigError
from app.db.models import CostModel, FlopsPreset, MethodSpec

logger = logging.getLogger(__name__)

PRESETS_PATH = Path(__file__).resolve().parent.parent / "data" / "flops_presets.json"


def sft_flops(n_params: float, tokens: float) -> float:
    return 6.0 * n_params * tokens


def rollout_flops(n_params: float, tokens: float) -> float:
    return 8.0 * n_params * tokens


def breakdown(spec: MethodSpec, model: CostModel) -> Dict[str, float]:
    """Every term that enters method_total, per sample and in total"""
    n = model.n_params
    rollouts = spec.on_policy_rollouts * rollout_flops(n, spec.rollout_tokens)
    traces = spec.off_policy_traces * sft_flops(n, spec.trace_tokens)
    per_sample = rollouts + traces
    rl_total = spec.steps * spec.batch_size * per_sample

    extra = 0.0
    if spec.extra_sft is not None:
        extra = spec.extra_sft.updates * spec.extra_sft.batch * sft_flops(n, spec.extra_sft.tokens)

    pretrain = 0.0
    if spec.sft_pretrain is not None:
        pretrain = spec.sft_pretrain.epochs * spec.sft_pretrain.samples * sft_flops(n, spec.sft_pretrain.tokens)

    m = spec.prompt_multiplier
    terms = {
        "rollouts_per_sample": rollouts * m,
        "traces_per_sample": traces * m,
        "per_sample": per_sample * m,
        "rl_total": rl_total * m,
        "extra_sft_total": extra * m,
        "sft_pretrain_total": pretrain * m,
    }
    terms["total"] = terms["rl_total"] + terms["extra_sft_total"] + terms["sft_pretrain_total"]
    return terms


def method_total(spec: MethodSpec, model: CostModel) -> float:
    total = breakdown(spec, model)["total"]
    if total == 0.0:
        raise ConfigError(f"empty method: {spec.name!r} has no nonzero cost component")
    return total


def format_flops(value: float) -> str:
    """Three significant figures, e.g. 6.65e19"""
    if value == 0.0 or not math.isfinite(value):
        return f"{value:.2e}"
    mantissa, exponent = f"{value:.2e}".split("e")
    return f"{mantissa}e{int(exponent)}"


def load_presets(path: Optional[Path] = None) -> Dict[str, FlopsPreset]:
    path = Path(path) if path is not None else PRESETS_PATH
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return {name: FlopsPreset.model_validate(doc) for name, doc in raw.items()}
    except (OSError, json.JSONDecodeError, ValidationError, AttributeError) as e:
        raise ConfigError(f"Cannot load FLOPs presets from {path}: {e}") from e


def load_preset(name: str, path: Optional[Path] = None) -> FlopsPreset:
    presets = load_presets(path)
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(presets))}")
    return presets[name]


def load_method_file(path) -> FlopsPreset:
    """A custom method document shaped like a preset entry: {"method": ..., "cost_model": ...}"""
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        return FlopsPreset.model_validate(document)
    except OSError as e:
        raise ConfigError(f"Cannot read method spec {path}: {e}") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"Invalid method spec {path}: {e}") from e


def resolve_method(name_or_path: str, n_params: Optional[float] = None) -> FlopsPreset:
    """Preset name first, then a path on disk; n_params overrides the cost model"""
    presets = load_presets()
    if name_or_path in presets:
        preset = presets[name_or_path]
    elif Path(name_or_path).exists():
        preset = load_method_file(name_or_path)
    else:
        raise ConfigError(f"unknown preset {name_or_path!r}; known: {', '.join(sorted(presets))}")

    if n_params is not None:
        try:
            preset = preset.model_copy(update={"cost_model": CostModel(n_params=n_params)})
        except ValidationError as e:
            raise ConfigError(f"Invalid --n-params: {e}") from e
    logger.debug(f"Resolved method {preset.method.name!r} with N={preset.cost_model.n_params:.3e}")
    return preset
