"""
TinyLM: a per-token embedding + output-projection language model.

Gradients are for the masked SUM of per-token cross-entropy; every
normalization (per-cell mean, global token mean, DP scaling) is applied by the
caller through the upstream scale.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from app.core.errors import DataError
from app.core.numerics import stable_sum
from app.db.models import DataConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MicroBatch:
    """Token ids, next-token targets and the response-token loss mask"""

    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @classmethod
    def build(cls, tokens, targets, mask) -> "MicroBatch":
        tokens = np.asarray(tokens, dtype=np.int64).ravel()
        targets = np.asarray(targets, dtype=np.int64).ravel()
        mask = np.asarray(mask, dtype=np.float64).ravel()
        if not (tokens.shape == targets.shape == mask.shape):
            raise DataError(
                f"tokens/targets/mask lengths differ: {tokens.size}/{targets.size}/{mask.size}"
            )
        if np.any((mask != 0.0) & (mask != 1.0)):
            raise DataError("mask entries must be 0 or 1")
        return cls(tokens=tokens, targets=targets, mask=mask)

    @classmethod
    def concat(cls, batches: Sequence["MicroBatch"]) -> "MicroBatch":
        """Concatenate samples into one cell; exact because the model is per-token"""
        if not batches:
            return cls.build([], [], [])
        return cls(
            tokens=np.concatenate([b.tokens for b in batches]),
            targets=np.concatenate([b.targets for b in batches]),
            mask=np.concatenate([b.mask for b in batches]),
        )

    def zero_mask(self) -> "MicroBatch":
        return MicroBatch(tokens=self.tokens, targets=self.targets, mask=np.zeros_like(self.mask))

    @property
    def length(self) -> int:
        return int(self.tokens.size)

    @property
    def active_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class TinyLM:
    """embed: V x H, out_proj: H x V; params = embed row-major then out_proj row-major"""

    embed: np.ndarray
    out_proj: np.ndarray

    @classmethod
    def init(cls, vocab: int, hidden: int, seed: int, init_scale: float = 0.5) -> "TinyLM":
        rng = np.random.default_rng([seed, 0])
        embed = rng.normal(0.0, init_scale, size=(vocab, hidden))
        out_proj = rng.normal(0.0, init_scale / np.sqrt(hidden), size=(hidden, vocab))
        return cls(embed=embed, out_proj=out_proj)

    @classmethod
    def from_params(cls, params, vocab: int, hidden: int) -> "TinyLM":
        flat = np.asarray(params, dtype=np.float64).ravel()
        if flat.size != 2 * vocab * hidden:
            raise DataError(f"expected {2 * vocab * hidden} params, got {flat.size}")
        split = vocab * hidden
        return cls(
            embed=flat[:split].reshape(vocab, hidden).copy(),
            out_proj=flat[split:].reshape(hidden, vocab).copy(),
        )

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def hidden(self) -> int:
        return self.embed.shape[1]

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.embed.ravel(), self.out_proj.ravel()])

    def with_params(self, params) -> "TinyLM":
        return TinyLM.from_params(params, self.vocab_size, self.hidden)

    def check_batch(self, batch: MicroBatch):
        v = self.vocab_size
        for name, ids in (("token", batch.tokens), ("target", batch.targets)):
            if ids.size and (ids.min() < 0 or ids.max() >= v):
                raise DataError(f"{name} id out of range for vocab_size={v}")


def forward(model: TinyLM, batch: MicroBatch) -> np.ndarray:
    """Per-token logits (T x V)"""
    model.check_batch(batch)
    if batch.length == 0:
        return np.zeros((0, model.vocab_size))
    return model.embed[batch.tokens] @ model.out_proj


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def masked_ce(model: TinyLM, batch: MicroBatch) -> Tuple[np.ndarray, int]:
    """Mask-applied per-token cross-entropy and the active-token count"""
    logits = forward(model, batch)
    if batch.length == 0:
        return np.zeros(0), 0
    logp = log_softmax(logits)
    nll = -logp[np.arange(batch.length), batch.targets]
    return batch.mask * nll, batch.active_count


def masked_loss_sum(model: TinyLM, batch: MicroBatch) -> float:
    per_token, _ = masked_ce(model, batch)
    return stable_sum(per_token)


def weighted_grad(model: TinyLM, tokens, targets, weights) -> np.ndarray:
    """Gradient of sum_t weights[t] * CE_t w.r.t. the flattened params"""
    tokens = np.asarray(tokens, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)

    grad_embed = np.zeros_like(model.embed)
    if tokens.size == 0:
        return np.concatenate([grad_embed.ravel(), np.zeros(model.out_proj.size)])

    hidden_states = model.embed[tokens]
    logits = hidden_states @ model.out_proj
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    probs[np.arange(tokens.size), targets] -= 1.0

    d_logits = weights[:, None] * probs
    grad_out = hidden_states.T @ d_logits
    np.add.at(grad_embed, tokens, d_logits @ model.out_proj.T)
    return np.concatenate([grad_embed.ravel(), grad_out.ravel()])


def backward(model: TinyLM, batch: MicroBatch, upstream_scale: float) -> np.ndarray:
    """Exact gradient of upstream_scale * sum(masked per-token loss)"""
    model.check_batch(batch)
    return weighted_grad(model, batch.tokens, batch.targets, upstream_scale * batch.mask)


def finite_diff_grad(model: TinyLM, batch: MicroBatch, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the masked-sum loss, one parameter at a time"""
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    theta = model.params
    grad = np.zeros_like(theta)
    if batch.active_count == 0:
        return grad
    for i in range(theta.size):
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = masked_loss_sum(model.with_params(plus), batch)
        f_minus = masked_loss_sum(model.with_params(minus), batch)
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """max|a - n| normalized by the larger of the two max magnitudes"""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def generate_dataset(cfg: DataConfig, n_samples: int, seed: int) -> List[MicroBatch]:
    """
    Seeded prompt/response samples with heterogeneous active-token counts.

    Each sample draws a length T from len_range and a response density from
    mask_density_range; the last max(1, round(T * density)) positions are the
    response (mask 1), the rest is prompt (mask 0). Targets follow a fixed
    token permutation with label_noise probability of a random target.
    """
    rng = np.random.default_rng([seed, 1])
    vocab = cfg.vocab
    mapping = rng.permutation(vocab)
    lo, hi = cfg.len_range
    dlo, dhi = cfg.mask_density_range

    samples = []
    for _ in range(n_samples):
        length = int(rng.integers(lo, hi + 1))
        density = float(rng.uniform(dlo, dhi))
        tokens = rng.integers(0, vocab, size=length)
        targets = mapping[tokens].copy()
        noisy = rng.random(length) < cfg.label_noise
        targets[noisy] = rng.integers(0, vocab, size=int(noisy.sum()))
        response = min(length, max(1, int(round(length * density))))
        mask = np.zeros(length)
        mask[length - response:] = 1.0
        samples.append(MicroBatch.build(tokens, targets, mask))

    logger.debug(f"Generated {n_samples} samples (vocab={vocab}, len_range={cfg.len_range})")
    return samples
