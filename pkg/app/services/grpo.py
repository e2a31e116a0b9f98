"""
Group-relative policy gradient with asymmetric clipping and a token-level loss.

Advantages are reward minus the group mean (no std normalization); the loss
is normalized once by the group's total masked token count; there is no KL
term.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from app.core.errors import AggregationError, DataError
from app.core.model import TinyLM, log_softmax, weighted_grad
from app.core.numerics import AdamWState, adamw_step, l2_norm, stable_sum
from app.db.models import AdamWConfig, GrpoConfig, TraceRecord

logger = logging.getLogger(__name__)


def group_advantage(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise DataError("empty reward group")
    if np.ptp(r) == 0.0:
        # All-equal group carries no signal; keep it exactly zero
        return np.zeros_like(r)
    return r - stable_sum(r) / r.size


@dataclass
class RolloutGroup:
    """Rewards plus per-rollout per-token log-probs and masks for one prompt"""

    rewards: np.ndarray
    logp_new: List[np.ndarray]
    logp_old: List[np.ndarray]
    masks: List[np.ndarray]

    @classmethod
    def build(cls, rewards, logp_new, logp_old, masks) -> "RolloutGroup":
        rewards = np.asarray(rewards, dtype=np.float64)
        new = [np.asarray(x, dtype=np.float64) for x in logp_new]
        old = [np.asarray(x, dtype=np.float64) for x in logp_old]
        mk = [np.asarray(x, dtype=np.float64) for x in masks]
        if not (rewards.size == len(new) == len(old) == len(mk)):
            raise DataError(
                f"group size mismatch: {rewards.size} rewards, {len(new)}/{len(old)}/{len(mk)} rollouts"
            )
        for i, (a, b, m) in enumerate(zip(new, old, mk)):
            if not (a.shape == b.shape == m.shape):
                raise DataError(f"rollout {i}: logp_new/logp_old/mask lengths differ")
        return cls(rewards=rewards, logp_new=new, logp_old=old, masks=mk)

    @property
    def size(self) -> int:
        return int(self.rewards.size)

    def token_count(self) -> int:
        return int(sum(m.sum() for m in self.masks))


def _branches(group: RolloutGroup, adv: Sequence[float], cfg: GrpoConfig):
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size != group.size:
        raise DataError(f"advantage length {adv.size} != group size {group.size}")
    total = group.token_count()
    if total == 0:
        raise AggregationError("no masked tokens in group")

    out = []
    for a, new, old, mask in zip(adv, group.logp_new, group.logp_old, group.masks):
        ratio = np.exp(new - old)
        unclipped = ratio * a
        clipped = np.clip(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * a
        # min(), ties go to the unclipped branch
        take_unclipped = unclipped <= clipped
        out.append((ratio, unclipped, clipped, take_unclipped, mask, a))
    return out, total


def grpo_token_terms(group: RolloutGroup, adv: Sequence[float], cfg: GrpoConfig) -> List[np.ndarray]:
    """Per-rollout masked min(ratio * A, clip(ratio) * A), before the sign and the token normalization"""
    branches, _ = _branches(group, adv, cfg)
    return [mask * np.where(pick, unc, clp) for _, unc, clp, pick, mask, _ in branches]


def grpo_token_loss(group: RolloutGroup, adv: Sequence[float], cfg: GrpoConfig) -> float:
    total = group.token_count()
    terms = grpo_token_terms(group, adv, cfg)
    return -stable_sum(np.concatenate(terms)) / total


def grpo_grad(group: RolloutGroup, adv: Sequence[float], cfg: GrpoConfig) -> List[np.ndarray]:
    """d loss / d logp_new per rollout per token; the clipped branch is flat"""
    branches, total = _branches(group, adv, cfg)
    return [
        -mask * np.where(pick, ratio * a, 0.0) / total
        for ratio, _, _, pick, mask, a in branches
    ]


@dataclass
class BanditRun:
    trace: List[TraceRecord]
    final_reward: float
    final_params: np.ndarray


def _action_logp(model: TinyLM, prompts: np.ndarray) -> np.ndarray:
    """log pi(action | prompt) for every action (P x V)"""
    return log_softmax(model.embed[prompts] @ model.out_proj)


def _expected_reward(model: TinyLM, prompts: np.ndarray, answers: np.ndarray) -> float:
    probs = np.exp(_action_logp(model, prompts))
    return stable_sum(probs[np.arange(prompts.size), answers]) / prompts.size


def run_bandit(
    cfg: GrpoConfig,
    steps: int,
    seed: int = 0,
    vocab: int = 16,
    hidden: int = 8,
    lr: float = 0.05,
) -> BanditRun:
    """
    Toy categorical-policy bandit over TinyLM.

    Prompts are the first min(V, 4) token ids; an action is one vocab token;
    reward is 1 when action == (3 * prompt + 1) mod V. Each step samples
    rollouts_per_prompt actions per prompt, then runs ppo_epochs updates that
    reuse the sampling log-probs as logp_old. The trace's loss field holds
    the policy's expected reward before the step's update.
    """
    if steps < 1:
        raise DataError(f"steps must be >= 1, got {steps}")
    model = TinyLM.init(vocab, hidden, seed)
    rng = np.random.default_rng([seed, 2])
    prompts = np.arange(min(vocab, 4))
    answers = (3 * prompts + 1) % vocab
    g = cfg.rollouts_per_prompt
    opt = AdamWConfig(weight_decay=0.0)

    params = model.params
    state = AdamWState.fresh(params.size)
    trace: List[TraceRecord] = []

    for step in range(steps):
        model = model.with_params(params)
        reward_before = _expected_reward(model, prompts, answers)

        logp_all = _action_logp(model, prompts)
        actions = np.stack([
            rng.choice(vocab, size=g, p=np.exp(logp_all[i]) / np.exp(logp_all[i]).sum())
            for i in range(prompts.size)
        ])
        rewards = (actions == answers[:, None]).astype(np.float64)
        advantages = [group_advantage(r) for r in rewards]
        logp_old = [logp_all[i, actions[i]] for i in range(prompts.size)]

        grad = np.zeros_like(params)
        for _ in range(cfg.ppo_epochs):
            current = model.with_params(params)
            logp_now = _action_logp(current, prompts)
            tokens, targets, weights = [], [], []
            for i, p in enumerate(prompts):
                group = RolloutGroup.build(
                    rewards[i],
                    [[x] for x in logp_now[i, actions[i]]],
                    [[x] for x in logp_old[i]],
                    [[1.0]] * g,
                )
                coef = np.concatenate(grpo_grad(group, advantages[i], cfg))
                tokens.append(np.full(g, p))
                targets.append(actions[i])
                # d logp / d theta = -d CE / d theta
                weights.append(-coef / prompts.size)
            grad = weighted_grad(
                current, np.concatenate(tokens), np.concatenate(targets), np.concatenate(weights)
            )
            params, state = adamw_step(params, grad, state, opt, lr)

        trace.append(TraceRecord(
            step=step,
            loss=reward_before,
            grad_norm=l2_norm(grad),
            lr=lr,
            global_token_count=prompts.size * g,
            per_rank_counts=[prompts.size * g],
        ))
        logger.debug(f"bandit step {step}: expected reward {reward_before:.4f}")

    final_reward = _expected_reward(model.with_params(params), prompts, answers)
    logger.info(f"✓ Bandit finished: reward {trace[0].loss:.4f} -> {final_reward:.4f} over {steps} steps")
    return BanditRun(trace=trace, final_reward=final_reward, final_params=params)
