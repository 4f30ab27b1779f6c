"""Actor-critic training of the selection agent under a cost budget.

Every labelled pair is a one-step episode. The agent looks at the probe, samples an action, the selected models score
the pair and the reward trades the fused score's cross-entropy against the action's normalised cost, weighted by a
Lagrange multiplier that a budget controller adjusts after every batch.
"""

import csv
import dataclasses
import logging
import math
import typing
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from poolselect.agent import (
    AgentDims,
    AgentParams,
    backward,
    entropy_and_gradient,
    forward,
    init_params,
    log_prob_and_gradient,
    sample_action,
)
from poolselect.error import ConfigError, NumericError
from poolselect.files import StrPath, expect_mapping, read_json, reject_unknown_keys
from poolselect.pool import ActionSet, PoolSet, normalized_cost
from poolselect.world import PairSample, SequenceSample, SimilarityOracle, World, make_pairs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 8
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    entropy_coeff: float = 0.01
    critic_weight: float = 0.5
    lambda_init: float = 0.1
    eta: float = 5e-3
    """Step size of the Lagrange multiplier."""
    target_cost: float = 0.45
    curriculum_start: float = 0.9
    """Cost target of the first epoch. The target anneals linearly to ``target_cost``."""
    warmup_fraction: float = 0.3
    """Fraction of the epochs over which the cost target anneals."""
    epochs: int = 50
    pairs_per_epoch: int = 64
    positive_fraction: float = 0.5
    seed: int = 0
    feature_dim: int = 32
    hidden_dim: int = 32
    checkpoint_every: int = 0
    """Write a checkpoint every N epochs. 0 writes only the final checkpoint."""
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        positive = (
            "learning_rate",
            "batch_size",
            "clip_norm",
            "critic_weight",
            "eta",
            "target_cost",
            "epochs",
            "pairs_per_epoch",
            "feature_dim",
            "hidden_dim",
            "adam_eps",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("weight_decay", "entropy_coeff", "lambda_init", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative")
        if self.target_cost > 1:
            raise ConfigError("target_cost must lie in (0, 1]")
        if not self.target_cost <= self.curriculum_start <= 1:
            raise ConfigError("curriculum_start must lie in [target_cost, 1]")
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        if not 0 < self.positive_fraction < 1:
            raise ConfigError("positive_fraction must lie in (0, 1)")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


_CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def train_config_from_document(document: typing.Any) -> TrainConfig:
    document = expect_mapping(document, "training configuration")
    reject_unknown_keys(document, _CONFIG_FIELDS, "training configuration")
    try:
        config = TrainConfig(**document)
    except TypeError as ex:
        raise ConfigError(f"Invalid training configuration: {ex}") from ex
    config.validate()
    return config


def load_train_config(path: StrPath) -> TrainConfig:
    return train_config_from_document(read_json(path))


@dataclass(frozen=True)
class BudgetController:
    """State of the Lagrangian budget controller."""

    lam: float
    """Lagrange multiplier, never negative."""
    eta: float
    target_final: float
    start: float
    warmup_fraction: float
    target: float
    """Cost target of the current epoch."""

    @classmethod
    def from_config(cls, config: TrainConfig) -> "BudgetController":
        return cls(
            lam=config.lambda_init,
            eta=config.eta,
            target_final=config.target_cost,
            start=config.curriculum_start,
            warmup_fraction=config.warmup_fraction,
            target=config.curriculum_start,
        )


def update_lambda(ctrl: BudgetController, mean_cost: float) -> BudgetController:
    """Move the multiplier towards satisfying the budget: ``max(0, lambda + eta * (mean_cost - target))``."""
    return dataclasses.replace(
        ctrl, lam=max(0.0, ctrl.lam + ctrl.eta * (mean_cost - ctrl.target))
    )


def curriculum_target(ctrl: BudgetController, epoch: int, total_epochs: int) -> float:
    """Return the cost target of ``epoch``: a linear anneal from the start value to the final target over the first
    ``warmup_fraction`` of the epochs, constant afterwards."""
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"Epoch {epoch} outside of [0, {total_epochs})")
    warmup = ctrl.warmup_fraction * total_epochs
    if warmup <= 0 or epoch >= warmup:
        return ctrl.target_final
    return ctrl.start + (ctrl.target_final - ctrl.start) * epoch / warmup


def fuse_scores(similarities: Mapping[str, float | Sequence[float]]) -> float:
    """Average the similarities of all modalities. A modality with several selected models contributes the mean of
    their similarities.

    Raises:
        ValueError: if there is no modality
    """
    if len(similarities) == 0:
        raise ValueError("Cannot fuse an empty set of similarities")
    per_modality = []
    for value in similarities.values():
        if isinstance(value, (int, float)):
            per_modality.append(float(value))
        else:
            per_modality.append(sum(value) / len(value))
    return sum(per_modality) / len(per_modality)


def modality_similarities(
    action: ActionSet, pools: PoolSet, pair: PairSample, oracle: SimilarityOracle
) -> dict[str, list[float]]:
    """Score ``pair`` with the models selected by ``action``. Probe and gallery are always embedded by the same
    model."""
    return {
        p.modality: [oracle.similarity(p.models[i], pair) for i in selected]
        for selected, p in zip(action.indices, pools.pools)
    }


def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def reward(s_final: float, y: int, lam: float, cost: float) -> float:
    """Return ``1 - BCE(sigmoid(s_final), y) - lam * cost``."""
    # BCE(sigmoid(s), 1) = softplus(-s), BCE(sigmoid(s), 0) = softplus(s)
    bce = _softplus(-s_final) if y == 1 else _softplus(s_final)
    return 1.0 - bce - lam * cost


@dataclass(frozen=True)
class LossBreakdown:
    actor: float
    critic: float
    total: float


def losses(
    rewards: Sequence[float],
    values: Sequence[float],
    log_probs: Sequence[float],
    entropies: Sequence[float],
    config: TrainConfig,
) -> LossBreakdown:
    """Return the mean actor loss ``-(r - V) log pi - beta H``, the mean critic loss ``(r - V)^2`` and their
    combination ``actor + alpha * critic``. The advantage is a constant in the actor term."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    lp = np.asarray(log_probs, dtype=np.float64)
    h = np.asarray(entropies, dtype=np.float64)
    if not (len(r) == len(v) == len(lp) == len(h)):
        raise ValueError("Batch outcomes differ in length")
    actor = float(np.mean(-(r - v) * lp - config.entropy_coeff * h))
    critic = float(np.mean((r - v) ** 2))
    return LossBreakdown(actor, critic, actor + config.critic_weight * critic)


@dataclass(frozen=True, eq=False)
class BatchItem:
    sample: SequenceSample
    """Sequence the agent conditions on, the probe of the pair."""
    action: ActionSet
    reward: float


@dataclass(frozen=True, eq=False)
class GradientResult:
    gradient: np.ndarray
    """Gradient of the mean total loss in manifest order."""
    losses: LossBreakdown
    mean_entropy: float


def compute_gradients(
    params: AgentParams,
    batch: Sequence[BatchItem],
    pools: PoolSet,
    config: TrainConfig,
) -> GradientResult:
    """Return the gradient of the batch's mean total loss with respect to all agent parameters. Rewards are
    constants.

    Raises:
        poolselect.error.NumericError: if the loss or a gradient block is not finite
    """
    n = len(batch)
    if n == 0:
        raise ValueError("Cannot compute gradients of an empty batch")

    totals = {name: np.zeros(shape) for name, shape in params.manifest()}
    rewards, values, log_probs, entropies = [], [], [], []
    for item in batch:
        trace = forward(item.sample, params, pools)
        log_prob, d_log_prob = log_prob_and_gradient(
            trace.distribution, item.action, pools
        )
        entropy, d_entropy = entropy_and_gradient(trace.distribution, pools)
        if not all(math.isfinite(x) for x in (trace.value, log_prob, entropy)):
            raise NumericError(f"Forward pass on '{item.sample.sample_id}' is not finite")

        advantage = item.reward - trace.value
        d_logits = {
            m: (-advantage * d_log_prob[m] - config.entropy_coeff * d_entropy[m]) / n
            for m in d_log_prob
        }
        d_value = config.critic_weight * 2.0 * (trace.value - item.reward) / n
        for name, grad in backward(trace, params, d_logits, d_value).items():
            totals[name] += grad

        rewards.append(item.reward)
        values.append(trace.value)
        log_probs.append(log_prob)
        entropies.append(entropy)

    for name, grad in totals.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"Gradient of parameter block '{name}' is not finite")

    gradient = np.concatenate([totals[name].ravel() for name, _ in params.manifest()])
    return GradientResult(
        gradient,
        losses(rewards, values, log_probs, entropies, config),
        float(np.mean(entropies)),
    )


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def clip_by_global_norm(gradient: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Scale ``gradient`` down to ``max_norm`` if its norm exceeds it. Returns the clipped gradient and the norm
    before clipping."""
    norm = float(np.linalg.norm(gradient))
    if norm > max_norm:
        return gradient * (max_norm / norm), norm
    return gradient, norm


def adam_update(
    theta: np.ndarray, gradient: np.ndarray, state: AdamState, config: TrainConfig
) -> tuple[np.ndarray, AdamState, float]:
    """Clip ``gradient`` to the global norm ``clip_norm``, add the L2 weight decay term and apply one Adam step.
    Returns the new parameters, the new state and the gradient norm before clipping.

    Raises:
        poolselect.error.NumericError: if the gradient is not finite
    """
    if theta.shape != gradient.shape or theta.shape != state.m.shape:
        raise ValueError("Parameters, gradient and optimizer state differ in shape")
    if not np.all(np.isfinite(gradient)):
        raise NumericError("Gradient is not finite")

    clipped, norm = clip_by_global_norm(gradient, config.clip_norm)
    g = clipped + config.weight_decay * theta
    t = state.t + 1
    m = config.adam_beta1 * state.m + (1.0 - config.adam_beta1) * g
    v = config.adam_beta2 * state.v + (1.0 - config.adam_beta2) * g**2
    m_hat = m / (1.0 - config.adam_beta1**t)
    v_hat = v / (1.0 - config.adam_beta2**t)
    theta = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return theta, AdamState(m, v, t), norm


def optimizer_step(
    params: AgentParams, gradient: np.ndarray, state: AdamState, config: TrainConfig
) -> tuple[AgentParams, AdamState, float]:
    theta, state, norm = adam_update(params.flatten(), gradient, state, config)
    return params.with_vector(theta), state, norm


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    batch: int
    mean_reward: float
    mean_cost: float
    lam: float
    """Multiplier after this batch's update."""
    target: float
    mean_entropy: float
    actor_loss: float
    critic_loss: float
    grad_norm: float
    """Gradient norm before clipping."""


STEP_RECORD_COLUMNS = (
    "epoch",
    "batch",
    "mean_reward",
    "mean_cost",
    "lambda",
    "target",
    "mean_entropy",
    "actor_loss",
    "critic_loss",
    "grad_norm",
)


def write_step_records(records: Sequence[StepRecord], path: StrPath) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(STEP_RECORD_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.epoch,
                    r.batch,
                    repr(r.mean_reward),
                    repr(r.mean_cost),
                    repr(r.lam),
                    repr(r.target),
                    repr(r.mean_entropy),
                    repr(r.actor_loss),
                    repr(r.critic_loss),
                    repr(r.grad_norm),
                ]
            )


def read_step_records(path: StrPath) -> list[StepRecord]:
    with open(path, encoding="utf-8", newline="") as f:
        return [
            StepRecord(
                epoch=int(row["epoch"]),
                batch=int(row["batch"]),
                mean_reward=float(row["mean_reward"]),
                mean_cost=float(row["mean_cost"]),
                lam=float(row["lambda"]),
                target=float(row["target"]),
                mean_entropy=float(row["mean_entropy"]),
                actor_loss=float(row["actor_loss"]),
                critic_loss=float(row["critic_loss"]),
                grad_norm=float(row["grad_norm"]),
            )
            for row in csv.DictReader(f)
        ]


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: AgentParams
    records: list[StepRecord]
    controller: BudgetController


def train(
    world: World,
    pools: PoolSet,
    config: TrainConfig,
    on_epoch_end: Callable[[int, AgentParams], None] | None = None,
) -> TrainResult:
    """Train a fresh agent on pairs drawn from ``world``. The run is fully determined by ``config.seed``.

    Args:
        world: world to draw training pairs from
        pools: model pools the agent selects from
        config: training configuration
        on_epoch_end: called with the epoch number and the current parameters after every epoch

    Returns:
        Final parameters, one record per batch and the final controller state
    """
    config.validate()
    dims = AgentDims(
        descriptor_dim=world.config.descriptor_dim,
        feature_dim=config.feature_dim,
        hidden_dim=config.hidden_dim,
    )
    rng = np.random.default_rng(config.seed)
    params = init_params(dims, pools, int(rng.integers(2**63)))
    adam = AdamState.zeros(params.size())
    ctrl = BudgetController.from_config(config)
    oracle = SimilarityOracle.for_world(world)
    records: list[StepRecord] = []

    logger.info(
        "Training %d parameters for %d epochs on %d samples",
        params.size(),
        config.epochs,
        len(world.samples),
    )

    for epoch in range(config.epochs):
        ctrl = dataclasses.replace(
            ctrl, target=curriculum_target(ctrl, epoch, config.epochs)
        )
        pairs = make_pairs(
            world,
            config.pairs_per_epoch,
            config.positive_fraction,
            int(rng.integers(2**63)),
        )
        for batch_index, start in enumerate(range(0, len(pairs), config.batch_size)):
            items: list[BatchItem] = []
            costs: list[float] = []
            for pair in pairs[start : start + config.batch_size]:
                trace = forward(pair.probe, params, pools)
                action = sample_action(trace.distribution, pools, rng)
                s_final = fuse_scores(modality_similarities(action, pools, pair, oracle))
                cost = normalized_cost(action, pools)
                items.append(
                    BatchItem(pair.probe, action, reward(s_final, pair.label, ctrl.lam, cost))
                )
                costs.append(cost)

            result = compute_gradients(params, items, pools, config)
            params, adam, grad_norm = optimizer_step(params, result.gradient, adam, config)
            mean_cost = float(np.mean(costs))
            ctrl = update_lambda(ctrl, mean_cost)

            record = StepRecord(
                epoch=epoch,
                batch=batch_index,
                mean_reward=float(np.mean([i.reward for i in items])),
                mean_cost=mean_cost,
                lam=ctrl.lam,
                target=ctrl.target,
                mean_entropy=result.mean_entropy,
                actor_loss=result.losses.actor,
                critic_loss=result.losses.critic,
                grad_norm=grad_norm,
            )
            records.append(record)
            logger.debug("Step %s", record)

        epoch_records = [r for r in records if r.epoch == epoch]
        logger.info(
            "Epoch %d: reward %.4f, cost %.4f, lambda %.4f, target %.4f",
            epoch,
            np.mean([r.mean_reward for r in epoch_records]),
            np.mean([r.mean_cost for r in epoch_records]),
            ctrl.lam,
            ctrl.target,
        )
        if on_epoch_end is not None:
            on_epoch_end(epoch, params)

    return TrainResult(params, records, ctrl)
