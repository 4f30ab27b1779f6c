import dataclasses
import math
import pathlib

import numpy as np
import pytest

from poolselect.agent import (
    AgentDims,
    AgentParams,
    action_log_prob,
    forward,
    init_params,
    joint_entropy,
    sample_action,
)
from poolselect.error import ConfigError, NumericError
from poolselect.pool import PoolSet
from poolselect.training import (
    AdamState,
    BatchItem,
    BudgetController,
    StepRecord,
    TrainConfig,
    adam_update,
    clip_by_global_norm,
    compute_gradients,
    curriculum_target,
    fuse_scores,
    load_train_config,
    losses,
    optimizer_step,
    read_step_records,
    reward,
    train,
    train_config_from_document,
    update_lambda,
    write_step_records,
)
from poolselect.world import World, make_pairs
from tests.conftest import make_pool
from tests.gradients import max_relative_error, numeric_gradient
from tests.resources import config_path

TINY = TrainConfig(epochs=2, pairs_per_epoch=16, batch_size=8, feature_dim=4, hidden_dim=4)


def controller(lam: float, target: float, eta: float = 0.005) -> BudgetController:
    return BudgetController(
        lam=lam, eta=eta, target_final=0.45, start=0.9, warmup_fraction=0.3, target=target
    )


def random_batch(
    world: World, pools: PoolSet, params: AgentParams, size: int, seed: int
) -> list[BatchItem]:
    rng = np.random.default_rng(seed)
    batch = []
    for pair in make_pairs(world, size, 0.5, seed):
        trace = forward(pair.probe, params, pools)
        action = sample_action(trace.distribution, pools, rng)
        batch.append(BatchItem(pair.probe, action, float(rng.uniform(-1.0, 1.0))))
    return batch


def mean_total_loss(
    vector: np.ndarray,
    params: AgentParams,
    batch: list[BatchItem],
    pools: PoolSet,
    config: TrainConfig,
    detached_values: list[float],
) -> float:
    """Mean total loss with the advantages' value estimates held at ``detached_values``."""
    candidate = params.with_vector(vector)
    total = 0.0
    for item, v_detached in zip(batch, detached_values):
        trace = forward(item.sample, candidate, pools)
        log_prob = action_log_prob(trace.distribution, item.action, pools)
        entropy = joint_entropy(trace.distribution, pools)
        actor = -(item.reward - v_detached) * log_prob - config.entropy_coeff * entropy
        critic = (item.reward - trace.value) ** 2
        total += actor + config.critic_weight * critic
    return total / len(batch)


class TestFuseScores:
    def test_mean(self) -> None:
        assert fuse_scores({"face": 0.9, "gait": 0.5, "body": 0.7}) == pytest.approx(0.7)

    def test_single_modality(self) -> None:
        assert fuse_scores({"face": 0.4}) == 0.4

    def test_symmetry(self) -> None:
        assert fuse_scores({"face": 1.0, "body": -1.0}) == 0.0

    def test_two_models_per_modality(self) -> None:
        assert fuse_scores({"face": [0.6], "body": [0.2, 0.4]}) == pytest.approx(0.45)

    def test_empty(self) -> None:
        with pytest.raises(ValueError):
            fuse_scores({})


class TestReward:
    def test_match(self) -> None:
        assert reward(1.0, 1, 0.1, 0.27724) == pytest.approx(0.65901, abs=1e-5)

    def test_chance(self) -> None:
        assert reward(0.0, 0, 0.0, 0.8) == pytest.approx(1 - math.log(2))
        assert reward(0.0, 1, 0.0, 0.0) == pytest.approx(1 - math.log(2))

    def test_decreasing_in_cost(self) -> None:
        costs = [0.0, 0.2, 0.5, 1.0]
        rewards = [reward(0.5, 1, 0.3, c) for c in costs]
        assert all(a > b for a, b in zip(rewards, rewards[1:]))

    def test_utility_direction(self) -> None:
        scores = [-0.9, -0.1, 0.3, 0.9]
        positives = [reward(s, 1, 0.0, 0.0) for s in scores]
        negatives = [reward(s, 0, 0.0, 0.0) for s in scores]
        assert all(a < b for a, b in zip(positives, positives[1:]))
        assert all(a > b for a, b in zip(negatives, negatives[1:]))


class TestUpdateLambda:
    def test_above_target(self) -> None:
        assert update_lambda(controller(0.1, 0.45), 0.65).lam == pytest.approx(0.101)

    def test_clamp(self) -> None:
        assert update_lambda(controller(0.0, 0.45), 0.30).lam == 0.0

    def test_equilibrium(self) -> None:
        assert update_lambda(controller(0.1, 0.45), 0.45).lam == 0.1

    def test_other_fields_unchanged(self) -> None:
        before = controller(0.1, 0.6)
        after = update_lambda(before, 0.9)
        assert dataclasses.replace(after, lam=before.lam) == before


class TestCurriculumTarget:
    def test_schedule(self) -> None:
        ctrl = BudgetController.from_config(TrainConfig())
        assert curriculum_target(ctrl, 0, 100) == 0.9
        assert curriculum_target(ctrl, 15, 100) == pytest.approx(0.675)
        assert curriculum_target(ctrl, 30, 100) == 0.45
        assert curriculum_target(ctrl, 99, 100) == 0.45

    def test_monotone(self) -> None:
        ctrl = BudgetController.from_config(TrainConfig())
        targets = [curriculum_target(ctrl, e, 37) for e in range(37)]
        assert all(a >= b for a, b in zip(targets, targets[1:]))
        assert targets[-1] == 0.45

    def test_without_warmup(self) -> None:
        ctrl = BudgetController.from_config(TrainConfig(warmup_fraction=0.0))
        assert curriculum_target(ctrl, 0, 10) == 0.45

    @pytest.mark.parametrize("epoch", [-1, 10])
    def test_out_of_range(self, epoch: int) -> None:
        ctrl = BudgetController.from_config(TrainConfig())
        with pytest.raises(ConfigError):
            curriculum_target(ctrl, epoch, 10)


class TestLosses:
    def test_zero_advantage(self) -> None:
        config = TrainConfig(entropy_coeff=0.0)
        result = losses([0.3, -0.2], [0.3, -0.2], [-1.0, -4.0], [0.5, 0.1], config)
        assert result.actor == 0.0
        assert result.critic == 0.0

    def test_critic(self) -> None:
        assert losses([1.0], [0.0], [-1.0], [0.0], TrainConfig()).critic == 1.0

    def test_entropy_bonus(self) -> None:
        result = losses([0.5], [0.5], [-2.0], [1.09861], TrainConfig())
        assert result.actor == pytest.approx(-0.0109861)

    def test_total(self) -> None:
        result = losses([1.0, 0.0], [0.5, 0.5], [-1.0, -2.0], [0.0, 0.0], TrainConfig())
        # actor: (0.5 + -1.0) / 2, critic: 0.25
        assert result.actor == pytest.approx(-0.25)
        assert result.critic == pytest.approx(0.25)
        assert result.total == pytest.approx(-0.25 + 0.5 * 0.25)


class TestComputeGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(
        self, tiny_world: World, pools_k2: PoolSet, seed: int
    ) -> None:
        pools = pools_k2
        dims = AgentDims(descriptor_dim=6, feature_dim=4, hidden_dim=4)
        params = init_params(dims, pools, seed=seed, output_scale=1.0)
        config = TrainConfig()
        batch = random_batch(tiny_world, pools, params, 8, seed)
        values = [forward(item.sample, params, pools).value for item in batch]

        result = compute_gradients(params, batch, pools, config)
        numeric = numeric_gradient(
            lambda v: mean_total_loss(v, params, batch, pools, config, values),
            params.flatten(),
        )
        assert max_relative_error(result.gradient, numeric) < 1e-4

    def test_after_training(self, tiny_world: World, small_pools: PoolSet) -> None:
        config = dataclasses.replace(TINY, epochs=25)
        trained = train(tiny_world, small_pools, config)
        assert len(trained.records) == 50

        batch = random_batch(tiny_world, small_pools, trained.params, 8, seed=3)
        values = [forward(i.sample, trained.params, small_pools).value for i in batch]
        result = compute_gradients(trained.params, batch, small_pools, config)
        numeric = numeric_gradient(
            lambda v: mean_total_loss(
                v, trained.params, batch, small_pools, config, values
            ),
            trained.params.flatten(),
        )
        assert max_relative_error(result.gradient, numeric) < 1e-4

    def test_zero_advantage_without_entropy(
        self, tiny_world: World, small_pools: PoolSet
    ) -> None:
        dims = AgentDims(descriptor_dim=6, feature_dim=4, hidden_dim=4)
        params = init_params(dims, small_pools, seed=0)
        batch = [
            BatchItem(
                item.sample,
                item.action,
                forward(item.sample, params, small_pools).value,
            )
            for item in random_batch(tiny_world, small_pools, params, 8, seed=0)
        ]
        config = TrainConfig(entropy_coeff=0.0)
        result = compute_gradients(params, batch, small_pools, config)
        assert not result.gradient.any()

    def test_value_bias(self, tiny_world: World, small_pools: PoolSet) -> None:
        dims = AgentDims(descriptor_dim=6, feature_dim=4, hidden_dim=4)
        params = init_params(dims, small_pools, seed=0)
        item = random_batch(tiny_world, small_pools, params, 1, seed=4)[0]
        value = forward(item.sample, params, small_pools).value
        config = TrainConfig()

        result = compute_gradients(params, [item], small_pools, config)
        # value.b2 is the last parameter and only reached by the critic loss.
        assert result.gradient[-1] == pytest.approx(
            config.critic_weight * 2 * (value - item.reward)
        )

    def test_non_finite(self, tiny_world: World, small_pools: PoolSet) -> None:
        dims = AgentDims(descriptor_dim=6, feature_dim=4, hidden_dim=4)
        params = init_params(dims, small_pools, seed=0)
        batch = [
            dataclasses.replace(item, reward=math.nan)
            for item in random_batch(tiny_world, small_pools, params, 2, seed=0)
        ]
        with pytest.raises(NumericError, match="Gradient of parameter block"):
            compute_gradients(params, batch, small_pools, TrainConfig())


class TestOptimizer:
    def test_clip(self) -> None:
        clipped, norm = clip_by_global_norm(np.array([1.2, -1.6]), 1.0)
        assert norm == pytest.approx(2.0)
        assert clipped == pytest.approx([0.6, -0.8])

    def test_no_clip_below_norm(self) -> None:
        gradient = np.array([0.3, 0.4])
        clipped, norm = clip_by_global_norm(gradient, 1.0)
        assert norm == pytest.approx(0.5)
        assert np.array_equal(clipped, gradient)

    def test_clipped_norm_bound(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(20):
            clipped, _ = clip_by_global_norm(rng.normal(scale=10.0, size=50), 1.0)
            assert np.linalg.norm(clipped) <= 1.0 + 1e-9

    def test_first_step(self) -> None:
        config = TrainConfig(weight_decay=0.0)
        theta, state, norm = adam_update(
            np.array([0.0]), np.array([1.0]), AdamState.zeros(1), config
        )
        assert theta[0] == pytest.approx(-5e-4 / (1 + 1e-8), rel=1e-12)
        assert state.t == 1
        assert norm == 1.0

    def test_halved_before_update(self) -> None:
        config = TrainConfig(weight_decay=0.0)
        _, state, norm = adam_update(
            np.zeros(2), np.array([2.0, 0.0]), AdamState.zeros(2), config
        )
        assert norm == 2.0
        # first moment holds (1 - beta1) times the clipped gradient
        assert state.m == pytest.approx([0.1, 0.0])

    def test_weight_decay_enters_moments(self) -> None:
        config = TrainConfig(weight_decay=0.5)
        _, state, _ = adam_update(
            np.array([2.0]), np.array([0.0]), AdamState.zeros(1), config
        )
        assert state.m == pytest.approx([0.1 * 0.5 * 2.0])

    def test_fixed_point(self, small_pools: PoolSet) -> None:
        params = init_params(AgentDims(6, 4, 4), small_pools, seed=0)
        config = TrainConfig(weight_decay=0.0)
        updated, state, norm = optimizer_step(
            params, np.zeros(params.size()), AdamState.zeros(params.size()), config
        )
        assert np.array_equal(updated.flatten(), params.flatten())
        assert norm == 0.0

    def test_non_finite(self) -> None:
        with pytest.raises(NumericError):
            adam_update(
                np.zeros(2), np.array([np.inf, 0.0]), AdamState.zeros(2), TrainConfig()
            )


class TestTrainConfig:
    def test_shipped_defaults(self) -> None:
        assert load_train_config(config_path("train-default.json")) == TrainConfig()

    def test_defaults(self) -> None:
        config = TrainConfig()
        assert config.learning_rate == 5e-4
        assert config.batch_size == 8
        assert config.weight_decay == 1e-4
        assert config.clip_norm == 1.0
        assert config.entropy_coeff == 0.01
        assert config.critic_weight == 0.5
        assert config.lambda_init == 0.1
        assert config.eta == 5e-3
        assert config.target_cost == 0.45

    def test_unknown_key(self) -> None:
        with pytest.raises(ConfigError, match="Unknown keys in training configuration: lr"):
            train_config_from_document({"lr": 0.1})

    @pytest.mark.parametrize(
        "document",
        [
            {"learning_rate": 0},
            {"batch_size": -1},
            {"entropy_coeff": -0.1},
            {"target_cost": 1.5},
            {"curriculum_start": 0.3},
            {"positive_fraction": 1.0},
            {"adam_beta1": 1.0},
        ],
    )
    def test_invalid(self, document: dict[str, float]) -> None:
        with pytest.raises(ConfigError):
            train_config_from_document(document)

    def test_zero_regularisation_allowed(self) -> None:
        config = train_config_from_document(
            {"entropy_coeff": 0, "weight_decay": 0, "lambda_init": 0}
        )
        assert config.entropy_coeff == 0


class TestStepRecords:
    def test_round_trip(self, tmp_path: pathlib.Path) -> None:
        records = [
            StepRecord(0, 0, 0.1, 0.7, 0.101, 0.9, 1.2, -0.3, 0.05, 1.7),
            StepRecord(0, 1, 1 / 3, 2 / 3, 0.1 + 1e-17, 0.8999999999, 2.0, 0.0, 1e-300, 0.5),
        ]
        write_step_records(records, tmp_path / "steps.csv")
        assert read_step_records(tmp_path / "steps.csv") == records

    def test_header(self, tmp_path: pathlib.Path) -> None:
        write_step_records([], tmp_path / "steps.csv")
        assert (tmp_path / "steps.csv").read_text() == (
            "epoch,batch,mean_reward,mean_cost,lambda,target,mean_entropy,actor_loss,critic_loss,grad_norm\n"
        )


class TestTrain:
    def test_bookkeeping(self, tiny_world: World, small_pools: PoolSet) -> None:
        epochs: list[int] = []
        result = train(
            tiny_world, small_pools, TINY, on_epoch_end=lambda e, _: epochs.append(e)
        )
        assert len(result.records) == 2 * 2
        assert [(r.epoch, r.batch) for r in result.records] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert epochs == [0, 1]
        for r in result.records:
            assert all(math.isfinite(v) for v in dataclasses.astuple(r))
            assert r.lam >= 0
            assert 0 < r.mean_cost <= 1

    def test_partial_batch(self, tiny_world: World, small_pools: PoolSet) -> None:
        config = dataclasses.replace(TINY, epochs=1, pairs_per_epoch=10)
        assert [r.batch for r in train(tiny_world, small_pools, config).records] == [0, 1]

    def test_deterministic(self, tiny_world: World, small_pools: PoolSet) -> None:
        first = train(tiny_world, small_pools, TINY)
        second = train(tiny_world, small_pools, TINY)
        assert first.params.flatten().tobytes() == second.params.flatten().tobytes()
        assert first.records == second.records

        other = train(tiny_world, small_pools, dataclasses.replace(TINY, seed=1))
        assert not np.array_equal(first.params.flatten(), other.params.flatten())

    def test_lambda_follows_update_rule(
        self, tiny_world: World, tmp_path: pathlib.Path
    ) -> None:
        # Equal costs make every action cost the maximum.
        pools = PoolSet(
            (
                make_pool("face", [5.0, 5.0]),
                make_pool("gait", [3.0, 3.0, 3.0]),
                make_pool("body", [2.0, 2.0]),
            )
        )
        config = dataclasses.replace(TINY, epochs=6, eta=0.01)
        result = train(tiny_world, pools, config)
        write_step_records(result.records, tmp_path / "steps.csv")
        records = read_step_records(tmp_path / "steps.csv")

        previous = config.lambda_init
        for r in records:
            assert r.mean_cost == 1.0
            assert r.lam > previous
            assert abs((r.lam - previous) - config.eta * (r.mean_cost - r.target)) < 1e-12
            previous = r.lam

    def test_curriculum_in_records(self, tiny_world: World, small_pools: PoolSet) -> None:
        config = dataclasses.replace(TINY, epochs=10)
        records = train(tiny_world, small_pools, config).records
        targets = [r.target for r in records if r.batch == 0]
        assert targets[0] == 0.9
        assert targets[-1] == 0.45
        assert targets == sorted(targets, reverse=True)

    def test_policy_changes(self, tiny_world: World, small_pools: PoolSet) -> None:
        result = train(tiny_world, small_pools, TINY)
        initial = init_params(
            AgentDims(6, TINY.feature_dim, TINY.hidden_dim),
            small_pools,
            int(np.random.default_rng(TINY.seed).integers(2**63)),
        )
        assert not np.array_equal(result.params.flatten(), initial.flatten())
