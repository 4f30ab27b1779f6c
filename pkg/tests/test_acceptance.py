"""Training experiments on synthetic worlds. They take minutes and only run with ``--acceptance``."""

import dataclasses

import numpy as np
import pytest

from poolselect.evaluation import (
    ProtocolConfig,
    brute_force_oracle,
    evaluate_fixed_combo,
    evaluate_policy,
    modality_subsets,
    policy_mean_reward,
)
from poolselect.pool import PoolSet, load_poolset, max_combo
from poolselect.training import TrainConfig, train
from poolselect.world import World, generate_world, load_world_config
from tests.resources import config_path

pytestmark = [pytest.mark.acceptance]

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def pools() -> PoolSet:
    return load_poolset(config_path("pools-ccvid-1.json"))


@pytest.fixture(scope="module")
def world() -> World:
    return generate_world(42, load_world_config(config_path("world-default.json")))


@pytest.fixture(scope="module")
def heterogeneous_world() -> World:
    return generate_world(42, load_world_config(config_path("world-heterogeneous.json")))


def test_budget_satisfaction(world: World, pools: PoolSet) -> None:
    result = train(world, pools, TrainConfig(epochs=300))
    final = [r.mean_cost for r in result.records if r.epoch >= 250]
    assert abs(np.mean(final) - 0.45) <= 0.05
    assert all(r.lam >= 0 for r in result.records)


def test_adaptive_policy_near_oracle(heterogeneous_world: World) -> None:
    # Only the modality an identity is informative in pays for its heavy model, so no constant combination can
    # match a policy that reads the probe's qualities.
    pools = load_poolset(config_path("pools-light-heavy.json"))
    protocol = ProtocolConfig(reward_pairs=400, reward_lambda=0.1)
    oracle = brute_force_oracle(heterogeneous_world, pools, protocol.reward_lambda, protocol)

    margins = []
    for seed in SEEDS:
        # The multiplier stays at the evaluation value.
        config = TrainConfig(
            epochs=200,
            pairs_per_epoch=128,
            batch_size=16,
            learning_rate=0.003,
            lambda_init=protocol.reward_lambda,
            eta=1e-6,
            seed=seed,
        )
        result = train(heterogeneous_world, pools, config)
        assert abs(result.records[-1].lam - protocol.reward_lambda) < 0.01
        policy = policy_mean_reward(heterogeneous_world, pools, result.params, protocol)
        margins.append(policy - oracle.best_constant_mean_reward)

    assert all(m >= -0.005 for m in margins), margins
    assert any(m > 0 for m in margins), margins


def test_policy_dominates_a_max_combination(world: World, pools: PoolSet) -> None:
    protocol = ProtocolConfig(reward_pairs=50)
    dearest = []
    for modalities in modality_subsets(pools, protocol):
        restricted = pools.restrict(modalities)
        dearest.append(
            evaluate_fixed_combo(world, restricted, max_combo(restricted), protocol)
        )

    for seed in SEEDS:
        result = train(world, pools, TrainConfig(epochs=100, seed=seed))
        report = evaluate_policy(world, pools, result.params, protocol)
        assert any(
            report["rank1"] >= fixed["rank1"] and report["avg_gflops"] <= fixed["avg_gflops"]
            for fixed in dearest
        ), report


def test_entropy_bonus_keeps_policy_stochastic(world: World, pools: PoolSet) -> None:
    for seed in SEEDS:
        config = TrainConfig(epochs=60, seed=seed)
        regularised = train(world, pools, dataclasses.replace(config, entropy_coeff=0.1))
        greedy = train(world, pools, dataclasses.replace(config, entropy_coeff=0.0))
        assert np.mean([r.mean_entropy for r in regularised.records]) > np.mean(
            [r.mean_entropy for r in greedy.records]
        )
