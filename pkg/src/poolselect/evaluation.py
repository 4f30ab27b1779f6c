"""Recognition protocol: Rank-1, mAP, GFLOPs accounting, fixed-combination baselines and brute-force oracles."""

import csv
import dataclasses
import itertools
import logging
import typing
from collections import Counter
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TypedDict

import numpy as np

from poolselect.agent import AgentParams, check_compatible, forward, greedy_action
from poolselect.error import CombinationLimitError, ConfigError, ProtocolError, ShapeError
from poolselect.files import StrPath, expect_mapping, read_json, reject_unknown_keys
from poolselect.pool import (
    ActionSet,
    PoolSet,
    check_action,
    combo_id,
    count_actions,
    enumerate_actions,
    modality_costs,
    normalized_cost,
    total_gflops,
)
from poolselect.training import fuse_scores, modality_similarities, reward
from poolselect.world import (
    PairSample,
    SequenceSample,
    SimilarityOracle,
    World,
    gallery_split,
    make_pairs,
    quality_vector,
)

logger = logging.getLogger(__name__)

Chooser = Callable[[SequenceSample], ActionSet]
"""Picks the action used to score a probe."""


class EvalReport(TypedDict):
    """Outcome of the recognition protocol for one selection strategy."""

    modalities: list[str]
    """Active modalities."""
    rank1: float
    map: float
    avg_gflops: float
    """Average GFLOPs per probe, the histogram-weighted sum of the combination costs."""
    selection_histogram: dict[str, float]
    """Frequency of every selected combination, keyed by combination id."""
    modality_gflops: dict[str, float]
    """Average GFLOPs per probe and modality."""
    mean_reward: float
    """Mean reward on the protocol's labelled pairs."""
    probes: int
    gallery: int


class ParetoPoint(TypedDict):
    combo_id: str
    gflops: float
    rank1: float
    map: float


class OperatingPoint(TypedDict):
    target: float
    avg_gflops: float
    rank1: float
    map: float
    mean_cost: float
    """Mean normalised cost of the sampled actions in the last training epoch."""


class TraceEntry(TypedDict):
    sample_id: str
    identity: int
    combo_id: str
    gflops: float
    normalized_cost: float
    quality: dict[str, float]


@dataclass(frozen=True)
class ProtocolConfig:
    seed: int = 0
    """Seed of the labelled pairs the mean rewards are computed on."""
    reward_pairs: int = 200
    reward_lambda: float = 0.1
    """Multiplier of the cost term in protocol rewards."""
    positive_fraction: float = 0.5
    combination_cap: int = 10_000
    """Largest number of joint actions a brute-force search may enumerate."""
    subsets: tuple[tuple[str, ...], ...] | None = None
    """Modality subsets of the ablation. ``None`` means every non-empty subset."""
    threads: int = 1

    def validate(self) -> None:
        if self.reward_pairs < 1:
            raise ConfigError("reward_pairs must be positive")
        if self.reward_lambda < 0:
            raise ConfigError("reward_lambda must not be negative")
        if not 0 < self.positive_fraction < 1:
            raise ConfigError("positive_fraction must lie in (0, 1)")
        if self.combination_cap < 1:
            raise ConfigError("combination_cap must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if self.subsets is not None:
            for subset in self.subsets:
                if len(subset) == 0:
                    raise ConfigError("Modality subsets must not be empty")


_PROTOCOL_FIELDS = tuple(f.name for f in dataclasses.fields(ProtocolConfig))


def protocol_config_from_document(document: typing.Any) -> ProtocolConfig:
    document = expect_mapping(document, "protocol configuration")
    reject_unknown_keys(document, _PROTOCOL_FIELDS, "protocol configuration")
    values = dict(document)
    if values.get("subsets") is not None:
        subsets = values["subsets"]
        if not isinstance(subsets, list) or not all(
            isinstance(s, list) for s in subsets
        ):
            raise ConfigError("subsets must be a list of modality lists")
        values["subsets"] = tuple(tuple(s) for s in subsets)
    try:
        config = ProtocolConfig(**values)
    except TypeError as ex:
        raise ConfigError(f"Invalid protocol configuration: {ex}") from ex
    config.validate()
    return config


def load_protocol_config(path: StrPath) -> ProtocolConfig:
    return protocol_config_from_document(read_json(path))


def modality_subsets(pools: PoolSet, protocol: ProtocolConfig) -> list[tuple[str, ...]]:
    """Return the protocol's modality subsets, or every non-empty subset of the pool set in pool order."""
    if protocol.subsets is not None:
        return list(protocol.subsets)
    modalities = pools.modalities
    return [
        subset
        for size in range(1, len(modalities) + 1)
        for subset in itertools.combinations(modalities, size)
    ]


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Similarities of probes (rows) against gallery entries (columns)."""

    scores: np.ndarray
    probe_labels: np.ndarray
    """Identity of every probe."""
    gallery_labels: np.ndarray
    """Identity of every gallery entry."""
    probe_names: tuple[str, ...] = ()
    gallery_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        rows, cols = len(self.probe_labels), len(self.gallery_labels)
        if self.scores.shape != (rows, cols):
            raise ShapeError(
                f"Score matrix of shape {self.scores.shape} does not match {rows} probes and {cols} gallery entries"
            )
        if self.probe_names and len(self.probe_names) != rows:
            raise ShapeError("Number of probe names differs from number of probes")
        if self.gallery_names and len(self.gallery_names) != cols:
            raise ShapeError("Number of gallery names differs from gallery size")
        if not np.all(np.isfinite(self.scores)):
            raise ProtocolError("Score matrix contains non-finite entries")


def _check_matches(scores: ScoreMatrix) -> None:
    enrolled = set(scores.gallery_labels.tolist())
    for row, label in enumerate(scores.probe_labels.tolist()):
        if label not in enrolled:
            raise ProtocolError(f"Probe {row} has no gallery entry of identity {label}")


def rank1(scores: ScoreMatrix) -> float:
    """Return the fraction of probes whose best-scoring gallery entry shares their identity. Ties go to the lowest
    gallery index.

    Raises:
        poolselect.error.ProtocolError: if a probe's identity is not enrolled in the gallery
    """
    _check_matches(scores)
    if len(scores.probe_labels) == 0:
        return 0.0
    best = np.argmax(scores.scores, axis=1)
    return float(np.mean(scores.gallery_labels[best] == scores.probe_labels))


def mean_average_precision(scores: ScoreMatrix) -> float:
    """Return the mean over probes of the average precision. The average precision of a probe is the mean of the
    precision at the rank of every relevant gallery entry, ranking by descending score with ties to the lowest index.

    Raises:
        poolselect.error.ProtocolError: if a probe's identity is not enrolled in the gallery
    """
    _check_matches(scores)
    if len(scores.probe_labels) == 0:
        return 0.0
    aps = []
    for row, label in zip(scores.scores, scores.probe_labels):
        order = np.argsort(-row, kind="stable")
        matches = scores.gallery_labels[order] == label
        ranks = np.flatnonzero(matches) + 1
        hits = np.cumsum(matches)[ranks - 1]
        aps.append(float(np.mean(hits / ranks)))
    return float(np.mean(aps))


@dataclass(frozen=True, eq=False)
class Evaluation:
    """Complete outcome of a protocol run."""

    report: EvalReport
    scores: ScoreMatrix
    actions: list[ActionSet]
    """Action used for every probe, in probe order."""
    oracle_calls: int
    """Number of (pair, model) similarities computed to score the probes."""


def _score_probe(
    world: World,
    pools: PoolSet,
    probe: SequenceSample,
    gallery: Sequence[SequenceSample],
    action: ActionSet,
) -> tuple[list[float], int]:
    oracle = SimilarityOracle.for_world(world)
    row = []
    for entry in gallery:
        pair = PairSample(probe, entry, int(probe.identity == entry.identity))
        row.append(fuse_scores(modality_similarities(action, pools, pair, oracle)))
    return row, oracle.calls


def protocol_pairs(world: World, protocol: ProtocolConfig) -> list[PairSample]:
    return make_pairs(
        world, protocol.reward_pairs, protocol.positive_fraction, protocol.seed
    )


def pair_reward(
    action: ActionSet,
    pools: PoolSet,
    pair: PairSample,
    oracle: SimilarityOracle,
    lam: float,
) -> float:
    s_final = fuse_scores(modality_similarities(action, pools, pair, oracle))
    return reward(s_final, pair.label, lam, normalized_cost(action, pools))


def run_protocol(
    world: World, pools: PoolSet, choose: Chooser, protocol: ProtocolConfig
) -> Evaluation:
    """Score every probe against the whole gallery with the models ``choose`` selects for the probe. Probe and gallery
    entry are always embedded by the same models.

    Args:
        world: world providing gallery and probes
        pools: active model pools
        choose: strategy picking an action per probe
        protocol: protocol configuration

    Returns:
        Report, score matrix, actions and oracle call count
    """
    protocol.validate()
    gallery, probes = gallery_split(world)
    actions = [choose(p) for p in probes]
    for a in actions:
        check_action(a, pools)

    def work(index: int) -> tuple[list[float], int]:
        return _score_probe(world, pools, probes[index], gallery, actions[index])

    if protocol.threads > 1:
        with ThreadPoolExecutor(max_workers=protocol.threads) as executor:
            rows = list(executor.map(work, range(len(probes))))
    else:
        rows = [work(i) for i in range(len(probes))]

    scores = ScoreMatrix(
        np.asarray([r for r, _ in rows], dtype=np.float64).reshape(
            len(probes), len(gallery)
        ),
        np.asarray([p.identity for p in probes]),
        np.asarray([g.identity for g in gallery]),
        tuple(p.sample_id for p in probes),
        tuple(g.sample_id for g in gallery),
    )

    counts = Counter(combo_id(a, pools) for a in actions)
    representative = {combo_id(a, pools): a for a in actions}
    histogram = {key: counts[key] / len(actions) for key in sorted(counts)}
    avg_gflops = sum(
        frequency * total_gflops(representative[key], pools)
        for key, frequency in histogram.items()
    )
    per_modality = {m: 0.0 for m in pools.modalities}
    for key, frequency in histogram.items():
        for m, cost in modality_costs(representative[key], pools).items():
            per_modality[m] += frequency * cost

    oracle = SimilarityOracle.for_world(world)
    pair_rewards = [
        pair_reward(choose(pair.probe), pools, pair, oracle, protocol.reward_lambda)
        for pair in protocol_pairs(world, protocol)
    ]

    report: EvalReport = {
        "modalities": list(pools.modalities),
        "rank1": rank1(scores),
        "map": mean_average_precision(scores),
        "avg_gflops": avg_gflops,
        "selection_histogram": histogram,
        "modality_gflops": per_modality,
        "mean_reward": float(np.mean(pair_rewards)),
        "probes": len(probes),
        "gallery": len(gallery),
    }
    logger.info(
        "Evaluated %s: rank1 %.4f, mAP %.4f, %.2f GFLOPs on average",
        "+".join(pools.modalities),
        report["rank1"],
        report["map"],
        avg_gflops,
    )
    return Evaluation(report, scores, actions, sum(c for _, c in rows))


def policy_chooser(params: AgentParams, pools: PoolSet) -> Chooser:
    """Return the greedy policy of ``params`` as a chooser."""
    check_compatible(params, pools)

    def choose(sample: SequenceSample) -> ActionSet:
        return greedy_action(forward(sample, params, pools).distribution, pools)

    return choose


def evaluate_policy(
    world: World, pools: PoolSet, params: AgentParams, protocol: ProtocolConfig
) -> EvalReport:
    """Evaluate the greedy policy of ``params``. Every probe selects its models from its own pooled representation."""
    return run_protocol(world, pools, policy_chooser(params, pools), protocol).report


def evaluate_fixed_combo(
    world: World, pools: PoolSet, combo: ActionSet, protocol: ProtocolConfig
) -> EvalReport:
    """Evaluate the constant action ``combo``.

    Raises:
        poolselect.error.InvalidActionError: if ``combo`` is not a valid action of ``pools``
    """
    check_action(combo, pools)
    fixed = ActionSet(combo.indices)
    return run_protocol(world, pools, lambda _: fixed, protocol).report


def modality_ablation(
    world: World,
    pools: PoolSet,
    params: AgentParams,
    subsets: Iterable[Sequence[str]],
    protocol: ProtocolConfig,
) -> list[tuple[tuple[str, ...], EvalReport]]:
    """Evaluate the policy on every modality subset. Fusion averages over the active modalities only.

    Raises:
        poolselect.error.ConfigError: if a subset is empty or names a modality without pool
    """
    results = []
    for subset in subsets:
        restricted = pools.restrict(subset)
        results.append(
            (restricted.modalities, evaluate_policy(world, restricted, params, protocol))
        )
    return results


@dataclass(frozen=True, eq=False)
class OracleResult:
    """Exhaustive optimum over all joint actions on the protocol pairs."""

    actions: list[ActionSet]
    """Every joint action, in enumeration order."""
    per_input_best: list[ActionSet]
    """Reward-maximising action of every pair."""
    per_input_mean_reward: float
    best_constant: ActionSet
    best_constant_mean_reward: float
    rewards: np.ndarray
    """Reward of every (pair, action)."""


def brute_force_oracle(
    world: World, pools: PoolSet, lam: float, protocol: ProtocolConfig
) -> OracleResult:
    """Enumerate every joint action on the protocol pairs and return the best action per pair and the best constant
    action. Ties go to the action enumerated first.

    Raises:
        poolselect.error.CombinationLimitError: if there are more joint actions than ``combination_cap``
    """
    protocol.validate()
    count = count_actions(pools)
    if count > protocol.combination_cap:
        raise CombinationLimitError(
            f"Pools have {count} joint actions, more than the cap of {protocol.combination_cap}"
        )
    actions = list(enumerate_actions(pools))
    costs = np.asarray([normalized_cost(a, pools) for a in actions])
    pairs = protocol_pairs(world, protocol)
    oracle = SimilarityOracle.for_world(world)

    rewards = np.empty((len(pairs), len(actions)))
    for row, pair in enumerate(pairs):
        # Score every model once per pair, then combine.
        sims = [
            np.asarray([oracle.similarity(model, pair) for model in p.models])
            for p in pools.pools
        ]
        for col, action in enumerate(actions):
            s_final = float(
                np.mean(
                    [np.mean(s[list(selected)]) for s, selected in zip(sims, action.indices)]
                )
            )
            rewards[row, col] = reward(s_final, pair.label, lam, float(costs[col]))

    best_per_input = np.argmax(rewards, axis=1)
    constant_means = rewards.mean(axis=0)
    best_constant = int(np.argmax(constant_means))
    logger.info(
        "Searched %d joint actions on %d pairs, best constant %s",
        len(actions),
        len(pairs),
        combo_id(actions[best_constant], pools),
    )
    return OracleResult(
        actions=actions,
        per_input_best=[actions[int(i)] for i in best_per_input],
        per_input_mean_reward=float(np.mean(rewards[np.arange(len(pairs)), best_per_input])),
        best_constant=actions[best_constant],
        best_constant_mean_reward=float(constant_means[best_constant]),
        rewards=rewards,
    )


def policy_mean_reward(
    world: World, pools: PoolSet, params: AgentParams, protocol: ProtocolConfig
) -> float:
    """Return the mean reward of the greedy policy on the protocol pairs, with ``reward_lambda`` as multiplier."""
    choose = policy_chooser(params, pools)
    oracle = SimilarityOracle.for_world(world)
    return float(
        np.mean(
            [
                pair_reward(choose(pair.probe), pools, pair, oracle, protocol.reward_lambda)
                for pair in protocol_pairs(world, protocol)
            ]
        )
    )


def selection_trace(
    world: World, pools: PoolSet, params: AgentParams
) -> list[TraceEntry]:
    """Return the combination the greedy policy selects for every probe together with the probe's qualities."""
    choose = policy_chooser(params, pools)
    _, probes = gallery_split(world)
    trace: list[TraceEntry] = []
    for probe in probes:
        action = choose(probe)
        trace.append(
            {
                "sample_id": probe.sample_id,
                "identity": probe.identity,
                "combo_id": combo_id(action, pools),
                "gflops": total_gflops(action, pools),
                "normalized_cost": normalized_cost(action, pools),
                "quality": dict(zip(pools.modalities, quality_vector(probe, pools.modalities))),
            }
        )
    return trace


def pareto_front(points: Iterable[ParetoPoint]) -> list[ParetoPoint]:
    """Return the points no other point dominates, by ascending GFLOPs. A point dominates another if it costs at most
    as much, is at least as accurate and is strictly better in one of the two."""
    candidates = list(points)
    front = [
        p
        for p in candidates
        if not any(
            q["gflops"] <= p["gflops"]
            and q["rank1"] >= p["rank1"]
            and (q["gflops"] < p["gflops"] or q["rank1"] > p["rank1"])
            for q in candidates
        )
    ]
    return sorted(front, key=lambda p: (p["gflops"], p["combo_id"]))


def pareto_point(action: ActionSet, pools: PoolSet, report: EvalReport) -> ParetoPoint:
    return {
        "combo_id": combo_id(action, pools),
        "gflops": total_gflops(action, pools),
        "rank1": report["rank1"],
        "map": report["map"],
    }


def _csv_writer(f: typing.IO[str]) -> typing.Any:
    return csv.writer(f, lineterminator="\n")


def write_score_matrix(scores: ScoreMatrix, path: StrPath) -> None:
    probe_names = scores.probe_names or tuple(
        str(i) for i in range(len(scores.probe_labels))
    )
    gallery_names = scores.gallery_names or tuple(
        str(i) for i in range(len(scores.gallery_labels))
    )
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = _csv_writer(f)
        writer.writerow(["probe", *gallery_names])
        for name, row in zip(probe_names, scores.scores):
            writer.writerow([name, *(repr(float(v)) for v in row)])


def write_histogram(report: EvalReport, gflops: dict[str, float], path: StrPath) -> None:
    """Write the selection histogram as ``combo_id,frequency,gflops`` rows."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = _csv_writer(f)
        writer.writerow(["combo_id", "frequency", "gflops"])
        for key, frequency in report["selection_histogram"].items():
            writer.writerow([key, repr(frequency), repr(gflops[key])])


def combo_gflops(actions: Iterable[ActionSet], pools: PoolSet) -> dict[str, float]:
    return {combo_id(a, pools): total_gflops(a, pools) for a in actions}


def write_trace(trace: Sequence[TraceEntry], modalities: Sequence[str], path: StrPath) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = _csv_writer(f)
        writer.writerow(
            [
                "sample_id",
                "identity",
                "combo_id",
                "gflops",
                "normalized_cost",
                *(f"quality_{m}" for m in modalities),
            ]
        )
        for entry in trace:
            writer.writerow(
                [
                    entry["sample_id"],
                    entry["identity"],
                    entry["combo_id"],
                    repr(entry["gflops"]),
                    repr(entry["normalized_cost"]),
                    *(repr(entry["quality"][m]) for m in modalities),
                ]
            )


def write_pareto_table(points: Iterable[ParetoPoint], path: StrPath) -> None:
    """Write all points as ``combo_id,gflops,rank1,map`` rows by ascending GFLOPs."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = _csv_writer(f)
        writer.writerow(["combo_id", "gflops", "rank1", "map"])
        for p in sorted(points, key=lambda p: (p["gflops"], p["combo_id"])):
            writer.writerow([p["combo_id"], repr(p["gflops"]), repr(p["rank1"]), repr(p["map"])])


def write_operating_points(points: Iterable[OperatingPoint], path: StrPath) -> None:
    """Write one ``target,avg_gflops,rank1,map,mean_cost`` row per point, in the given order."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = _csv_writer(f)
        writer.writerow(["target", "avg_gflops", "rank1", "map", "mean_cost"])
        for p in points:
            writer.writerow(
                [
                    repr(p["target"]),
                    repr(p["avg_gflops"]),
                    repr(p["rank1"]),
                    repr(p["map"]),
                    repr(p["mean_cost"]),
                ]
            )
