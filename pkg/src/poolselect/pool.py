import itertools
import logging
import math
import typing
from collections.abc import Iterable, Iterator
from dataclasses import dataclass

from poolselect.error import ConfigError, InvalidActionError
from poolselect.files import StrPath, expect_mapping, read_json, reject_unknown_keys

logger = logging.getLogger(__name__)

DEFAULT_MODALITIES: tuple[str, ...] = ("face", "gait", "body")
"""Modalities of the reference pools. Pools may use any other modality tag."""


@dataclass(frozen=True)
class ModelSpec:
    """Entry of a model pool."""

    id: str
    modality: str
    cost_gflops: float
    """GFLOPs of one forward pass over a sequence."""
    discriminability: float
    """Synthetic recognition power in (0, 1]."""
    embed_dim: int = 512
    """Embedding dimension. Metadata only."""


@dataclass(frozen=True)
class ModalityPool:
    """Ordered candidate models of one modality. Indices in actions refer to the order of ``models``."""

    modality: str
    models: tuple[ModelSpec, ...]
    select_k: int = 1

    @property
    def size(self) -> int:
        return len(self.models)

    @property
    def costs(self) -> tuple[float, ...]:
        return tuple(m.cost_gflops for m in self.models)

    def peak_cost(self) -> float:
        """Sum of the ``select_k`` largest costs, the normaliser of this modality's cost term."""
        return sum(sorted(self.costs, reverse=True)[: self.select_k])


@dataclass(frozen=True)
class PoolSet:
    """Model pools of all active modalities."""

    pools: tuple[ModalityPool, ...]

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(p.modality for p in self.pools)

    def pool(self, modality: str) -> ModalityPool:
        for p in self.pools:
            if p.modality == modality:
                return p
        raise ConfigError(f"Modality '{modality}' has no pool")

    def restrict(self, modalities: Iterable[str]) -> "PoolSet":
        """Return the pools of the given ``modalities``, in the order of this pool set."""
        wanted = set(modalities)
        unknown = sorted(wanted - set(self.modalities))
        if unknown:
            raise ConfigError(f"Modalities without pool: {', '.join(unknown)}")
        if not wanted:
            raise ConfigError("At least one modality is required")
        return PoolSet(tuple(p for p in self.pools if p.modality in wanted))


@dataclass(frozen=True)
class ActionSet:
    """Selected model indices, one tuple per pool in pool-set order."""

    indices: tuple[tuple[int, ...], ...]
    log_prob: float = 0.0
    """Joint log-probability under the sequential sampling factorisation."""
    entropy: float = 0.0
    """Joint entropy of the distribution the action was drawn from."""


def validate_poolset(pools: PoolSet) -> list[str]:
    """Return all invariant violations of ``pools``. An empty list means the pool set is valid."""
    errors: list[str] = []
    if len(pools.pools) == 0:
        errors.append("pool set has no pools")

    seen_modalities: set[str] = set()
    for p in pools.pools:
        if p.modality in seen_modalities:
            errors.append(f"{p.modality}: duplicate modality")
        seen_modalities.add(p.modality)

        if p.size == 0:
            errors.append(f"{p.modality}: pool has no models")
        if p.select_k < 1:
            errors.append(f"{p.modality}: select_k must be positive")
        elif p.select_k > p.size:
            errors.append(f"{p.modality}: select_k exceeds pool size")

        seen_ids: set[str] = set()
        for m in p.models:
            if m.id in seen_ids:
                errors.append(f"{p.modality}: duplicate id '{m.id}'")
            seen_ids.add(m.id)
            if m.modality != p.modality:
                errors.append(
                    f"{p.modality}: model '{m.id}' belongs to modality '{m.modality}'"
                )
            if not (math.isfinite(m.cost_gflops) and m.cost_gflops > 0):
                errors.append(f"{p.modality}: model '{m.id}' needs a positive cost")
            if not (0 < m.discriminability <= 1):
                errors.append(
                    f"{p.modality}: model '{m.id}' needs a discriminability in (0, 1]"
                )
            if m.embed_dim < 1:
                errors.append(
                    f"{p.modality}: model '{m.id}' needs a positive embedding dimension"
                )

    return errors


def poolset_from_document(document: typing.Any) -> PoolSet:
    """Build a :py:class:`PoolSet` from a parsed pool configuration. The document is either an array of modalities or
    an object whose ``modalities`` member is that array. Each modality has a ``name``, an optional ``select_k``
    (default 1) and ``models`` with ``id``, ``cost_gflops``, ``discriminability`` and optional ``embed_dim``.

    Raises:
        poolselect.error.ConfigError: if the document is malformed or the pool set is invalid
    """
    if isinstance(document, dict):
        reject_unknown_keys(document, ("modalities", "description"), "pool set")
        document = document.get("modalities")
    if not isinstance(document, list):
        raise ConfigError("Pool configuration must list modalities")

    pools: list[ModalityPool] = []
    for entry in document:
        entry = expect_mapping(entry, "modality entry")
        reject_unknown_keys(entry, ("name", "select_k", "models"), "modality entry")
        name = entry.get("name")
        if not isinstance(name, str) or name == "":
            raise ConfigError("Every modality needs a name")

        models: list[ModelSpec] = []
        for model in entry.get("models", []):
            model = expect_mapping(model, f"model entry of {name}")
            reject_unknown_keys(
                model,
                ("id", "cost_gflops", "discriminability", "embed_dim"),
                f"model entry of {name}",
            )
            try:
                models.append(
                    ModelSpec(
                        id=str(model["id"]),
                        modality=name,
                        cost_gflops=float(model["cost_gflops"]),
                        discriminability=float(model["discriminability"]),
                        embed_dim=int(model.get("embed_dim", 512)),
                    )
                )
            except KeyError as ex:
                raise ConfigError(
                    f"Model entry of {name} lacks {ex.args[0]}"
                ) from ex
            except (TypeError, ValueError) as ex:
                raise ConfigError(f"Invalid model entry of {name}: {ex}") from ex

        select_k = entry.get("select_k", 1)
        if not isinstance(select_k, int):
            raise ConfigError(f"{name}: select_k must be an integer")
        pools.append(ModalityPool(name, tuple(models), select_k))

    pool_set = PoolSet(tuple(pools))
    errors = validate_poolset(pool_set)
    if errors:
        raise ConfigError("Invalid pool set: " + "; ".join(errors))
    return pool_set


def poolset_to_document(pools: PoolSet) -> dict[str, typing.Any]:
    return {
        "modalities": [
            {
                "name": p.modality,
                "select_k": p.select_k,
                "models": [
                    {
                        "id": m.id,
                        "cost_gflops": m.cost_gflops,
                        "discriminability": m.discriminability,
                        "embed_dim": m.embed_dim,
                    }
                    for m in p.models
                ],
            }
            for p in pools.pools
        ]
    }


def load_poolset(path: StrPath) -> PoolSet:
    """Load and validate the pool configuration at ``path``."""
    pools = poolset_from_document(read_json(path))
    logger.info(
        "Loaded pools %s from %s",
        ", ".join(f"{p.modality}({p.size}, k={p.select_k})" for p in pools.pools),
        path,
    )
    return pools


def check_action(action: ActionSet, pools: PoolSet) -> None:
    """Raise :py:class:`poolselect.error.InvalidActionError` unless ``action`` selects exactly ``select_k`` distinct,
    valid indices in every pool."""
    if len(action.indices) != len(pools.pools):
        raise InvalidActionError(
            f"Action covers {len(action.indices)} modalities, pool set has {len(pools.pools)}"
        )
    for selected, p in zip(action.indices, pools.pools):
        for i in selected:
            if not 0 <= i < p.size:
                raise InvalidActionError(
                    f"{p.modality}: index {i} out of range for pool of size {p.size}"
                )
        if len(set(selected)) != len(selected):
            raise InvalidActionError(f"{p.modality}: duplicate index in {selected}")
        if len(selected) != p.select_k:
            raise InvalidActionError(
                f"{p.modality}: expected {p.select_k} indices, got {len(selected)}"
            )


def modality_costs(action: ActionSet, pools: PoolSet) -> dict[str, float]:
    """Return the GFLOPs spent per modality by ``action``."""
    check_action(action, pools)
    return {
        p.modality: sum(p.models[i].cost_gflops for i in selected)
        for selected, p in zip(action.indices, pools.pools)
    }


def normalized_cost(action: ActionSet, pools: PoolSet) -> float:
    """Return the normalised cost of ``action`` in [0, 1]: the mean over modalities of the selected costs divided by
    the sum of the ``select_k`` largest costs of that modality. With ``select_k = 1``, this is the cost divided by the
    modality maximum."""
    per_modality = modality_costs(action, pools)
    return sum(per_modality[p.modality] / p.peak_cost() for p in pools.pools) / len(
        pools.pools
    )


def total_gflops(action: ActionSet, pools: PoolSet) -> float:
    """Return the GFLOPs of all models selected by ``action``."""
    return sum(modality_costs(action, pools).values())


def count_actions(pools: PoolSet) -> int:
    return math.prod(math.comb(p.size, p.select_k) for p in pools.pools)


def enumerate_actions(pools: PoolSet) -> Iterator[ActionSet]:
    """Yield every joint action of ``pools``. Within a modality, selections are unordered and listed with ascending
    indices."""
    per_pool = [
        list(itertools.combinations(range(p.size), p.select_k)) for p in pools.pools
    ]
    for combo in itertools.product(*per_pool):
        yield ActionSet(tuple(combo))


def combo_id(action: ActionSet, pools: PoolSet) -> str:
    """Return a stable identifier of the models selected by ``action``, for example,
    ``face=adaface101+gait=gaitset+body=ap3d34``. The order of draws within a modality does not matter."""
    parts = []
    for selected, p in zip(action.indices, pools.pools):
        ids = ",".join(p.models[i].id for i in sorted(selected))
        parts.append(f"{p.modality}={ids}")
    return "+".join(parts)


def _extreme_combo(pools: PoolSet, dearest: bool) -> ActionSet:
    indices = []
    for p in pools.pools:
        # Stable sort keeps the lowest index first among equal costs.
        order = sorted(
            range(p.size), key=lambda i: -p.costs[i] if dearest else p.costs[i]
        )
        indices.append(tuple(sorted(order[: p.select_k])))
    return ActionSet(tuple(indices))


def min_combo(pools: PoolSet) -> ActionSet:
    """Return the constant action selecting the cheapest models of every modality."""
    return _extreme_combo(pools, dearest=False)


def max_combo(pools: PoolSet) -> ActionSet:
    """Return the constant action selecting the most expensive models of every modality."""
    return _extreme_combo(pools, dearest=True)
