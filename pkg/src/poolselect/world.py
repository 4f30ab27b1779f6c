"""Deterministic synthetic recognition world.

Identities own several sequences. Every frame of a sequence is a descriptor made of the identity's signature followed
by one quality value per modality, plus Gaussian clutter. A similarity oracle stands in for frozen recognition models:
matched pairs score ``tanh(gain * discriminability * q_eff + noise)``, non-matched pairs ``tanh(noise)``, where
``q_eff`` is the weaker of the two qualities of the modality.
"""

import dataclasses
import hashlib
import logging
import math
import typing
from collections import Counter, defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from poolselect.error import ConfigError, InvalidPairError
from poolselect.files import (
    StrPath,
    expect_mapping,
    read_json,
    reject_unknown_keys,
    write_json,
)
from poolselect.pool import DEFAULT_MODALITIES, ModelSpec

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "poolselect-world"
SNAPSHOT_VERSION = 1

QUALITY_MODES = ("uniform", "exclusive", "exclusive_identity")


@dataclass(frozen=True)
class WorldConfig:
    identities: int = 50
    samples_per_identity: int = 4
    frames_min: int = 4
    frames_max: int = 8
    descriptor_dim: int = 16
    """Width of a frame descriptor, identity signature and quality values included."""
    modalities: tuple[str, ...] = DEFAULT_MODALITIES
    quality_mode: str = "uniform"
    """``uniform`` draws every quality from U(quality_min, quality_max). ``exclusive`` picks one informative modality
    per sample with a quality from U(quality_min, quality_max) and degrades the others to U(0, degraded_max).
    ``exclusive_identity`` degrades the same way, but draws the informative modality once per identity, so all samples
    of an identity are informative in the same modality."""
    quality_min: float = 0.0
    quality_max: float = 1.0
    degraded_max: float = 0.2
    frame_noise: float = 0.1
    noise_scale: float = 0.25
    """Standard deviation of the oracle's similarity noise."""
    gain: float = 2.0

    def validate(self) -> None:
        """Raise :py:class:`poolselect.error.ConfigError` if this configuration cannot produce a valid world."""
        if self.identities < 2:
            raise ConfigError("A world needs at least 2 identities")
        if self.samples_per_identity < 2:
            raise ConfigError("Every identity needs at least 2 samples")
        if self.frames_min < 1 or self.frames_max < self.frames_min:
            raise ConfigError("Frame counts must satisfy 1 <= frames_min <= frames_max")
        if len(self.modalities) == 0 or len(set(self.modalities)) != len(
            self.modalities
        ):
            raise ConfigError("Modalities must be non-empty and distinct")
        if self.descriptor_dim < max(1, len(self.modalities)):
            raise ConfigError(
                f"descriptor_dim must be at least the number of modalities ({len(self.modalities)})"
            )
        if self.quality_mode not in QUALITY_MODES:
            raise ConfigError(f"Unknown quality mode '{self.quality_mode}'")
        if not 0 <= self.quality_min <= self.quality_max <= 1:
            raise ConfigError("Qualities must satisfy 0 <= quality_min <= quality_max <= 1")
        if not 0 <= self.degraded_max <= 1:
            raise ConfigError("degraded_max must lie in [0, 1]")
        if self.frame_noise < 0 or self.noise_scale < 0:
            raise ConfigError("Noise scales must not be negative")
        if self.gain <= 0:
            raise ConfigError("gain must be positive")


@dataclass(frozen=True, eq=False)
class SequenceSample:
    """One video: the frame descriptors of a sequence and its per-modality quality."""

    sample_id: str
    identity: int
    frames: np.ndarray
    """Frame descriptors of shape (T, d)."""
    quality: Mapping[str, float]


@dataclass(frozen=True, eq=False)
class PairSample:
    probe: SequenceSample
    gallery: SequenceSample
    label: int
    """1 if probe and gallery share the identity, 0 otherwise."""


@dataclass(frozen=True, eq=False)
class World:
    seed: int
    config: WorldConfig
    samples: tuple[SequenceSample, ...]

    @property
    def identities(self) -> int:
        return self.config.identities


def _draw_quality(
    rng: np.random.Generator, config: WorldConfig, informative: int
) -> dict[str, float]:
    match config.quality_mode:
        case "uniform":
            values = rng.uniform(
                config.quality_min, config.quality_max, size=len(config.modalities)
            )
        case "exclusive":
            values = rng.uniform(0.0, config.degraded_max, size=len(config.modalities))
            informative = int(rng.integers(len(config.modalities)))
            values[informative] = rng.uniform(config.quality_min, config.quality_max)
        case "exclusive_identity":
            values = rng.uniform(0.0, config.degraded_max, size=len(config.modalities))
            values[informative] = rng.uniform(config.quality_min, config.quality_max)
        case _:
            # validate() rejects every other mode.
            raise AssertionError(f"Unknown quality mode: {config.quality_mode}")
    return {m: float(v) for m, v in zip(config.modalities, values)}


def generate_world(seed: int, config: WorldConfig) -> World:
    """Generate the world determined by ``seed`` and ``config``. Identical arguments yield bit-identical worlds.

    Raises:
        poolselect.error.ConfigError: if ``config`` is invalid
    """
    config.validate()
    rng = np.random.default_rng(seed)
    signature_dim = config.descriptor_dim - len(config.modalities)
    signatures = rng.normal(0.0, 1.0, size=(config.identities, signature_dim))

    samples: list[SequenceSample] = []
    for identity in range(config.identities):
        informative = -1
        if config.quality_mode == "exclusive_identity":
            informative = int(rng.integers(len(config.modalities)))
        for j in range(config.samples_per_identity):
            length = int(rng.integers(config.frames_min, config.frames_max + 1))
            quality = _draw_quality(rng, config, informative)
            base = np.concatenate(
                [signatures[identity], [quality[m] for m in config.modalities]]
            )
            clutter = rng.normal(
                0.0, config.frame_noise, size=(length, config.descriptor_dim)
            )
            samples.append(
                SequenceSample(
                    sample_id=f"id{identity:04d}-s{j:02d}",
                    identity=identity,
                    frames=base[np.newaxis, :] + clutter,
                    quality=quality,
                )
            )

    logger.debug(
        "Generated world with %d identities and %d samples from seed %d",
        config.identities,
        len(samples),
        seed,
    )
    return World(seed, config, tuple(samples))


def similarity_oracle(
    model: ModelSpec, pair: PairSample, gain: float, noise: float = 0.0
) -> float:
    """Return the similarity ``model`` assigns to ``pair`` given the noise draw ``noise``.

    Raises:
        poolselect.error.InvalidPairError: if a sample lacks the quality of the model's modality
    """
    try:
        q_eff = min(
            pair.probe.quality[model.modality], pair.gallery.quality[model.modality]
        )
    except KeyError as ex:
        raise InvalidPairError(
            f"Pair ({pair.probe.sample_id}, {pair.gallery.sample_id}) has no quality for '{model.modality}'"
        ) from ex

    if pair.label == 1:
        return math.tanh(gain * model.discriminability * q_eff + noise)
    return math.tanh(noise)


class SimilarityOracle:
    """Scores pairs with the similarity law of a world. The noise of a score is keyed by the world seed, both sample
    ids and the model, so every (pair, model) combination always receives the same score regardless of call order.
    ``calls`` counts the scored (pair, model) combinations."""

    seed: int
    gain: float
    noise_scale: float
    calls: int

    def __init__(self, seed: int, gain: float, noise_scale: float):
        self.seed = seed
        self.gain = gain
        self.noise_scale = noise_scale
        self.calls = 0

    @classmethod
    def for_world(cls, world: World) -> "SimilarityOracle":
        return cls(world.seed, world.config.gain, world.config.noise_scale)

    def noise(self, model: ModelSpec, pair: PairSample) -> float:
        if self.noise_scale == 0:
            return 0.0
        key = "\x1f".join(
            (
                str(self.seed),
                pair.probe.sample_id,
                pair.gallery.sample_id,
                model.modality,
                model.id,
            )
        )
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return float(self.noise_scale * rng.standard_normal())

    def similarity(self, model: ModelSpec, pair: PairSample) -> float:
        self.calls += 1
        return similarity_oracle(model, pair, self.gain, self.noise(model, pair))


def make_pairs(
    world: World, n: int, positive_fraction: float, seed: int
) -> list[PairSample]:
    """Draw ``n`` labelled pairs, ``round(n * positive_fraction)`` of them positive. Positive pairs combine two
    distinct samples of one identity, negative pairs samples of two different identities.

    Raises:
        poolselect.error.ConfigError: if ``positive_fraction`` lies outside (0, 1)
    """
    if not 0 < positive_fraction < 1:
        raise ConfigError("positive_fraction must lie in (0, 1)")
    if n <= 0:
        return []

    members: dict[int, list[SequenceSample]] = defaultdict(list)
    for s in world.samples:
        members[s.identity].append(s)
    identities = sorted(members)

    rng = np.random.default_rng(seed)
    n_positive = int(math.floor(n * positive_fraction + 0.5))
    pairs: list[PairSample] = []
    for _ in range(n_positive):
        owned = members[identities[int(rng.integers(len(identities)))]]
        a, b = rng.choice(len(owned), size=2, replace=False)
        pairs.append(PairSample(owned[int(a)], owned[int(b)], 1))
    for _ in range(n - n_positive):
        i, j = rng.choice(len(identities), size=2, replace=False)
        first = members[identities[int(i)]]
        second = members[identities[int(j)]]
        pairs.append(
            PairSample(
                first[int(rng.integers(len(first)))],
                second[int(rng.integers(len(second)))],
                0,
            )
        )

    return [pairs[int(k)] for k in rng.permutation(n)]


def gallery_split(
    world: World,
) -> tuple[list[SequenceSample], list[SequenceSample]]:
    """Split the samples into gallery and probes. The gallery holds the first sample (by sample id) of every identity,
    ordered by identity. All other samples are probes, ordered by sample id."""
    ordered = sorted(world.samples, key=lambda s: s.sample_id)
    gallery: dict[int, SequenceSample] = {}
    probes: list[SequenceSample] = []
    for s in ordered:
        if s.identity not in gallery:
            gallery[s.identity] = s
        else:
            probes.append(s)
    return [gallery[i] for i in sorted(gallery)], probes


_CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(WorldConfig))


def world_config_from_document(document: typing.Any) -> WorldConfig:
    document = expect_mapping(document, "world configuration")
    reject_unknown_keys(document, _CONFIG_FIELDS, "world configuration")
    values = dict(document)
    if "modalities" in values:
        if not isinstance(values["modalities"], list):
            raise ConfigError("modalities must be a list")
        values["modalities"] = tuple(values["modalities"])
    try:
        config = WorldConfig(**values)
    except TypeError as ex:
        raise ConfigError(f"Invalid world configuration: {ex}") from ex
    config.validate()
    return config


def world_config_to_document(config: WorldConfig) -> dict[str, typing.Any]:
    document = dataclasses.asdict(config)
    document["modalities"] = list(config.modalities)
    return document


def load_world_config(path: StrPath) -> WorldConfig:
    return world_config_from_document(read_json(path))


def world_to_document(world: World) -> dict[str, typing.Any]:
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "seed": world.seed,
        "config": world_config_to_document(world.config),
        "samples": [
            {
                "sample_id": s.sample_id,
                "identity": s.identity,
                "quality": dict(s.quality),
                "frames": s.frames.tolist(),
            }
            for s in world.samples
        ],
    }


def world_from_document(document: typing.Any) -> World:
    document = expect_mapping(document, "world snapshot")
    if document.get("format") != SNAPSHOT_FORMAT:
        raise ConfigError("Not a world snapshot")
    if document.get("version") != SNAPSHOT_VERSION:
        raise ConfigError(
            f"Unsupported world snapshot version {document.get('version')}"
        )

    try:
        config = world_config_from_document(document["config"])
        seed = int(document["seed"])
        samples = [_sample_from_document(entry, config) for entry in document["samples"]]
    except (KeyError, TypeError, ValueError) as ex:
        raise ConfigError(f"Malformed world snapshot: {ex}") from ex

    counts = Counter(s.identity for s in samples)
    for s in samples:
        if not 0 <= s.identity < config.identities:
            raise ConfigError(
                f"Sample {s.sample_id} has identity {s.identity} outside [0, {config.identities})"
            )
    for identity in range(config.identities):
        if counts[identity] < 2:
            raise ConfigError(f"Identity {identity} has fewer than 2 samples")
    return World(seed, config, tuple(samples))


def _sample_from_document(entry: typing.Any, config: WorldConfig) -> SequenceSample:
    sample_id = entry["sample_id"]
    if not isinstance(sample_id, str):
        raise ConfigError(f"Sample id {sample_id!r} is not a string")
    frames = np.asarray(entry["frames"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0 or frames.shape[1] != config.descriptor_dim:
        raise ConfigError(f"Sample {sample_id} has malformed frames")
    if not np.all(np.isfinite(frames)):
        raise ConfigError(f"Sample {sample_id} has non-finite frames")
    quality = {m: float(entry["quality"][m]) for m in config.modalities}
    if not all(0 <= q <= 1 for q in quality.values()):
        raise ConfigError(f"Sample {sample_id} has a quality outside [0, 1]")
    return SequenceSample(sample_id, int(entry["identity"]), frames, quality)


def save_world(world: World, path: StrPath) -> None:
    write_json(path, world_to_document(world), pretty=False)


def load_world(path: StrPath) -> World:
    world = world_from_document(read_json(path))
    logger.info("Loaded world with %d samples from %s", len(world.samples), path)
    return world


def quality_vector(sample: SequenceSample, modalities: Sequence[str]) -> list[float]:
    return [sample.quality[m] for m in modalities]
