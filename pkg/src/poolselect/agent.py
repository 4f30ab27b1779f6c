"""Selection agent: frame encoder, attention pooling, one policy head per modality and a value head.

The forward pass of a sequence X with frames x_1, ..., x_T is

* features ``f_t = tanh(W2 tanh(W1 x_t + b1) + b2)``
* attention ``e_t = v . tanh(Wa f_t + ba)``, ``alpha = softmax(e)``
* pooled representation ``h = tanh(Wp sum_t alpha_t f_t + bp)``
* logits of modality m ``z_m = Hm2 tanh(Hm1 h + cm1) + cm2``
* value ``V = w2 . tanh(Vw1 h + vb1) + vb2``

All arrays are float64. Gradients are computed by :py:func:`backward` in the canonical parameter order of
:py:func:`parameter_manifest`.
"""

import logging
import typing
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from poolselect.error import (
    ConfigError,
    DegenerateDistributionError,
    ShapeError,
)
from poolselect.files import StrPath, expect_mapping, read_json, write_json
from poolselect.pool import ActionSet, PoolSet
from poolselect.world import SequenceSample

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "poolselect-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AgentDims:
    descriptor_dim: int
    """Width d of a frame descriptor."""
    feature_dim: int = 32
    """Width D_f of a frame feature."""
    hidden_dim: int = 32
    """Width D_h of the pooled representation and of the hidden layers of all heads."""


def parameter_manifest(
    dims: AgentDims, head_widths: Sequence[tuple[str, int]]
) -> list[tuple[str, tuple[int, ...]]]:
    """Return the name and shape of every parameter block in flattening order."""
    d, f, h = dims.descriptor_dim, dims.feature_dim, dims.hidden_dim
    manifest: list[tuple[str, tuple[int, ...]]] = [
        ("encoder.w1", (f, d)),
        ("encoder.b1", (f,)),
        ("encoder.w2", (f, f)),
        ("encoder.b2", (f,)),
        ("attention.w", (f, f)),
        ("attention.b", (f,)),
        ("attention.v", (f,)),
        ("projection.w", (h, f)),
        ("projection.b", (h,)),
    ]
    for modality, width in head_widths:
        manifest += [
            (f"head.{modality}.w1", (h, h)),
            (f"head.{modality}.b1", (h,)),
            (f"head.{modality}.w2", (width, h)),
            (f"head.{modality}.b2", (width,)),
        ]
    manifest += [
        ("value.w1", (h, h)),
        ("value.b1", (h,)),
        ("value.w2", (h,)),
        ("value.b2", (1,)),
    ]
    return manifest


@dataclass(frozen=True, eq=False)
class AgentParams:
    """All trainable parameters of the agent."""

    dims: AgentDims
    head_widths: tuple[tuple[str, int], ...]
    """Modality and number of models of every policy head, in pool order."""
    blocks: Mapping[str, np.ndarray]

    def __post_init__(self) -> None:
        for name, shape in self.manifest():
            if name not in self.blocks:
                raise ShapeError(f"Parameter block '{name}' is missing")
            if self.blocks[name].shape != shape:
                raise ShapeError(
                    f"Parameter block '{name}' has shape {self.blocks[name].shape}, expected {shape}"
                )

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m, _ in self.head_widths)

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return parameter_manifest(self.dims, self.head_widths)

    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.manifest())

    def flatten(self) -> np.ndarray:
        """Concatenate all blocks in manifest order."""
        return np.concatenate([self.blocks[name].ravel() for name, _ in self.manifest()])

    def with_vector(self, vector: np.ndarray) -> "AgentParams":
        """Return parameters whose blocks are read from ``vector`` in manifest order."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size(),):
            raise ShapeError(
                f"Parameter vector has shape {vector.shape}, expected ({self.size()},)"
            )
        return AgentParams(
            self.dims, self.head_widths, unflatten(vector, self.manifest())
        )


def unflatten(
    vector: np.ndarray, manifest: Sequence[tuple[str, tuple[int, ...]]]
) -> dict[str, np.ndarray]:
    blocks: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in manifest:
        count = int(np.prod(shape))
        blocks[name] = vector[offset : offset + count].reshape(shape).copy()
        offset += count
    return blocks


def init_params(
    dims: AgentDims, pools: PoolSet, seed: int, output_scale: float = 0.1
) -> AgentParams:
    """Draw initial parameters. Weights are normal with variance 1/fan-in, biases are zero. The output layers of the
    policy and value heads are scaled by ``output_scale`` so that the initial policy is close to uniform."""
    rng = np.random.default_rng(seed)
    head_widths = tuple((p.modality, p.size) for p in pools.pools)
    blocks: dict[str, np.ndarray] = {}
    for name, shape in parameter_manifest(dims, head_widths):
        if name.endswith((".b1", ".b2", ".b")):
            blocks[name] = np.zeros(shape)
            continue
        fan_in = shape[-1] if len(shape) == 2 else shape[0]
        scale = 1.0 / np.sqrt(fan_in)
        if name.endswith(".w2") and name.startswith(("head.", "value.")):
            scale *= output_scale
        blocks[name] = rng.normal(0.0, scale, size=shape)
    return AgentParams(dims, head_widths, blocks)


def check_compatible(params: AgentParams, pools: PoolSet) -> None:
    """Raise :py:class:`poolselect.error.ShapeError` unless every pool has a policy head of matching width."""
    widths = dict(params.head_widths)
    for p in pools.pools:
        if p.modality not in widths:
            raise ShapeError(f"Agent has no policy head for modality '{p.modality}'")
        if widths[p.modality] != p.size:
            raise ShapeError(
                f"Policy head '{p.modality}' has width {widths[p.modality]}, but the pool has {p.size} models"
            )


@dataclass(frozen=True, eq=False)
class PooledRepresentation:
    h: np.ndarray
    attention_weights: np.ndarray


@dataclass(frozen=True, eq=False)
class SelectionDistribution:
    """Categorical distributions over the pools, stored as logits in pool order."""

    logits: tuple[np.ndarray, ...]

    @property
    def probabilities(self) -> tuple[np.ndarray, ...]:
        return tuple(np.exp(log_softmax(z)) for z in self.logits)

    @classmethod
    def from_probabilities(
        cls, probabilities: Sequence[Sequence[float]]
    ) -> "SelectionDistribution":
        with np.errstate(divide="ignore"):
            return cls(tuple(np.log(np.asarray(p, dtype=np.float64)) for p in probabilities))


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax. Entries of -inf have probability zero.

    Raises:
        poolselect.error.DegenerateDistributionError: if no entry is finite
    """
    peak = np.max(z) if z.size else -np.inf
    if not np.isfinite(peak):
        raise DegenerateDistributionError("No probability mass left to sample from")
    shifted = z - peak
    return shifted - np.log(np.sum(np.exp(shifted)))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


@dataclass(eq=False)
class ForwardTrace:
    """Intermediate values of a forward pass, needed by :py:func:`backward`."""

    frames: np.ndarray
    hidden: np.ndarray
    features: np.ndarray
    attention_hidden: np.ndarray
    attention: np.ndarray
    context: np.ndarray
    h: np.ndarray
    head_hidden: dict[str, np.ndarray]
    value_hidden: np.ndarray
    distribution: SelectionDistribution
    value: float


def _encode(frames: np.ndarray, params: AgentParams) -> tuple[np.ndarray, np.ndarray]:
    b = params.blocks
    if frames.ndim != 2 or frames.shape[1] != params.dims.descriptor_dim:
        raise ShapeError(
            f"Frames of shape {frames.shape} do not match descriptor width {params.dims.descriptor_dim}"
        )
    hidden = np.tanh(frames @ b["encoder.w1"].T + b["encoder.b1"])
    features = np.tanh(hidden @ b["encoder.w2"].T + b["encoder.b2"])
    return hidden, features


def encode_frames(sample: SequenceSample, params: AgentParams) -> np.ndarray:
    """Encode every frame of ``sample``. Returns an array of shape (T, D_f).

    Raises:
        poolselect.error.ShapeError: if the frame width differs from the agent's descriptor width
    """
    _, features = _encode(np.asarray(sample.frames, dtype=np.float64), params)
    return features


def _pool(
    features: np.ndarray, params: AgentParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    b = params.blocks
    if features.shape[0] == 0:
        raise ShapeError("Cannot pool an empty sequence")
    attention_hidden = np.tanh(features @ b["attention.w"].T + b["attention.b"])
    attention = softmax(attention_hidden @ b["attention.v"])
    context = attention @ features
    h = np.tanh(b["projection.w"] @ context + b["projection.b"])
    return attention_hidden, attention, context, h


def attention_pool(features: np.ndarray, params: AgentParams) -> PooledRepresentation:
    """Pool frame features into a sequence representation using additive attention.

    Raises:
        poolselect.error.ShapeError: if there are no frames
    """
    _, attention, _, h = _pool(np.asarray(features, dtype=np.float64), params)
    return PooledRepresentation(h, attention)


def _heads(
    h: np.ndarray, params: AgentParams, pools: PoolSet
) -> tuple[dict[str, np.ndarray], tuple[np.ndarray, ...], np.ndarray, float]:
    check_compatible(params, pools)
    b = params.blocks
    head_hidden: dict[str, np.ndarray] = {}
    logits = []
    for p in pools.pools:
        prefix = f"head.{p.modality}"
        hidden = np.tanh(b[f"{prefix}.w1"] @ h + b[f"{prefix}.b1"])
        head_hidden[p.modality] = hidden
        logits.append(b[f"{prefix}.w2"] @ hidden + b[f"{prefix}.b2"])
    value_hidden = np.tanh(b["value.w1"] @ h + b["value.b1"])
    value = float(b["value.w2"] @ value_hidden + b["value.b2"][0])
    return head_hidden, tuple(logits), value_hidden, value


def policy_forward(
    pooled: PooledRepresentation, params: AgentParams, pools: PoolSet
) -> tuple[SelectionDistribution, float]:
    """Return the selection distribution and the value estimate for a pooled representation.

    Raises:
        poolselect.error.ShapeError: if a policy head does not match its pool
    """
    _, logits, _, value = _heads(pooled.h, params, pools)
    return SelectionDistribution(logits), value


def forward(sample: SequenceSample, params: AgentParams, pools: PoolSet) -> ForwardTrace:
    """Run the complete agent on ``sample`` and keep all intermediate values."""
    frames = np.asarray(sample.frames, dtype=np.float64)
    hidden, features = _encode(frames, params)
    attention_hidden, attention, context, h = _pool(features, params)
    head_hidden, logits, value_hidden, value = _heads(h, params, pools)
    return ForwardTrace(
        frames=frames,
        hidden=hidden,
        features=features,
        attention_hidden=attention_hidden,
        attention=attention,
        context=context,
        h=h,
        head_hidden=head_hidden,
        value_hidden=value_hidden,
        distribution=SelectionDistribution(logits),
        value=value,
    )


def backward(
    trace: ForwardTrace,
    params: AgentParams,
    d_logits: Mapping[str, np.ndarray],
    d_value: float,
) -> dict[str, np.ndarray]:
    """Back-propagate the loss gradients with respect to the logits of each modality and to the value estimate.
    Returns the gradient of every parameter block."""
    b = params.blocks
    grads = {name: np.zeros(shape) for name, shape in params.manifest()}
    d_h = np.zeros_like(trace.h)

    for modality, hidden in trace.head_hidden.items():
        prefix = f"head.{modality}"
        dz = d_logits.get(modality)
        if dz is None:
            continue
        grads[f"{prefix}.w2"] = np.outer(dz, hidden)
        grads[f"{prefix}.b2"] = dz.copy()
        d_pre = (b[f"{prefix}.w2"].T @ dz) * (1.0 - hidden**2)
        grads[f"{prefix}.w1"] = np.outer(d_pre, trace.h)
        grads[f"{prefix}.b1"] = d_pre
        d_h += b[f"{prefix}.w1"].T @ d_pre

    grads["value.w2"] = d_value * trace.value_hidden
    grads["value.b2"] = np.array([d_value])
    d_pre = d_value * b["value.w2"] * (1.0 - trace.value_hidden**2)
    grads["value.w1"] = np.outer(d_pre, trace.h)
    grads["value.b1"] = d_pre
    d_h += b["value.w1"].T @ d_pre

    d_proj = d_h * (1.0 - trace.h**2)
    grads["projection.w"] = np.outer(d_proj, trace.context)
    grads["projection.b"] = d_proj
    d_context = b["projection.w"].T @ d_proj

    # context = sum_t alpha_t f_t
    d_features = np.outer(trace.attention, d_context)
    d_alpha = trace.features @ d_context
    d_scores = trace.attention * (d_alpha - trace.attention @ d_alpha)

    grads["attention.v"] = trace.attention_hidden.T @ d_scores
    d_att_pre = np.outer(d_scores, b["attention.v"]) * (1.0 - trace.attention_hidden**2)
    grads["attention.w"] = d_att_pre.T @ trace.features
    grads["attention.b"] = d_att_pre.sum(axis=0)
    d_features += d_att_pre @ b["attention.w"]

    d_enc2 = d_features * (1.0 - trace.features**2)
    grads["encoder.w2"] = d_enc2.T @ trace.hidden
    grads["encoder.b2"] = d_enc2.sum(axis=0)
    d_enc1 = (d_enc2 @ b["encoder.w2"]) * (1.0 - trace.hidden**2)
    grads["encoder.w1"] = d_enc1.T @ trace.frames
    grads["encoder.b1"] = d_enc1.sum(axis=0)

    return grads


def _draw(log_q: np.ndarray, rng: np.random.Generator) -> int:
    q = np.exp(log_q)
    position = int(np.searchsorted(np.cumsum(q), rng.random(), side="right"))
    if position >= len(q):
        # Rounding left the cumulative sum slightly below 1.
        position = int(np.flatnonzero(q > 0)[-1])
    return position


def sample_action(
    dist: SelectionDistribution, pools: PoolSet, rng: np.random.Generator
) -> ActionSet:
    """Sample ``select_k`` models per modality. Every draw is categorical over the models not drawn yet, with the
    remaining probabilities renormalised.

    Raises:
        poolselect.error.DegenerateDistributionError: if a draw has no probability mass left
    """
    indices = []
    log_prob = 0.0
    for z, p in zip(dist.logits, pools.pools):
        remaining = list(range(p.size))
        chosen: list[int] = []
        for _ in range(p.select_k):
            log_q = log_softmax(z[remaining])
            position = _draw(log_q, rng)
            log_prob += float(log_q[position])
            chosen.append(remaining.pop(position))
        indices.append(tuple(chosen))
    return ActionSet(tuple(indices), log_prob, joint_entropy(dist, pools))


def greedy_action(dist: SelectionDistribution, pools: PoolSet) -> ActionSet:
    """Select the ``select_k`` most probable models per modality in descending order of probability. Ties go to the
    lowest index."""
    indices = []
    for z, p in zip(dist.logits, pools.pools):
        order = np.argsort(-z, kind="stable")
        indices.append(tuple(int(i) for i in order[: p.select_k]))
    action = ActionSet(tuple(indices))
    return ActionSet(
        action.indices, action_log_prob(dist, action, pools), joint_entropy(dist, pools)
    )


def _log_prob_and_gradient(
    z: np.ndarray, selected: Sequence[int]
) -> tuple[float, np.ndarray]:
    remaining = list(range(len(z)))
    total = 0.0
    grad = np.zeros(len(z))
    for i in selected:
        log_q = log_softmax(z[remaining])
        position = remaining.index(i)
        total += float(log_q[position])
        grad[remaining] -= np.exp(log_q)
        grad[i] += 1.0
        remaining.pop(position)
    return total, grad


def log_prob_and_gradient(
    dist: SelectionDistribution, action: ActionSet, pools: PoolSet
) -> tuple[float, dict[str, np.ndarray]]:
    """Return the log-probability of drawing ``action`` in its order and its gradient with respect to the logits of
    every modality."""
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for z, selected, p in zip(dist.logits, action.indices, pools.pools):
        value, grad = _log_prob_and_gradient(z, selected)
        total += value
        grads[p.modality] = grad
    return total, grads


def action_log_prob(
    dist: SelectionDistribution, action: ActionSet, pools: PoolSet
) -> float:
    return log_prob_and_gradient(dist, action, pools)[0]


def _sequential_entropy(
    z: np.ndarray, remaining: tuple[int, ...], k: int
) -> tuple[float, np.ndarray]:
    """Entropy of drawing ``k`` models without replacement from ``remaining`` and its gradient with respect to
    ``z``."""
    grad = np.zeros(len(z))
    if k == 0 or not remaining:
        return 0.0, grad

    idx = np.array(remaining)
    log_p = log_softmax(z[idx])
    p = np.exp(log_p)
    with np.errstate(invalid="ignore"):
        p_log_p = np.where(p > 0, p * log_p, 0.0)
    first = float(-p_log_p.sum())
    grad[idx] -= p_log_p + p * first
    if k == 1:
        return first, grad

    total = first
    conditional = np.zeros(len(idx))
    for position, i in enumerate(remaining):
        if p[position] == 0:
            continue
        rest = tuple(r for r in remaining if r != i)
        h_rest, g_rest = _sequential_entropy(z, rest, k - 1)
        conditional[position] = h_rest
        total += float(p[position] * h_rest)
        grad += p[position] * g_rest
    grad[idx] += p * conditional - p * float(p @ conditional)
    return total, grad


def entropy_and_gradient(
    dist: SelectionDistribution, pools: PoolSet
) -> tuple[float, dict[str, np.ndarray]]:
    """Return the joint entropy of the sampling procedure and its gradient with respect to the logits of every
    modality."""
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for z, p in zip(dist.logits, pools.pools):
        value, grad = _sequential_entropy(z, tuple(range(p.size)), p.select_k)
        total += value
        grads[p.modality] = grad
    return total, grads


def joint_entropy(dist: SelectionDistribution, pools: PoolSet) -> float:
    """Return the entropy of the joint action distribution. For ``select_k = 1``, this is the Shannon entropy of the
    pool's categorical distribution. For larger ``select_k``, it is the entropy of the ordered draws without
    replacement, enumerated exactly."""
    return entropy_and_gradient(dist, pools)[0]


def checkpoint_to_document(params: AgentParams) -> dict[str, typing.Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {
            "descriptor_dim": params.dims.descriptor_dim,
            "feature_dim": params.dims.feature_dim,
            "hidden_dim": params.dims.hidden_dim,
        },
        "modalities": list(params.modalities),
        "head_widths": {m: w for m, w in params.head_widths},
        "manifest": [
            {"name": name, "shape": list(shape)} for name, shape in params.manifest()
        ],
        "parameters": params.flatten().tolist(),
    }


def checkpoint_from_document(document: typing.Any) -> AgentParams:
    document = expect_mapping(document, "checkpoint")
    if document.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError("Not a checkpoint")
    if document.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"Unsupported checkpoint version {document.get('version')}")

    try:
        dims = AgentDims(**document["dims"])
        head_widths = tuple(
            (m, int(document["head_widths"][m])) for m in document["modalities"]
        )
        stored = [(e["name"], tuple(e["shape"])) for e in document["manifest"]]
        vector = np.asarray(document["parameters"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as ex:
        raise ConfigError(f"Malformed checkpoint: {ex}") from ex

    manifest = parameter_manifest(dims, head_widths)
    if stored != manifest:
        raise ShapeError("Checkpoint manifest does not match its dimensions")
    if vector.shape != (sum(int(np.prod(s)) for _, s in manifest),):
        raise ShapeError("Checkpoint parameter vector has the wrong length")
    if not np.all(np.isfinite(vector)):
        raise ConfigError("Checkpoint contains non-finite parameters")
    return AgentParams(dims, head_widths, unflatten(vector, manifest))


def save_checkpoint(params: AgentParams, path: StrPath) -> None:
    logger.debug("Writing checkpoint %s", path)
    write_json(path, checkpoint_to_document(params), pretty=False)


def load_checkpoint(path: StrPath) -> AgentParams:
    return checkpoint_from_document(read_json(path))
