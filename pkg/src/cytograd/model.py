"""Model pipelines: a small convolutional backbone with three heads.

Three pipeline kinds share one backbone:

* ``Classifier``  - 5-way softmax head trained with cross entropy.
* ``Regressor``   - 1-unit dense head trained with squared error against
  the severity score (severity + 1, so 1..5).
* ``Combined``    - softmax head trained with cross entropy plus a squared
  error penalty on the expected severity score derived from the
  probabilities through a fixed (non-trainable) weight vector (1,2,3,4,5).

The backbone is three conv blocks (relu + 2x mean pooling), a global
spatial mean, and one hidden dense layer. Parameters live in a plain
name -> array dict so optimizers can treat them uniformly.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, ShapeError, Tensor
from . import tensor as T

# Fixed class -> score weights: class index i maps to score i+1.
CLASS_WEIGHTS = np.arange(1.0, 6.0)

PROB_CLAMP = 1e-12
ROW_SUM_TOL = 1e-9

CHECKPOINT_MAGIC = b"CYTGRAD1"
CHECKPOINT_VERSION = 1


class PipelineKind(enum.Enum):
    CLASSIFIER = "classifier"
    REGRESSOR = "regressor"
    COMBINED = "combined"

    @property
    def head_units(self) -> int:
        return 1 if self is PipelineKind.REGRESSOR else 5


@dataclass(frozen=True)
class Architecture:
    """Structural description of the network; fixes every parameter shape."""

    input_size: int = 64
    in_channels: int = 3
    conv_channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    pool: int = 2
    hidden_units: int = 64
    head_units: int = 5

    def __post_init__(self):
        size = self.input_size
        for _ in self.conv_channels:
            if size % self.pool:
                raise ShapeError(
                    f"input size {self.input_size} is not divisible by "
                    f"{self.pool}x pooling across {len(self.conv_channels)} blocks"
                )
            size //= self.pool
        if self.head_units not in (1, 5):
            raise ValueError(f"head_units must be 1 or 5, got {self.head_units}")

    @classmethod
    def for_kind(cls, kind: PipelineKind, **overrides) -> "Architecture":
        overrides.pop("head_units", None)
        return cls(head_units=kind.head_units, **overrides)

    def param_shapes(self) -> dict:
        """Ordered name -> shape map; the checkpoint layout follows it."""
        shapes = {}
        in_c = self.in_channels
        for i, out_c in enumerate(self.conv_channels, start=1):
            shapes[f"conv{i}"] = (out_c, in_c, self.kernel_size, self.kernel_size)
            in_c = out_c
        shapes["hidden_w"] = (in_c, self.hidden_units)
        shapes["hidden_b"] = (self.hidden_units,)
        shapes["head_w"] = (self.hidden_units, self.head_units)
        shapes["head_b"] = (self.head_units,)
        return shapes

    def to_json(self) -> dict:
        return {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "pool": self.pool,
            "hidden_units": self.hidden_units,
            "head_units": self.head_units,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class ModelParams:
    """Named parameter arrays plus the descriptor that fixes their shapes."""

    kind: PipelineKind
    arch: Architecture
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch.head_units != self.kind.head_units:
            raise ShapeError(
                f"{self.kind.value} pipeline needs a {self.kind.head_units}-unit "
                f"head, architecture has {self.arch.head_units}"
            )
        expected = self.arch.param_shapes()
        if list(self.values) != list(expected):
            raise ShapeError(
                f"parameter names {list(self.values)} do not match "
                f"architecture {list(expected)}"
            )
        for name, shape in expected.items():
            if self.values[name].shape != shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {self.values[name].shape}, "
                    f"architecture requires {shape}"
                )

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, self.arch,
                           {n: v.copy() for n, v in self.values.items()})


def init_params(kind: PipelineKind, seed, arch: Architecture = None) -> ModelParams:
    """He-scaled random init for relu layers, smaller scale for the head."""
    if arch is None:
        arch = Architecture.for_kind(kind)
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            values[name] = np.zeros(shape)
        elif name == "head_w":
            values[name] = rng.standard_normal(shape) * np.sqrt(1.0 / shape[0])
        elif name.startswith("conv"):
            fan_in = shape[1] * shape[2] * shape[3]
            values[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            values[name] = rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
    return ModelParams(kind, arch, values)


@dataclass
class ForwardPass:
    """One differentiable run: the graph plus handles into it.

    ``logits``/``probs`` are set for softmax heads, ``score`` for the
    regressor. ``batch`` and ``params`` are the leaves, kept so callers can
    request gradients with respect to either (attribution needs the input,
    training needs the parameters).
    """

    graph: Graph
    batch: Tensor
    params: dict
    logits: Tensor = None
    probs: Tensor = None
    score: Tensor = None


def forward(params: ModelParams, batch: np.ndarray) -> ForwardPass:
    """Run the network over a [N, C, H, W] batch on a fresh graph."""
    arch = params.arch
    batch = np.asarray(batch, dtype=np.float64)
    want = (arch.in_channels, arch.input_size, arch.input_size)
    if batch.ndim != 4 or batch.shape[1:] != want:
        raise ShapeError(f"batch shape {batch.shape} does not match (N,) + {want}")

    g = Graph()
    x = g.leaf(batch)
    leaves = {name: g.leaf(v) for name, v in params.values.items()}

    h = x
    pad = arch.kernel_size // 2
    for i in range(1, len(arch.conv_channels) + 1):
        h = T.mean_pool(T.relu(T.conv2d(h, leaves[f"conv{i}"], 1, pad)), arch.pool)
    h = T.relu(T.dense(T.spatial_mean(h), leaves["hidden_w"], leaves["hidden_b"]))
    out = T.dense(h, leaves["head_w"], leaves["head_b"])

    fp = ForwardPass(graph=g, batch=x, params=leaves)
    if params.kind is PipelineKind.REGRESSOR:
        fp.score = out
    else:
        fp.logits = out
        fp.probs = T.softmax(out)
    return fp


def expected_score(probs: Tensor) -> Tensor:
    """Probability rows -> expected severity score in [1, 5], differentiable."""
    if probs.values.ndim != 2 or probs.values.shape[1] != 5:
        raise ShapeError(f"expected [N, 5] probabilities, got {probs.values.shape}")
    row_err = np.abs(probs.values.sum(axis=1) - 1.0)
    if (row_err > ROW_SUM_TOL).any():
        raise ValueError(
            f"probability rows must sum to 1 within {ROW_SUM_TOL}, "
            f"worst deviation {row_err.max():.3e}"
        )
    w = probs.graph.leaf(CLASS_WEIGHTS.reshape(5, 1))
    return T.matmul(probs, w)


def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.dtype.kind not in "iu" or (labels < 0).any() or (labels > 4).any():
        raise ValueError(f"labels must be integers in 0..4, got {labels!r}")
    return labels.astype(np.int64)


def cross_entropy_from_logits(logits: Tensor, labels) -> Tensor:
    """Per-sample CE [N] via log-sum-exp; no probabilities materialized."""
    n = logits.values.shape[0]
    labels = _check_labels(labels, n)
    onehot = logits.graph.leaf(np.eye(5)[labels])
    return T.sub(T.logsumexp(logits), T.row_sum(T.mul(logits, onehot)))


def cross_entropy_from_probs(probs: Tensor, labels) -> Tensor:
    """Per-sample CE [N] from probability rows, clamped before the log."""
    n = probs.values.shape[0]
    labels = _check_labels(labels, n)
    onehot = probs.graph.leaf(np.eye(5)[labels])
    picked = T.row_sum(T.mul(probs, onehot))
    return T.neg(T.log(T.clamp_min(picked, PROB_CLAMP)))


def _score_penalty(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample (y - expected_score)^2 with y = label + 1."""
    n = probs.values.shape[0]
    y = probs.graph.leaf((labels + 1).astype(np.float64))
    diff = T.sub(y, T.reshape(expected_score(probs), (n,)))
    return T.mul(diff, diff)


def loss(kind: PipelineKind, fp: ForwardPass, labels,
         regression_weight: float = 1.0) -> Tensor:
    """Mean training loss over the batch, as a scalar graph node."""
    if kind is PipelineKind.REGRESSOR:
        n = fp.score.values.shape[0]
        labels = _check_labels(labels, n)
        y = fp.graph.leaf((labels + 1).astype(np.float64))
        diff = T.sub(y, T.reshape(fp.score, (n,)))
        return T.mean_all(T.mul(diff, diff))
    ce = cross_entropy_from_logits(fp.logits, labels)
    if kind is PipelineKind.CLASSIFIER:
        return T.mean_all(ce)
    labels = _check_labels(labels, fp.logits.values.shape[0])
    pen = _score_penalty(fp.probs, labels)
    return T.mean_all(T.add(ce, T.scale(pen, float(regression_weight))))


def combined_loss_from_probs(probs: Tensor, labels,
                             regression_weight: float = 1.0) -> Tensor:
    """Combined loss straight from probability rows (no logits required)."""
    n = probs.values.shape[0]
    labels = _check_labels(labels, n)
    ce = cross_entropy_from_probs(probs, labels)
    pen = _score_penalty(probs, labels)
    return T.mean_all(T.add(ce, T.scale(pen, float(regression_weight))))


# ---------------------------------------------------------------------------
# checkpoints
#
# Byte layout (all integers little-endian):
#   bytes 0..7    magic b"CYTGRAD1"
#   bytes 8..11   uint32 header length L
#   bytes 12..12+L-1   UTF-8 JSON header with keys:
#       format_version, pipeline_kind, architecture, params (name/shape
#       list in storage order), config_hash
#   remainder     raw float64 little-endian C-order parameter values,
#                 concatenated in header order
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path, config_hash: str = "") -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "pipeline_kind": params.kind.value,
        "architecture": params.arch.to_json(),
        "params": [{"name": n, "shape": list(v.shape)}
                   for n, v in params.values.items()],
        "config_hash": config_hash,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in params.values.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, header dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    kind = PipelineKind(header["pipeline_kind"])
    arch = Architecture.from_json(header["architecture"])

    values = {}
    offset = 12 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(raw):
            raise ValueError(f"{path}: truncated parameter payload at {entry['name']!r}")
        values[entry["name"]] = (
            np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        )
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return ModelParams(kind, arch, values), header
