"""Deterministic mini-batch training for all three pipelines.

Everything that varies run-to-run flows from ``TrainConfig.seed``:
parameter init and the per-epoch shuffle derive their own streams through
``numpy.random.SeedSequence([seed, consumer, ...])``, so two runs with the
same config and data produce bit-identical parameters and traces.
"""

from __future__ import annotations

import json
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import classes_from_outputs
from .model import (
    Architecture,
    ModelParams,
    PipelineKind,
    forward,
    init_params,
    loss,
)
from .tensor import NumericError, ShapeError, backward

# Sub-stream indices hung off the root seed; stable across unrelated
# config changes so e.g. changing epochs never reshuffles the data split.
SEED_DATA = 0
SEED_INIT = 1
SEED_SHUFFLE = 2
SEED_FOLDS = 3
SEED_HOLDOUT = 4

EVAL_CHUNK = 64


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss; names where it happened."""

    def __init__(self, epoch, batch, detail):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    pipeline: PipelineKind = PipelineKind.COMBINED
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"          # "adam" | "sgd"
    momentum: float = 0.9            # sgd only
    seed: int = 0
    regression_weight: float = 1.0   # combined only
    patience: int = None             # early stop; None disables
    clip_norm: float = 5.0
    input_size: int = 64

    def __post_init__(self):
        if isinstance(self.pipeline, str):
            self.pipeline = PipelineKind(self.pipeline)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        # lr = 0 is legal (a no-op run), negative is not
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when set")

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["pipeline"] = self.pipeline.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_json(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float = 0.0
    clipped_batches: int = 0


@dataclass
class TrainTrace:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_acc"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.val_acc!r}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer steps: pure functions over name -> array dicts
# ---------------------------------------------------------------------------


def _check_grads(values: dict, grads: dict) -> None:
    if list(values) != list(grads):
        raise ShapeError(f"gradient names {list(grads)} do not match "
                         f"parameters {list(values)}")
    for name in values:
        if values[name].shape != grads[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape "
                             f"{grads[name].shape}, parameter {values[name].shape}")


def init_sgd_state(values: dict) -> dict:
    return {"velocity": {n: np.zeros_like(v) for n, v in values.items()}}


def sgd_step(values: dict, grads: dict, state: dict, lr: float,
             momentum: float = 0.9):
    _check_grads(values, grads)
    new_v = {}
    new_p = {}
    for name in values:
        v = momentum * state["velocity"][name] + grads[name]
        new_v[name] = v
        new_p[name] = values[name] - lr * v
    return new_p, {"velocity": new_v}


def init_adam_state(values: dict) -> dict:
    return {
        "t": 0,
        "m": {n: np.zeros_like(v) for n, v in values.items()},
        "v": {n: np.zeros_like(v) for n, v in values.items()},
    }


def adam_step(values: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    _check_grads(values, grads)
    t = state["t"] + 1
    new_m, new_v, new_p = {}, {}, {}
    for name in values:
        g = grads[name]
        m = beta1 * state["m"][name] + (1.0 - beta1) * g
        v = beta2 * state["v"][name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_m[name] = m
        new_v[name] = v
        new_p[name] = values[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_p, {"t": t, "m": new_m, "v": new_v}


def clip_gradients(grads: dict, max_norm: float):
    """Scale all gradients so the global norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total, False
    scale = max_norm / total
    return {n: g * scale for n, g in grads.items()}, total, True


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order as a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, SEED_SHUFFLE, epoch]))
    return rng.permutation(n)


def initial_params(config: TrainConfig) -> ModelParams:
    """The exact parameters ``train`` starts from for this config."""
    arch = Architecture.for_kind(config.pipeline, input_size=config.input_size)
    return init_params(config.pipeline,
                       np.random.SeedSequence([config.seed, SEED_INIT]), arch)


def _stack(samples):
    images = np.stack([s.image for s in samples])
    labels = np.array([s.severity for s in samples], dtype=np.int64)
    return images, labels


def _predicted_classes(kind: PipelineKind, fp) -> np.ndarray:
    out = fp.score if kind is PipelineKind.REGRESSOR else fp.probs
    return classes_from_outputs(kind, out.values)


def evaluate_loss(params: ModelParams, samples, regression_weight: float = 1.0):
    """Mean loss and severity accuracy over samples, in eval-sized chunks."""
    images, labels = _stack(samples)
    total = 0.0
    hits = 0
    for start in range(0, len(samples), EVAL_CHUNK):
        chunk = slice(start, start + EVAL_CHUNK)
        fp = forward(params, images[chunk])
        l = loss(params.kind, fp, labels[chunk], regression_weight)
        total += float(l.values) * len(labels[chunk])
        hits += int((_predicted_classes(params.kind, fp) == labels[chunk]).sum())
    return total / len(samples), hits / len(samples)


def train(config: TrainConfig, train_samples, val_samples, log=None):
    """Train one pipeline; returns (best ModelParams, TrainTrace).

    Best means lowest validation loss; ties go to the earlier epoch. The
    returned trace covers every epoch actually run.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    if not val_samples:
        raise ValueError("validation set is empty; best-epoch selection needs one")

    images, labels = _stack(train_samples)
    params = initial_params(config)
    values = params.values
    if config.optimizer == "adam":
        state = init_adam_state(values)
        step = lambda v, g, s: adam_step(v, g, s, config.learning_rate)
    else:
        state = init_sgd_state(values)
        step = lambda v, g, s: sgd_step(v, g, s, config.learning_rate,
                                        config.momentum)

    trace = TrainTrace()
    best_loss = np.inf
    best_values = {n: v.copy() for n, v in values.items()}
    stale = 0

    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        order = epoch_order(len(train_samples), config.seed, epoch)
        loss_sum = 0.0
        clipped = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            model = ModelParams(config.pipeline, params.arch, values)
            try:
                fp = forward(model, images[idx])
                l = loss(config.pipeline, fp, labels[idx], config.regression_weight)
                grad_nodes = backward(l, list(fp.params.values()))
            except NumericError as e:
                raise DivergenceError(epoch, b, str(e)) from e
            grads = {name: grad_nodes[leaf.node_id].values
                     for name, leaf in fp.params.items()}
            grads, _, was_clipped = clip_gradients(grads, config.clip_norm)
            clipped += int(was_clipped)
            values, state = step(values, grads, state)
            loss_sum += float(l.values) * len(idx)

        model = ModelParams(config.pipeline, params.arch, values)
        try:
            val_loss, val_acc = evaluate_loss(model, val_samples,
                                              config.regression_weight)
        except NumericError as e:
            raise DivergenceError(epoch, "validation", str(e)) from e

        stats = EpochStats(epoch=epoch,
                           train_loss=loss_sum / len(train_samples),
                           val_loss=val_loss, val_acc=val_acc,
                           seconds=time.perf_counter() - tic,
                           clipped_batches=clipped)
        trace.epochs.append(stats)
        if log is not None:
            clip_note = f" clipped={clipped}" if clipped else ""
            log(f"epoch {epoch}/{config.epochs} train {stats.train_loss:.4f} "
                f"val {val_loss:.4f} acc {val_acc:.3f}{clip_note}")

        if val_loss < best_loss:
            best_loss = val_loss
            best_values = {n: v.copy() for n, v in values.items()}
            trace.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break

    return ModelParams(config.pipeline, params.arch, best_values), trace
