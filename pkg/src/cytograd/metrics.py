"""Evaluation: confusion matrix, AUC, binary collapse, score MSE, folds.

Class predictions follow fixed rules: softmax heads take the argmax
(ties break to the lowest class index), the regressor rounds its score to
the nearest class score and clamps to [1, 5]. Binary collapse maps
severity 0 to normal and 1..4 to abnormal; F1 is computed on the abnormal
class. AUC is the Mann-Whitney ordered-pair fraction with half credit
for ties, one-vs-rest per class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CLASS_WEIGHTS, ModelParams, PipelineKind, forward

EVAL_CHUNK = 64


def auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC: fraction of correctly ordered (pos, neg) pairs."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs nonempty positive and negative scores")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # 1-based ranks, averaged over tie groups
    bounds = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1], True])
    ranks_sorted = np.empty(scores.size)
    for a, b in zip(bounds[:-1], bounds[1:]):
        ranks_sorted[a:b] = 0.5 * (a + b + 1)
    ranks = np.empty(scores.size)
    ranks[order] = ranks_sorted
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def classes_from_outputs(kind: PipelineKind, outputs: np.ndarray) -> np.ndarray:
    """Head outputs -> predicted class 0..4 (probs [N,5] or scores [N]/[N,1])."""
    outputs = np.asarray(outputs)
    if kind is PipelineKind.REGRESSOR:
        scores = outputs.reshape(-1)
        return np.clip(np.floor(scores + 0.5), 1, 5).astype(np.int64) - 1
    return np.argmax(outputs, axis=1)


@dataclass
class Predictions:
    """Per-sample predictions in one place, the seam all metrics read from."""

    kind: PipelineKind
    labels: np.ndarray        # [N] true severity 0..4
    classes: np.ndarray       # [N] predicted class 0..4
    scores: np.ndarray        # [N] score prediction (expected value or raw)
    class_scores: np.ndarray  # [N, 5] per-class ranking score for AUC

    @property
    def argmax_scores(self) -> np.ndarray:
        return self.classes.astype(np.float64) + 1.0


def predict(params: ModelParams, samples) -> Predictions:
    if not samples:
        raise ValueError("empty test set")
    labels = np.array([s.severity for s in samples], dtype=np.int64)
    images = np.stack([s.image for s in samples])
    outputs = []
    for start in range(0, len(samples), EVAL_CHUNK):
        fp = forward(params, images[start:start + EVAL_CHUNK])
        out = fp.score if params.kind is PipelineKind.REGRESSOR else fp.probs
        outputs.append(out.values)
    outputs = np.concatenate(outputs)

    if params.kind is PipelineKind.REGRESSOR:
        scores = outputs[:, 0]
        class_scores = -np.abs(scores[:, None] - CLASS_WEIGHTS[None, :])
    else:
        scores = outputs @ CLASS_WEIGHTS
        class_scores = outputs
    return Predictions(kind=params.kind, labels=labels,
                       classes=classes_from_outputs(params.kind, outputs),
                       scores=scores, class_scores=class_scores)


def mse_two_pass(predicted, targets) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return float(np.mean((predicted - targets) ** 2))


def mse_streaming(predicted, targets) -> float:
    """Running-mean MSE; must agree with the two-pass version to 1e-12."""
    mean = 0.0
    for k, (p, t) in enumerate(zip(predicted, targets), start=1):
        err = (float(p) - float(t)) ** 2
        mean += (err - mean) / k
    return mean


@dataclass
class MetricsReport:
    kind: PipelineKind
    n_samples: int
    confusion: np.ndarray            # [5, 5] counts, rows = truth
    severity_accuracy: float
    per_class_auc: list              # 5 entries, None where undefined
    mean_auc: float
    binary_accuracy: float
    binary_f1: float
    score_mse: float                 # from Predictions.scores
    score_mse_argmax: float          # from predicted class + 1
    score_histogram: dict = field(default_factory=dict)  # severity -> scores

    def to_json(self) -> dict:
        return {
            "pipeline": self.kind.value,
            "n_samples": self.n_samples,
            "confusion": self.confusion.tolist(),
            "severity_accuracy": self.severity_accuracy,
            "per_class_auc": self.per_class_auc,
            "mean_auc": self.mean_auc,
            "binary_accuracy": self.binary_accuracy,
            "binary_f1": self.binary_f1,
            "score_mse": self.score_mse,
            "score_mse_argmax": self.score_mse_argmax,
            "score_histogram": {str(k): v for k, v in
                                sorted(self.score_histogram.items())},
        }


def report_from_predictions(pred: Predictions) -> MetricsReport:
    n = len(pred.labels)
    confusion = np.zeros((5, 5), dtype=np.int64)
    np.add.at(confusion, (pred.labels, pred.classes), 1)

    per_class_auc = []
    for c in range(5):
        is_pos = pred.labels == c
        if is_pos.all() or not is_pos.any():
            per_class_auc.append(None)
            continue
        per_class_auc.append(auc(pred.class_scores[is_pos, c],
                                 pred.class_scores[~is_pos, c]))
    defined = [a for a in per_class_auc if a is not None]
    mean_auc = float(np.mean(defined)) if defined else float("nan")

    # binary collapse straight off the confusion matrix
    normal_hits = int(confusion[0, 0])
    abnormal_hits = int(confusion[1:, 1:].sum())
    tp = abnormal_hits
    fn = int(confusion[1:, 0].sum())
    fp = int(confusion[0, 1:].sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0

    targets = pred.labels + 1.0
    histogram = {c: pred.scores[pred.labels == c].tolist() for c in range(5)}
    return MetricsReport(
        kind=pred.kind,
        n_samples=n,
        confusion=confusion,
        severity_accuracy=float(np.trace(confusion)) / n,
        per_class_auc=per_class_auc,
        mean_auc=mean_auc,
        binary_accuracy=(normal_hits + abnormal_hits) / n,
        binary_f1=f1,
        score_mse=mse_two_pass(pred.scores, targets),
        score_mse_argmax=mse_two_pass(pred.argmax_scores, targets),
        score_histogram=histogram,
    )


def evaluate(params: ModelParams, samples) -> MetricsReport:
    return report_from_predictions(predict(params, samples))


def confusion_csv(report: MetricsReport) -> str:
    lines = ["truth\\pred," + ",".join(str(c) for c in range(5))]
    for r in range(5):
        lines.append(str(r) + "," + ",".join(str(int(x)) for x in report.confusion[r]))
    return "\n".join(lines) + "\n"


def histogram_csv(report: MetricsReport) -> str:
    lines = ["true_severity,predicted_score"]
    for severity in sorted(report.score_histogram):
        for score in report.score_histogram[severity]:
            lines.append(f"{severity},{score!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# fold comparison
# ---------------------------------------------------------------------------


@dataclass
class FoldTable:
    """per-(pipeline, class, fold) AUC entries plus summary statistics."""

    rows: list  # (pipeline: str, class_index: int, fold: int, auc: float|None)

    def to_csv(self) -> str:
        lines = ["pipeline,class,fold,auc"]
        for pipeline, class_index, fold, value in self.rows:
            cell = "" if value is None else repr(value)
            lines.append(f"{pipeline},{class_index},{fold},{cell}")
        return "\n".join(lines) + "\n"

    def aucs(self, pipeline: str, class_index: int) -> list:
        return [v for p, c, _, v in self.rows
                if p == pipeline and c == class_index and v is not None]

    def summary(self) -> list:
        """Five-number summary per (pipeline, class): min,q1,median,q3,max."""
        out = []
        seen = []
        for pipeline, class_index, _, _ in self.rows:
            if (pipeline, class_index) not in seen:
                seen.append((pipeline, class_index))
        for pipeline, class_index in seen:
            values = self.aucs(pipeline, class_index)
            if not values:
                out.append((pipeline, class_index, [None] * 5))
                continue
            q = np.percentile(values, [0, 25, 50, 75, 100])
            out.append((pipeline, class_index, [float(x) for x in q]))
        return out

    def summary_csv(self) -> str:
        lines = ["pipeline,class,min,q1,median,q3,max"]
        for pipeline, class_index, q in self.summary():
            cells = ",".join("" if x is None else repr(x) for x in q)
            lines.append(f"{pipeline},{class_index},{cells}")
        return "\n".join(lines) + "\n"


def compare_folds(configs, plan, samples) -> FoldTable:
    """Train every config on every fold and tabulate one-vs-rest AUCs."""
    from .training import DivergenceError, train  # deferred: training imports metrics

    if len(configs) < 2:
        raise ValueError("compare_folds needs at least 2 pipeline configs")
    names = [cfg.pipeline.value for cfg in configs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate pipeline kinds in configs: {names}")

    by_id = {s.source_id: s for s in samples}
    rows = []
    for cfg in configs:
        for fold in range(plan.k):
            train_set = [by_id[i] for i in plan.train_ids(fold)]
            test_set = [by_id[i] for i in plan.test_ids(fold)]
            try:
                params, _ = train(cfg, train_set, test_set)
            except DivergenceError as e:
                raise DivergenceError(
                    e.epoch, e.batch,
                    f"fold {fold}, pipeline {cfg.pipeline.value}: {e}") from e
            report = evaluate(params, test_set)
            for class_index in range(5):
                rows.append((cfg.pipeline.value, class_index, fold,
                             report.per_class_auc[class_index]))
    return FoldTable(rows=rows)
