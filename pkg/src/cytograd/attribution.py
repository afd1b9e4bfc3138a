"""Integrated-gradients attribution and mask-based localization stats.

The attribution of input pixel i is

    values_i = (x_i - x'_i) * (1/m) * sum_{k=1..m} dF/dx_i at x' + (k/m)(x - x')

a right-endpoint Riemann sum along the straight path from baseline x' to
input x. As m grows the total attribution approaches F(x) - F(x')
(completeness). The default baseline is white (all ones): slide
backgrounds are bright, so an all-white image is the natural absence of
signal. The default target is the severity score (expected score for
softmax heads, raw output for the regressor).

For the localization statistics, signed 3-channel attributions are
aggregated per pixel as the sum of absolute channel values, which keeps
denominators from vanishing by sign cancellation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .model import ModelParams, PipelineKind, expected_score, forward
from .tensor import ShapeError, backward
from . import tensor as T

GRAD_CHUNK = 32


class UndefinedStatsError(ValueError):
    """Raised when attribution stats would divide by an all-zero map."""


def white_baseline(shape) -> np.ndarray:
    return np.ones(shape, dtype=np.float64)


def black_baseline(shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float64)


def baseline_kind(baseline: np.ndarray) -> str:
    if (baseline == 1.0).all():
        return "white"
    if (baseline == 0.0).all():
        return "black"
    return "custom"


@dataclass
class AttributionMap:
    values: np.ndarray      # [3, H, W] signed per-channel attributions
    baseline_kind: str
    steps: int
    target: str
    source_id: str
    f_input: float          # F(x)
    f_baseline: float       # F(x')

    @property
    def pixel_values(self) -> np.ndarray:
        """Per-pixel magnitude: sum of absolute channel attributions."""
        return np.abs(self.values).sum(axis=0)

    @property
    def completeness_error(self) -> float:
        return abs(float(self.values.sum()) - (self.f_input - self.f_baseline))


def integrated_gradients_fn(run, image, baseline, m, chunk=GRAD_CHUNK):
    """IG core over an arbitrary differentiable target.

    ``run(batch_values)`` must build a fresh graph and return
    ``(target, batch_leaf)`` where target is a [N] tensor of per-row model
    outputs. Returns (values array like image, f_values[0..m]) where
    f_values[k] is the target at interpolation point k/m.
    """
    image = np.asarray(image, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if image.shape != baseline.shape:
        raise ShapeError(f"image shape {image.shape} != baseline {baseline.shape}")
    m = int(m)
    if m < 1:
        raise ValueError(f"need m >= 1 integration steps, got {m}")

    alphas = np.arange(m + 1) / m   # row 0 is the baseline itself
    diff = image - baseline
    grad_sum = np.zeros_like(image)
    f_values = np.empty(m + 1)

    for start in range(0, m + 1, chunk):
        idx = np.arange(start, min(start + chunk, m + 1))
        batch = baseline[None] + alphas[idx][:, None, None, None] * diff[None]
        target, leaf = run(batch)
        if target.values.shape != (len(idx),):
            raise ShapeError(f"target must be [N]={len(idx)}, "
                             f"got {target.values.shape}")
        f_values[idx] = target.values
        # rows are independent samples, so the gradient of this masked sum
        # recovers each selected row's own input gradient (k=0 rows get 0)
        weights = target.graph.leaf((idx >= 1).astype(np.float64))
        total = T.sum_all(T.mul(target, weights))
        grads = backward(total, [leaf])
        grad_sum += grads[leaf.node_id].values.sum(axis=0)

    return diff * grad_sum / m, f_values


def _model_runner(params: ModelParams, target: str):
    def run(batch):
        fp = forward(params, batch)
        n = batch.shape[0]
        if params.kind is PipelineKind.REGRESSOR:
            if target != "score":
                raise ValueError(f"regressor attribution only supports "
                                 f"target 'score', got {target!r}")
            return T.reshape(fp.score, (n,)), fp.batch
        if target == "score":
            return T.reshape(expected_score(fp.probs), (n,)), fp.batch
        if target.startswith("class:"):
            k = int(target.split(":", 1)[1])
            if not 0 <= k <= 4:
                raise ValueError(f"class target must be 0..4, got {k}")
            picker = fp.graph.leaf(np.tile(np.eye(5)[k], (n, 1)))
            return T.row_sum(T.mul(fp.probs, picker)), fp.batch
        raise ValueError(f"unknown attribution target {target!r}; "
                         "use 'score' or 'class:<0-4>'")

    return run


def integrated_gradients(params: ModelParams, image, baseline=None,
                         m: int = 64, target: str = "score",
                         source_id: str = "") -> AttributionMap:
    """Attribution map of one image under the given pipeline."""
    image = np.asarray(image, dtype=np.float64)
    want = (params.arch.in_channels, params.arch.input_size, params.arch.input_size)
    if image.shape != want:
        raise ShapeError(f"image shape {image.shape} does not match model {want}")
    if baseline is None:
        baseline = white_baseline(image.shape)
    values, f_values = integrated_gradients_fn(
        _model_runner(params, target), image, baseline, m)
    return AttributionMap(values=values, baseline_kind=baseline_kind(baseline),
                          steps=int(m), target=target, source_id=source_id,
                          f_input=float(f_values[-1]),
                          f_baseline=float(f_values[0]))


@dataclass
class AttributionStats:
    at_n: float                  # fraction of attribution inside the nucleus
    at_c: float                  # fraction inside the cytoplasm
    ratio_n_over_c: float        # at_n / at_c; inf when at_c == 0
    ratio_infinite: bool
    severity: int
    source_id: str
    at_n_signed: float = None    # same fractions from signed sums; None when
    at_c_signed: float = None    # the signed total is ~0


def attribution_stats(amap: AttributionMap, mask: np.ndarray,
                      severity: int) -> AttributionStats:
    mask = np.asarray(mask)
    pv = amap.pixel_values
    if mask.shape != pv.shape:
        raise ShapeError(f"mask shape {mask.shape} != map {pv.shape}")
    if not set(np.unique(mask)) <= {0, 1, 2}:
        raise ValueError("mask codes outside {0,1,2}")
    total = float(pv.sum())
    if total == 0.0:
        raise UndefinedStatsError(
            f"{amap.source_id or 'map'}: all-zero attribution map, "
            "stats are undefined")
    at_n = float(pv[mask == 1].sum()) / total
    at_c = float(pv[mask == 2].sum()) / total
    infinite = at_c == 0.0
    ratio = float("inf") if infinite else at_n / at_c

    signed = amap.values.sum(axis=0)
    signed_total = float(signed.sum())
    if abs(signed_total) > 1e-12:
        at_n_signed = float(signed[mask == 1].sum()) / signed_total
        at_c_signed = float(signed[mask == 2].sum()) / signed_total
    else:
        at_n_signed = at_c_signed = None
    return AttributionStats(at_n=at_n, at_c=at_c, ratio_n_over_c=ratio,
                            ratio_infinite=infinite, severity=int(severity),
                            source_id=amap.source_id,
                            at_n_signed=at_n_signed, at_c_signed=at_c_signed)


def stats_csv_row(stats: AttributionStats) -> str:
    ratio = "inf" if stats.ratio_infinite else repr(stats.ratio_n_over_c)
    return (f"{stats.source_id},{stats.severity},"
            f"{stats.at_n!r},{stats.at_c!r},{ratio}")


STATS_CSV_HEADER = "source_id,severity,at_n,at_c,ratio"


def _heat_colormap(fraction: np.ndarray) -> np.ndarray:
    """[H,W] in [0,1] -> [3,H,W] black-red-yellow-white ramp."""
    r = np.clip(3.0 * fraction, 0.0, 1.0)
    g = np.clip(3.0 * fraction - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * fraction - 2.0, 0.0, 1.0)
    return np.stack([r, g, b])


def export_overlay(amap: AttributionMap, image, path) -> None:
    """Write an [original | heat map | blend] triptych PNG."""
    image = np.asarray(image, dtype=np.float64)
    pv = amap.pixel_values
    if image.shape[1:] != pv.shape or image.shape[0] != 3:
        raise ShapeError(f"image shape {image.shape} does not match "
                         f"map {pv.shape}")
    peak = pv.max()
    heat = _heat_colormap(pv / peak if peak > 0 else pv)
    blend = np.clip(0.55 * image + 0.45 * heat, 0.0, 1.0)
    panel = np.concatenate([image, heat, blend], axis=2)
    pixels = np.rint(panel.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="RGB").save(path)
