"""Explain a trained model with integrated gradients.

Attributions are path-integrated input gradients scaled by the distance
from a white baseline (white = the bright empty-slide background, i.e.
absence of cell signal). The completeness identity ties the map to the
model: attributions sum to F(input) - F(baseline).
"""

from pathlib import Path

from cytograd import (
    TrainConfig,
    attribution_stats,
    export_overlay,
    generate_synthetic,
    holdout_split,
    integrated_gradients,
    train,
)

samples = generate_synthetic(300, seed=7, size=32)
train_set, test_set = holdout_split(samples, 0.2, seed=7)
cfg = TrainConfig(pipeline="combined", epochs=8, batch_size=32,
                  learning_rate=2e-3, seed=7, input_size=32)
params, _ = train(cfg, train_set, test_set)
print("model trained.\n")

out = Path(__file__).parent / "output" / "overlays"
print("severity  F(x)   completeness_err  at_nucleus  at_cyto  n/c ratio")
shown = set()
for sample in test_set:
    if sample.severity in shown:
        continue
    shown.add(sample.severity)
    amap = integrated_gradients(params, sample.image, m=64,
                                source_id=sample.source_id)
    stats = attribution_stats(amap, sample.mask, sample.severity)
    export_overlay(amap, sample.image, out / f"severity{sample.severity}.png")
    print(f"{sample.severity:>8}  {amap.f_input:.2f}   "
          f"{amap.completeness_error:>16.2e}  {stats.at_n:>10.3f}  "
          f"{stats.at_c:>7.3f}  {stats.ratio_n_over_c:>9.3f}")

print(f"\noverlay triptychs (original | heatmap | blend) written to {out}")
print("the nucleus share of attribution mass rises with severity, matching")
print("how the generator encodes grade in nucleus size and darkness.")
