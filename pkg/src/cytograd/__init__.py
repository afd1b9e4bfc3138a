"""cytograd: ordinal severity grading of cell images with attribution.

A small numpy library built around four pieces:

* a from-scratch reverse-mode autodiff tensor core (:mod:`cytograd.tensor`),
* a compact CNN with three interchangeable heads -- plain classifier,
  score regressor, and a classifier whose softmax probabilities are turned
  into an expected severity score and penalized by squared error
  (:mod:`cytograd.model`),
* integrated-gradients attribution with nucleus/cytoplasm mass metrics
  (:mod:`cytograd.attribution`),
* a synthetic cell-image generator with exact masks, fold utilities,
  training loop, and evaluation metrics to exercise it all at desk scale.
"""

from cytograd.attribution import (
    AttributionMap,
    AttributionStats,
    UndefinedStatsError,
    attribution_stats,
    black_baseline,
    export_overlay,
    integrated_gradients,
    white_baseline,
)
from cytograd.data import (
    FoldPlan,
    Sample,
    export_dataset,
    generate_synthetic,
    holdout_split,
    load_directory,
    make_folds,
)
from cytograd.metrics import (
    FoldTable,
    MetricsReport,
    Predictions,
    auc,
    compare_folds,
    evaluate,
    predict,
)
from cytograd.model import (
    Architecture,
    ModelParams,
    PipelineKind,
    forward,
    init_params,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from cytograd.tensor import Graph, NumericError, ShapeError, Tensor, backward
from cytograd.training import (
    DivergenceError,
    TrainConfig,
    TrainTrace,
    train,
)

__all__ = [
    "Architecture",
    "AttributionMap",
    "AttributionStats",
    "DivergenceError",
    "FoldPlan",
    "FoldTable",
    "Graph",
    "MetricsReport",
    "ModelParams",
    "NumericError",
    "PipelineKind",
    "Predictions",
    "Sample",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "TrainTrace",
    "UndefinedStatsError",
    "attribution_stats",
    "auc",
    "backward",
    "black_baseline",
    "compare_folds",
    "evaluate",
    "export_dataset",
    "export_overlay",
    "forward",
    "generate_synthetic",
    "holdout_split",
    "init_params",
    "integrated_gradients",
    "load_checkpoint",
    "load_directory",
    "loss",
    "make_folds",
    "predict",
    "save_checkpoint",
    "train",
    "white_baseline",
]
__version__ = "0.1.0"
