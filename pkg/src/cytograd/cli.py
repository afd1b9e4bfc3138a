"""Command-line entry point for reproducible experiments.

Subcommands: ``train``, ``attribute``, ``compare``, ``generate``, ``eval``.
Configuration is a single JSON document; flat flags override config
fields. All randomness flows from one root seed, split per consumer
(data, init, shuffle, folds, holdout), so sub-seeds stay stable when
unrelated settings change. Every command is deterministic given its
config: double runs produce byte-identical outputs.

Exit codes: 0 success, 2 usage/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from .attribution import (
    STATS_CSV_HEADER,
    attribution_stats,
    black_baseline,
    export_overlay,
    integrated_gradients,
    stats_csv_row,
    white_baseline,
)
from .data import (
    export_dataset,
    generate_synthetic,
    holdout_split,
    load_directory,
    make_folds,
)
from .metrics import compare_folds, confusion_csv, evaluate, histogram_csv
from .model import PipelineKind, load_checkpoint, save_checkpoint
from .tensor import NumericError
from .training import (
    SEED_DATA,
    SEED_FOLDS,
    SEED_HOLDOUT,
    DivergenceError,
    TrainConfig,
    config_hash,
    train,
)

MAPS_CSV_HEADER = ("source_id,severity,steps,baseline,target,"
                   "f_input,f_baseline,completeness_error")


class ConfigError(Exception):
    """Bad config file or flag combination; maps to exit code 2."""


DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/default",
    "data": {"synthetic": {"n": 600, "size": 64}},
    "holdout_fraction": 0.25,
    "folds": 4,
    "train": {
        "pipeline": "combined",
        "epochs": 30,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "optimizer": "adam",
        "momentum": 0.9,
        "regression_weight": 1.0,
        "patience": None,
        "clip_norm": 5.0,
    },
    "attribution": {"steps": 64, "baseline": "white", "target": "score"},
    "compare_pipelines": ["classifier", "combined"],
}


def _check_fields(section: dict, allowed, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config field '{where}{key}'")


def load_config(path=None) -> dict:
    """Defaults, overlaid with the JSON document at ``path`` when given."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, "
                          f"column {e.colno}: {e.msg}") from e
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    _check_fields(user, DEFAULT_CONFIG, "")
    for key, value in user.items():
        if key in ("train", "attribution") and isinstance(value, dict):
            _check_fields(value, DEFAULT_CONFIG[key], f"{key}.")
            cfg[key].update(value)
        elif key == "data":
            cfg["data"] = value
        else:
            cfg[key] = value
    return cfg


def validate_config(cfg: dict) -> dict:
    data = cfg.get("data")
    if not isinstance(data, dict) or len(data) != 1 or \
            next(iter(data)) not in ("synthetic", "directory"):
        raise ConfigError(
            "config field 'data' must hold exactly one source: "
            '{"synthetic": {"n": ...}} or {"directory": "path"}')
    if "synthetic" in data:
        _check_fields(data["synthetic"], ("n", "size"), "data.synthetic.")
        if "n" not in data["synthetic"]:
            raise ConfigError("config field data.synthetic.n is required")
        data["synthetic"].setdefault("size", 64)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("config field 'seed' must be an integer")
    if not 0.0 < cfg["holdout_fraction"] < 1.0:
        raise ConfigError("config field 'holdout_fraction' must be in (0, 1)")
    if not isinstance(cfg["folds"], int) or cfg["folds"] < 2:
        raise ConfigError("config field 'folds' must be an integer >= 2")
    if cfg["attribution"]["baseline"] not in ("white", "black"):
        raise ConfigError("config field attribution.baseline must be "
                          "'white' or 'black'")
    steps = cfg["attribution"]["steps"]
    if not isinstance(steps, int) or steps < 1:
        raise ConfigError("config field attribution.steps must be an "
                          "integer >= 1")
    target = cfg["attribution"]["target"]
    if target != "score" and not re.fullmatch(r"class:[0-4]", target):
        raise ConfigError("config field attribution.target must be 'score' "
                          "or 'class:<0-4>'")
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg["out"] = str(args.out)
    if getattr(args, "pipeline", None) is not None:
        cfg["train"]["pipeline"] = args.pipeline
    if getattr(args, "steps", None) is not None:
        cfg["attribution"]["steps"] = args.steps
    if getattr(args, "baseline", None) is not None:
        cfg["attribution"]["baseline"] = args.baseline
    if getattr(args, "target", None) is not None:
        cfg["attribution"]["target"] = args.target
    if getattr(args, "folds", None) is not None:
        cfg["folds"] = args.folds
    return cfg


def _input_size(cfg: dict) -> int:
    if "synthetic" in cfg["data"]:
        return cfg["data"]["synthetic"]["size"]
    return 64


def _load_samples(cfg: dict, size: int | None = None):
    """Load the configured data source, optionally forcing the image size."""
    data = cfg["data"]
    if "synthetic" in data:
        seed = np.random.SeedSequence([cfg["seed"], SEED_DATA])
        return generate_synthetic(data["synthetic"]["n"], seed,
                                  size=size or data["synthetic"]["size"])
    root = Path(data["directory"])
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {root}")
    return load_directory(root, size=size or _input_size(cfg))


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(pipeline=t["pipeline"], epochs=t["epochs"],
                           batch_size=t["batch_size"],
                           learning_rate=t["learning_rate"],
                           optimizer=t["optimizer"], momentum=t["momentum"],
                           seed=cfg["seed"],
                           regression_weight=t["regression_weight"],
                           patience=t["patience"], clip_norm=t["clip_norm"],
                           input_size=_input_size(cfg))
    except ValueError as e:
        raise ConfigError(f"config field 'train': {e}") from e


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _json_dumps(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = validate_config(_apply_overrides(load_config(args.config), args))
    out = _out_dir(cfg)
    samples = _load_samples(cfg)
    train_set, test_set = holdout_split(
        samples, cfg["holdout_fraction"],
        np.random.SeedSequence([cfg["seed"], SEED_HOLDOUT]))
    tc = _train_config(cfg)
    print(f"training {tc.pipeline.value} on {len(train_set)} samples "
          f"({len(test_set)} held out), seed {cfg['seed']}")
    params, trace = train(tc, train_set, test_set, log=print)

    save_checkpoint(params, out / "checkpoint.ckpt", config_hash=config_hash(tc))
    _write(out / "trace.csv", trace.to_csv())
    report = evaluate(params, test_set)
    payload = {
        # everything that determines the result; "out" is where it landed,
        # not part of it, and would break byte-identity across locations
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "config_hash": config_hash(tc),
        "best_epoch": trace.best_epoch,
        "metrics": report.to_json(),
    }
    _write(out / "report.json", _json_dumps(payload))
    _write(out / "confusion.csv", confusion_csv(report))
    _write(out / "score_histogram.csv", histogram_csv(report))
    print(f"best epoch {trace.best_epoch}: severity accuracy "
          f"{report.severity_accuracy:.3f}, mean AUC {report.mean_auc:.3f}")
    print(f"wrote {out / 'checkpoint.ckpt'}, trace.csv, report.json")
    return 0


def _samples_for_checkpoint(args, cfg, size: int) -> list:
    """Load evaluation data resized to the checkpoint's input size."""
    if args.data is not None:
        root = Path(args.data)
        if not root.is_dir():
            raise ConfigError(f"dataset directory not found: {root}")
        return load_directory(root, size=size)
    return _load_samples(cfg, size=size)


def cmd_attribute(args) -> int:
    cfg = validate_config(_apply_overrides(load_config(args.config), args))
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params, _ = load_checkpoint(ckpt)
    att = cfg["attribution"]
    if params.kind is PipelineKind.REGRESSOR and att["target"] != "score":
        raise ConfigError("regressor checkpoints only support the 'score' "
                          "attribution target")
    samples = _samples_for_checkpoint(args, cfg, params.arch.input_size)
    out = _out_dir(cfg)
    (out / "overlays").mkdir(exist_ok=True)

    make_baseline = white_baseline if att["baseline"] == "white" else black_baseline
    stats_rows, maps_rows = [], []
    per_severity = {}
    skipped = 0
    for sample in samples:
        amap = integrated_gradients(
            params, sample.image, make_baseline(sample.image.shape),
            m=att["steps"], target=att["target"], source_id=sample.source_id)
        safe = sample.source_id.replace("/", "__")
        export_overlay(amap, sample.image, out / "overlays" / f"{safe}.png")
        maps_rows.append(
            f"{sample.source_id},{sample.severity},{amap.steps},"
            f"{amap.baseline_kind},{amap.target},{amap.f_input!r},"
            f"{amap.f_baseline!r},{amap.completeness_error!r}")
        if sample.mask is None:
            skipped += 1
            continue
        stats = attribution_stats(amap, sample.mask, sample.severity)
        stats_rows.append(stats_csv_row(stats))
        per_severity.setdefault(sample.severity, []).append(stats)

    if skipped:
        warnings.warn(f"{skipped} samples have no mask; overlays written "
                      "but no stats rows")
    _write(out / "stats.csv", "\n".join([STATS_CSV_HEADER] + stats_rows) + "\n")
    _write(out / "maps.csv", "\n".join([MAPS_CSV_HEADER] + maps_rows) + "\n")

    summary = ["severity,n,mean_at_n,mean_at_c,mean_ratio,n_infinite_ratio"]
    for severity in sorted(per_severity):
        group = per_severity[severity]
        finite = [s.ratio_n_over_c for s in group if not s.ratio_infinite]
        mean_ratio = repr(float(np.mean(finite))) if finite else ""
        summary.append(
            f"{severity},{len(group)},"
            f"{float(np.mean([s.at_n for s in group]))!r},"
            f"{float(np.mean([s.at_c for s in group]))!r},"
            f"{mean_ratio},{sum(s.ratio_infinite for s in group)}")
    _write(out / "summary.csv", "\n".join(summary) + "\n")
    for line in summary:
        print(line)
    print(f"wrote {len(maps_rows)} overlays, {len(stats_rows)} stats rows "
          f"to {out}")
    return 0


def cmd_compare(args) -> int:
    cfg = validate_config(_apply_overrides(load_config(args.config), args))
    pipelines = cfg["compare_pipelines"]
    if len(pipelines) < 2:
        raise ConfigError("config field 'compare_pipelines' needs >= 2 entries")
    out = _out_dir(cfg)
    samples = _load_samples(cfg)
    folds_seed = int(np.random.SeedSequence(
        [cfg["seed"], SEED_FOLDS]).generate_state(1)[0])
    plan = make_folds(samples, k=cfg["folds"], seed=folds_seed)
    configs = []
    for name in pipelines:
        sub = dict(cfg, train=dict(cfg["train"], pipeline=name))
        configs.append(_train_config(sub))
    print(f"comparing {pipelines} over {cfg['folds']} folds "
          f"({len(samples)} samples)")
    table = compare_folds(configs, plan, samples)
    _write(out / "fold_aucs.csv", table.to_csv())
    _write(out / "fold_summary.csv", table.summary_csv())
    print(table.summary_csv(), end="")
    print(f"wrote fold_aucs.csv and fold_summary.csv to {out}")
    return 0


def cmd_generate(args) -> int:
    if args.count < 5:
        raise ConfigError("generate needs --count >= 5")
    out = Path(args.out)
    seed = np.random.SeedSequence([args.seed, SEED_DATA])
    samples = generate_synthetic(args.count, seed, size=args.size)
    export_dataset(samples, out)
    print(f"wrote {len(samples)} samples (with masks) to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = validate_config(_apply_overrides(load_config(args.config), args))
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params, _ = load_checkpoint(ckpt)
    samples = _samples_for_checkpoint(args, cfg, params.arch.input_size)
    report = evaluate(params, samples)
    out = _out_dir(cfg)
    _write(out / "report.json", _json_dumps({"metrics": report.to_json()}))
    _write(out / "confusion.csv", confusion_csv(report))
    print(f"severity accuracy {report.severity_accuracy:.3f}, "
          f"mean AUC {report.mean_auc:.3f}, "
          f"score MSE {report.score_mse:.3f} over {report.n_samples} samples")
    print(f"wrote report.json to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cytograd",
        description="Ordinal severity pipelines with integrated-gradients "
                    "attribution on cell images.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, pipeline=False, attribution=False, checkpoint=False,
               data=False, folds=False):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file (defaults used otherwise)")
        p.add_argument("--seed", type=int, default=None,
                       help="root random seed override")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory override")
        if pipeline:
            p.add_argument("--pipeline", default=None,
                           choices=[k.value for k in PipelineKind])
        if attribution:
            p.add_argument("--steps", type=int, default=None,
                           help="integration steps m")
            p.add_argument("--baseline", default=None,
                           choices=["white", "black"])
            p.add_argument("--target", default=None,
                           help="'score' or 'class:<0-4>'")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True)
        if data:
            p.add_argument("--data", type=Path, default=None,
                           help="dataset directory (overrides config data)")
        if folds:
            p.add_argument("--folds", type=int, default=None)

    common(sub.add_parser("train", help="train one pipeline on a holdout split"),
           pipeline=True)
    common(sub.add_parser("attribute",
                          help="attribution maps, overlays, and mask stats"),
           attribution=True, checkpoint=True, data=True)
    common(sub.add_parser("compare",
                          help="train pipelines across folds, tabulate AUCs"),
           folds=True)
    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--size", type=int, default=64)
    common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset"),
           checkpoint=True, data=True)
    return parser


COMMANDS = {
    "train": cmd_train,
    "attribute": cmd_attribute,
    "compare": cmd_compare,
    "generate": cmd_generate,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DivergenceError, NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
