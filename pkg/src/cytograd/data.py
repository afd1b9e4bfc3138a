"""Datasets: directory loading, a synthetic cell surrogate, and fold plans.

Real data follows the seven-class cervical cytology directory convention
(Herlev layout): ``<root>/<class-name>/<id>.png`` plus an optional
``<id>-mask.png`` sibling whose palette indices are 0 background,
1 nucleus, 2 cytoplasm. The seven class names are merged to a five-level
severity in 0..4 (score = severity + 1).

The synthetic generator draws an ellipse cell (cytoplasm) with an inner
nucleus on a light background. Severity shows up only inside the nucleus:
its area fraction and darkness grow with severity while the cytoplasm's
appearance is independent of it, so a model that predicts severity must be
reading the nucleus. Masks are exact by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# Seven-class directory names -> merged severity.
HERLEV_SEVERITY = {
    "normal_columnar": 0,
    "normal_intermediate": 0,
    "normal_superficial": 0,
    "light_dysplastic": 1,
    "moderate_dysplastic": 2,
    "severe_dysplastic": 3,
    "carcinoma_in_situ": 4,
}

# Canonical directory name per severity when exporting generated data.
EXPORT_CLASS = {
    0: "normal_superficial",
    1: "light_dysplastic",
    2: "moderate_dysplastic",
    3: "severe_dysplastic",
    4: "carcinoma_in_situ",
}

# Expected nucleus/cytoplasm mask-pixel ratio per severity; each sample
# jitters its ratio by up to +-10% around the anchor.
RATIO_ANCHORS = (0.08, 0.16, 0.26, 0.38, 0.52)
RATIO_JITTER = 0.10

MASK_CODES = frozenset({0, 1, 2})
MASK_PALETTE = [0, 0, 0, 220, 40, 40, 60, 180, 75] + [0] * (256 * 3 - 9)


@dataclass
class Sample:
    """One image with its severity label and optional segmentation mask."""

    image: np.ndarray          # [3, H, W] float64 in [0, 1]
    severity: int              # 0..4
    source_id: str
    mask: np.ndarray = None    # [H, W] uint8 codes {0, 1, 2}, or None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.source_id}: image shape {self.image.shape}, "
                             "expected [3, H, W]")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"{self.source_id}: image values outside [0, 1]")
        if not 0 <= int(self.severity) <= 4:
            raise ValueError(f"{self.source_id}: severity {self.severity} not in 0..4")
        self.severity = int(self.severity)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.uint8)
            if self.mask.shape != self.image.shape[1:]:
                raise ValueError(
                    f"{self.source_id}: mask shape {self.mask.shape} does not "
                    f"match image spatial dims {self.image.shape[1:]}"
                )
            if not set(np.unique(self.mask)) <= MASK_CODES:
                raise ValueError(f"{self.source_id}: mask codes outside {{0,1,2}}")

    @property
    def score(self) -> float:
        return float(self.severity + 1)


def _read_image(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size, size), Image.Resampling.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as e:
        raise ValueError(f"cannot read image {path}: {e}") from e
    return arr.transpose(2, 0, 1)


def _read_mask(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "P":
                im = im.convert("L")
            im = im.resize((size, size), Image.Resampling.NEAREST)
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as e:
        raise ValueError(f"cannot read mask {path}: {e}") from e
    if not set(np.unique(arr)) <= MASK_CODES:
        raise ValueError(f"mask {path} uses codes outside {{0,1,2}}: "
                         f"{sorted(np.unique(arr))}")
    return arr


def load_directory(root, size: int = 64) -> list:
    """Load every PNG under the class subdirectories of ``root``.

    Images are resized bilinearly to ``size`` x ``size`` and scaled to
    [0, 1]; masks are resized nearest-neighbor so codes stay discrete.
    Unknown subdirectory names fail loudly rather than being skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subdirs:
        warnings.warn(f"dataset root {root} contains no class directories")
        return []

    samples = []
    for sub in subdirs:
        if sub.name not in HERLEV_SEVERITY:
            raise ValueError(
                f"unknown class directory {sub.name!r} under {root}; "
                f"expected one of {sorted(HERLEV_SEVERITY)}"
            )
        severity = HERLEV_SEVERITY[sub.name]
        for png in sorted(sub.glob("*.png")):
            if png.stem.endswith("-mask"):
                continue
            mask_path = png.with_name(f"{png.stem}-mask.png")
            mask = _read_mask(mask_path, size) if mask_path.exists() else None
            samples.append(Sample(
                image=_read_image(png, size),
                severity=severity,
                source_id=f"{sub.name}/{png.stem}",
                mask=mask,
            ))
    return samples


def export_dataset(samples, root) -> None:
    """Write samples in the directory layout ``load_directory`` reads.

    Images are quantized to 8-bit PNG; masks keep their codes exactly as
    palette indices, so labels and masks round-trip losslessly.
    """
    root = Path(root)
    for sample in samples:
        sub = root / EXPORT_CLASS[sample.severity]
        sub.mkdir(parents=True, exist_ok=True)
        stem = sample.source_id.rsplit("/", 1)[-1]
        pixels = np.rint(sample.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(sub / f"{stem}.png")
        if sample.mask is not None:
            im = Image.fromarray(sample.mask, mode="P")
            im.putpalette(MASK_PALETTE)
            im.save(sub / f"{stem}-mask.png")


def _ellipse(yy, xx, cx, cy, a, b, theta):
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_synthetic(n: int, seed, size: int = 64) -> list:
    """Generate ``n`` synthetic cell samples with exact masks.

    Per severity s, the nucleus/cytoplasm mask-pixel ratio is drawn around
    RATIO_ANCHORS[s] (+-10%) and nucleus darkness/noise grow with s; the
    cytoplasm and background are drawn independently of s.
    """
    if n < 5:
        raise ValueError(f"need n >= 5 synthetic samples, got {n}")
    rng = np.random.default_rng(seed)
    coords = np.arange(size) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    samples = []
    for i in range(n):
        severity = int(rng.integers(0, 5))

        cx = (0.5 + rng.uniform(-0.05, 0.05)) * size
        cy = (0.5 + rng.uniform(-0.05, 0.05)) * size
        a_c = rng.uniform(0.28, 0.40) * size
        b_c = rng.uniform(0.28, 0.40) * size
        theta = rng.uniform(0.0, np.pi)

        ratio = RATIO_ANCHORS[severity] * (1.0 + rng.uniform(-RATIO_JITTER, RATIO_JITTER))
        f = np.sqrt(ratio / (1.0 + ratio))
        aspect = rng.uniform(0.88, 1.12)
        a_n = f * aspect * a_c
        b_n = (f / aspect) * b_c
        # nucleus offset in the cytoplasm's rotated frame, small enough that
        # the nucleus stays strictly inside the cytoplasm ellipse
        off_a = rng.uniform(-0.3, 0.3) * (1.0 - f * aspect) * a_c
        off_b = rng.uniform(-0.3, 0.3) * (1.0 - f / aspect) * b_c
        ct, st = np.cos(theta), np.sin(theta)
        nx = cx + off_a * ct - off_b * st
        ny = cy + off_a * st + off_b * ct

        cyto = _ellipse(yy, xx, cx, cy, a_c, b_c, theta)
        nucleus = _ellipse(yy, xx, nx, ny, a_n, b_n, theta) & cyto
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[cyto] = 2
        mask[nucleus] = 1

        bg_base = rng.uniform(0.90, 0.96)
        bg_tint = rng.uniform(-0.01, 0.01, size=3)
        cy_base = rng.uniform(0.66, 0.78)
        cy_tint = rng.uniform(-0.04, 0.04, size=3)
        nu_base = 0.56 - 0.075 * severity + rng.uniform(-0.02, 0.02)
        nu_tint = rng.uniform(-0.03, 0.03, size=3)

        base = np.where(mask == 0, bg_base, np.where(mask == 2, cy_base, nu_base))
        tint = np.choose(mask, [bg_tint[:, None, None] * np.ones((size, size)),
                                nu_tint[:, None, None] * np.ones((size, size)),
                                cy_tint[:, None, None] * np.ones((size, size))])
        sigma = np.where(mask == 0, 0.008,
                         np.where(mask == 2, 0.015, 0.010 + 0.012 * severity))
        noise = rng.standard_normal((3, size, size))
        image = np.clip(base[None] + tint + noise * sigma[None], 0.0, 1.0)

        samples.append(Sample(image=image, severity=severity,
                              source_id=f"synthetic-{i:05d}", mask=mask))
    return samples


@dataclass(frozen=True)
class FoldPlan:
    """Stratified partition of sample ids into k folds."""

    seed: int
    k: int
    folds: tuple  # k tuples of sample ids (the test set of each fold)

    @property
    def assignment(self) -> dict:
        return {sid: f for f, ids in enumerate(self.folds) for sid in ids}

    def test_ids(self, fold: int) -> tuple:
        return self.folds[fold]

    def train_ids(self, fold: int) -> tuple:
        return tuple(sid for f, ids in enumerate(self.folds)
                     for sid in ids if f != fold)


def make_folds(samples, k: int = 4, seed: int = 0) -> FoldPlan:
    """Deal each class round-robin into k folds after a seeded shuffle."""
    ids = [s.source_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate source_ids; fold plans need unique ids")
    by_class = {}
    for s in samples:
        by_class.setdefault(s.severity, []).append(s.source_id)

    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for severity in sorted(by_class):
        class_ids = sorted(by_class[severity])
        if len(class_ids) < k:
            raise ValueError(
                f"class severity={severity} has {len(class_ids)} samples, "
                f"fewer than k={k}"
            )
        order = rng.permutation(len(class_ids))
        for j, idx in enumerate(order):
            folds[(offset + j) % k].append(class_ids[idx])
        offset += len(class_ids)
    return FoldPlan(seed=seed, k=k, folds=tuple(tuple(f) for f in folds))


def holdout_split(samples, fraction: float = 0.25, seed: int = 0):
    """Stratified single (train, test) split, deterministic in seed."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"holdout fraction must be in (0, 1), got {fraction}")
    by_class = {}
    for s in samples:
        by_class.setdefault(s.severity, []).append(s)

    rng = np.random.default_rng(seed)
    train, test = [], []
    for severity in sorted(by_class):
        group = sorted(by_class[severity], key=lambda s: s.source_id)
        order = rng.permutation(len(group))
        n_test = min(len(group) - 1, max(1, round(fraction * len(group))))
        for j, idx in enumerate(order):
            (test if j < n_test else train).append(group[idx])
    train.sort(key=lambda s: s.source_id)
    test.sort(key=lambda s: s.source_id)
    return train, test
