"""End-to-end mask refinement over a manifest of blade groups.

Per image: merge the four flip-variant probability maps (when given), binarize
at the configured threshold, and hole-fill. Per blade group, once every image
has its first-pass mask: fit the color forest on (image, first-pass mask)
pairs, re-predict every image, and hole-fill again. The four mask stages are
tagged ``BU`` (binarized upstream), ``H1`` (first fill), ``RF`` (forest) and
``H2`` (second fill, the final output).

Items are quarantined individually: a bad file or shape mismatch drops that
image (and is reported), not its whole group. Outputs land in per-image
distinct paths and all computation is deterministic for a fixed manifest,
config and seed, at any parallelism.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .forest import ForestConfig, fit_forest_data, predict_mask
from .holefill import blade_hole_fill
from .losses import LossConfig
from .manifest import Manifest, ManifestRow
from .metrics import (
    METRIC_NAMES,
    DispersionSummary,
    MetricsRecord,
    confusion,
    summarize,
)
from .raster import (
    FORMAT_BPR_FLOAT,
    FORMAT_PGM_MASK,
    FORMAT_PPM,
    BinaryMask,
    FlipTransform,
    FloatRaster,
    RgbImage,
    load_raster,
    quantize,
    store_raster,
)
from .tta import TtaBundle, soft_vote

__all__ = [
    "STEPS",
    "PipelineConfig",
    "ImageResult",
    "ItemFailure",
    "PipelineResult",
    "Report",
    "run_pipeline",
    "build_report",
]

STEPS = ("BU", "H1", "RF", "H2")


@dataclass(frozen=True)
class PipelineConfig:
    """Defaults mirror the tuned settings of the refinement pipeline."""

    threshold: float = 0.4
    loss: LossConfig = field(default_factory=LossConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    out_dir: Path | None = None
    save_steps: tuple[str, ...] = STEPS
    jobs: int = 1

    def __post_init__(self) -> None:
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        bad = set(self.save_steps) - set(STEPS)
        if bad:
            raise ValueError(f"unknown steps {sorted(bad)}; valid: {STEPS}")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass
class ImageResult:
    blade_id: str
    image_id: str
    masks: dict[str, BinaryMask]
    gt: BinaryMask | None


@dataclass(frozen=True)
class ItemFailure:
    blade_id: str
    image_id: str
    stage: str
    message: str


@dataclass
class PipelineResult:
    images: list[ImageResult]
    records: list[MetricsRecord]
    failures: list[ItemFailure]

    @property
    def ok(self) -> bool:
        return not self.failures


@dataclass(frozen=True)
class _StagedItem:
    row: ManifestRow
    rgb: RgbImage
    gt: BinaryMask | None
    bu: BinaryMask
    h1: BinaryMask


def _load_merged_probability(row: ManifestRow) -> FloatRaster:
    if not row.has_flip_variants:
        return load_raster(row.prob_id, FORMAT_BPR_FLOAT)
    entries = (
        (FlipTransform.IDENTITY, load_raster(row.prob_id, FORMAT_BPR_FLOAT)),
        (FlipTransform.FLIP_HORIZONTAL, load_raster(row.prob_fh, FORMAT_BPR_FLOAT)),
        (FlipTransform.FLIP_VERTICAL, load_raster(row.prob_fv, FORMAT_BPR_FLOAT)),
        (FlipTransform.FLIP_BOTH, load_raster(row.prob_fhv, FORMAT_BPR_FLOAT)),
    )
    return soft_vote(TtaBundle(entries))


def _stage_initial(row: ManifestRow, cfg: PipelineConfig) -> _StagedItem:
    rgb = load_raster(row.rgb, FORMAT_PPM)
    merged = _load_merged_probability(row)
    if merged.shape != rgb.shape:
        raise ValueError(
            f"probability map {merged.shape} does not match image {rgb.shape}"
        )
    gt = None
    if row.gt is not None:
        gt = load_raster(row.gt, FORMAT_PGM_MASK)
        if gt.shape != rgb.shape:
            raise ValueError(f"ground truth {gt.shape} does not match image {rgb.shape}")
    bu = quantize(merged, cfg.threshold)
    h1 = blade_hole_fill(bu)
    return _StagedItem(row=row, rgb=rgb, gt=gt, bu=bu, h1=h1)


def _map_items(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _persist(cfg: PipelineConfig, result: ImageResult) -> None:
    if cfg.out_dir is None:
        return
    for step in cfg.save_steps:
        mask = result.masks.get(step)
        if mask is None:
            continue
        step_dir = cfg.out_dir / step
        step_dir.mkdir(parents=True, exist_ok=True)
        path = step_dir / f"{result.blade_id}__{result.image_id}.pgm"
        store_raster(mask, path, FORMAT_PGM_MASK)


def run_pipeline(manifest: Manifest, cfg: PipelineConfig) -> PipelineResult:
    """Run the full refinement chain and collect masks, metrics and failures.

    Groups are processed in manifest order; within a group the first-pass
    stage may run on ``cfg.jobs`` threads, then the forest fit acts as a
    per-group barrier before the forest and second-fill stages. Masks are
    persisted under ``cfg.out_dir/<STEP>/<blade>__<image>.pgm`` for the
    configured steps.
    """
    images: list[ImageResult] = []
    records: list[MetricsRecord] = []
    failures: list[ItemFailure] = []

    for blade_id, rows in manifest.groups().items():
        staged: list[_StagedItem] = []

        def _try_stage(row: ManifestRow) -> _StagedItem | Exception:
            try:
                return _stage_initial(row, cfg)
            except Exception as exc:  # quarantine the item, keep the group
                return exc

        for row, outcome in zip(rows, _map_items(_try_stage, rows, cfg.jobs)):
            if isinstance(outcome, Exception):
                failures.append(
                    ItemFailure(row.blade_id, row.image_id, "initial", str(outcome))
                )
            else:
                staged.append(outcome)
        if not staged:
            continue

        group_cfg = ForestConfig(
            n_trees=cfg.forest.n_trees,
            max_depth=cfg.forest.max_depth,
            features_per_split=cfg.forest.features_per_split,
            sample_cap=cfg.forest.sample_cap,
            seed=cfg.forest.seed,
            vote_threshold=cfg.forest.vote_threshold,
        )
        try:
            model = fit_forest_data(
                blade_id,
                [(item.rgb, item.h1) for item in staged],
                group_cfg,
                workers=cfg.jobs,
            )
        except Exception as exc:
            failures.append(ItemFailure(blade_id, "*", "forest", str(exc)))
            model = None

        def _finish(item: _StagedItem) -> ImageResult:
            masks = {"BU": item.bu, "H1": item.h1}
            if model is not None:
                rf = predict_mask(model, item.rgb)
                masks["RF"] = rf
                masks["H2"] = blade_hole_fill(rf)
            return ImageResult(item.row.blade_id, item.row.image_id, masks, item.gt)

        for result in _map_items(_finish, staged, cfg.jobs):
            _persist(cfg, result)
            images.append(result)
            if result.gt is not None:
                for step in STEPS:
                    mask = result.masks.get(step)
                    if mask is None:
                        continue
                    records.append(
                        MetricsRecord.from_confusion(
                            result.blade_id,
                            result.image_id,
                            step,
                            confusion(mask, result.gt),
                        )
                    )

    return PipelineResult(images=images, records=records, failures=failures)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Report:
    text: str
    csv: str


_TABLE_LABELS = {
    "accuracy": "Accuracy (%)",
    "recall": "Recall (%)",
    "precision": "Precision (%)",
    "f1": "F1-score (%)",
    "miou": "mIoU (%)",
}


def build_report(records: Iterable[MetricsRecord]) -> Report:
    """Per-step mean table plus dispersion rows, as aligned text and CSV.

    Means are over defined values only; a metric with no defined value for a
    step shows as NA. The CSV is long format:
    ``step,metric,mean,count,excluded,min,q1,median,q3,max``.
    """
    records = list(records)
    if not records:
        raise ValueError("no metrics records to report")
    steps = [s for s in STEPS if any(r.step == s for r in records)]

    summaries: dict[tuple[str, str], DispersionSummary | None] = {}
    for step in steps:
        for name in METRIC_NAMES:
            try:
                summaries[(step, name)] = summarize(records, step, [name])[0]
            except ValueError:
                summaries[(step, name)] = None

    width = 14
    lines = ["Per-step mean metrics (defined values only):", ""]
    header = "Metric".ljust(width) + "".join(s.rjust(9) for s in steps)
    lines.append(header)
    for name in METRIC_NAMES:
        cells = []
        for step in steps:
            s = summaries[(step, name)]
            cells.append("NA".rjust(9) if s is None else f"{100.0 * s.mean:9.2f}")
        lines.append(_TABLE_LABELS[name].ljust(width) + "".join(cells))
    lines.append("")
    lines.append("Dispersion per (step, metric):")
    lines.append(
        "step metric     count excl      min       q1   median       q3      max"
    )
    for step in steps:
        for name in METRIC_NAMES:
            s = summaries[(step, name)]
            if s is None:
                continue
            lines.append(
                f"{step:<4} {name:<10} {s.count:5d} {s.excluded:4d} "
                f"{s.minimum:8.4f} {s.q1:8.4f} {s.median:8.4f} {s.q3:8.4f} "
                f"{s.maximum:8.4f}"
            )
    text = "\n".join(lines) + "\n"

    csv_lines = ["step,metric,mean,count,excluded,min,q1,median,q3,max"]
    for step in steps:
        for name in METRIC_NAMES:
            s = summaries[(step, name)]
            if s is None:
                csv_lines.append(f"{step},{name},NA,0,NA,NA,NA,NA,NA,NA")
            else:
                csv_lines.append(
                    f"{step},{name},{s.mean!r},{s.count},{s.excluded},"
                    f"{s.minimum!r},{s.q1!r},{s.median!r},{s.q3!r},{s.maximum!r}"
                )
    return Report(text=text, csv="\n".join(csv_lines) + "\n")
