"""Frame-level localization metrics with scenario-aware reporting.

Binarization happens once over the whole evaluation set (one global cut
for the top-percent policy), and every scenario cell then scores its own
subset of frames against that shared prediction. The percentile uses the
lower-value-at-exact-rank convention with a strict > predicate, so the
positive fraction is within one pixel quantum of the requested percent.

AUC is the mean success rate over the 21-point IoU threshold grid
{0.00, 0.05, ..., 1.00}; at tau = 0 every frame counts as a success, so
an all-zero-IoU set scores exactly 100/21.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidInputError, TavloWarning

AUC_TAUS = np.linspace(0.0, 1.0, 21)

SCENARIO_CELLS = ("single", "mixed", "multi_entity")


@dataclass
class EvalRecord:
    """One labeled frame: upsampled heatmap, ground-truth union mask, tags."""

    clip_id: str
    frame_index: int
    heatmap: np.ndarray
    gt_mask: np.ndarray  # same shape as heatmap; all-False means off-screen
    tags: frozenset[str] = frozenset()
    cross_event: bool = False

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap, dtype=np.float64)
        self.gt_mask = np.asarray(self.gt_mask, dtype=bool)
        if self.heatmap.ndim != 2 or self.heatmap.shape != self.gt_mask.shape:
            raise InvalidInputError(
                f"{self.clip_id}[{self.frame_index}]: heatmap {self.heatmap.shape} "
                f"and mask {self.gt_mask.shape} must be matching 2D arrays")
        if not np.isfinite(self.heatmap).all():
            raise InvalidInputError(
                f"{self.clip_id}[{self.frame_index}]: heatmap has non-finite values")
        self.tags = frozenset(self.tags)


@dataclass
class ThresholdPolicy:
    """How heatmaps become binary predictions.

    global_top_percent: one cut at the (100 - percent)th percentile of all
    pixels pooled over the record set, strict > comparison.
    frame_minmax_fixed: per-frame min-max normalization, cut at fixed_cut.
    """

    kind: str = "global_top_percent"
    percent: float = 10.0
    fixed_cut: float = 0.5

    def __post_init__(self):
        if self.kind not in ("global_top_percent", "frame_minmax_fixed"):
            raise InvalidInputError(f"unknown threshold policy kind {self.kind!r}")
        if not 0.0 < self.percent < 100.0:
            raise InvalidInputError(f"percent must be in (0, 100), got {self.percent}")


def rank_percentile(values: np.ndarray, percent_above: float) -> float:
    """Largest pooled value with at least ``percent_above``% strictly above it.

    Implemented as the lower value at the exact rank, no interpolation:
    sorted[ceil(N * (100 - p) / 100) - 1].
    """
    flat = np.sort(np.asarray(values).reshape(-1))
    if flat.size == 0:
        raise DataError("cannot take a percentile of an empty pixel pool")
    k = int(np.ceil(flat.size * (100.0 - percent_above) / 100.0)) - 1
    return float(flat[max(k, 0)])


def binarize(records: list[EvalRecord], policy: ThresholdPolicy) -> list[np.ndarray]:
    """Per-record boolean prediction masks under the given policy."""
    if not records:
        raise DataError("binarize needs at least one record")
    if policy.kind == "global_top_percent":
        cut = rank_percentile(np.concatenate([r.heatmap.reshape(-1) for r in records]),
                              policy.percent)
        return [r.heatmap > cut for r in records]
    masks = []
    for r in records:
        lo, hi = float(r.heatmap.min()), float(r.heatmap.max())
        if hi == lo:
            warnings.warn(
                f"{r.clip_id}[{r.frame_index}]: constant heatmap, prediction empty",
                TavloWarning, stacklevel=2)
            masks.append(np.zeros_like(r.gt_mask))
        else:
            masks.append((r.heatmap - lo) / (hi - lo) > policy.fixed_cut)
    return masks


def frame_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; ground truth must be non-empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not gt.any():
        raise InvalidInputError("IoU is undefined for an empty ground-truth mask")
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    return float(inter / union)


def _ciou_auc_from_ious(ious: np.ndarray) -> tuple[float, float]:
    ciou = 100.0 * float(np.mean(ious >= 0.5))
    auc = 100.0 * float(np.mean([(ious >= tau).mean() for tau in AUC_TAUS]))
    return ciou, auc


def ciou_auc(records: list[EvalRecord], policy: ThresholdPolicy) -> tuple[float, float]:
    """(CIoU%, AUC%) over the records that carry ground truth.

    The binarization pool still spans every record passed in, matching
    the evaluation-set-wide threshold.
    """
    preds = binarize(records, policy)
    ious = [frame_iou(p, r.gt_mask) for p, r in zip(preds, records) if r.gt_mask.any()]
    if not ious:
        raise DataError("no records with a non-empty ground-truth mask")
    return _ciou_auc_from_ious(np.asarray(ious))


def offscreen_tn(records: list[EvalRecord], policy: ThresholdPolicy) -> float:
    """Percent of off-screen-frame pixels below the detection threshold."""
    preds = binarize(records, policy)
    pools = [p for p, r in zip(preds, records) if "off_screen" in r.tags and not r.gt_mask.any()]
    if not pools:
        raise DataError("no off-screen records to score")
    positives = sum(int(p.sum()) for p in pools)
    total = sum(p.size for p in pools)
    return 100.0 * (1.0 - positives / total)


def offscreen_tn_strict(records: list[EvalRecord], percent: float = 5.0) -> float:
    """The dagger variant: pooling restricted to clips that contain
    off-screen frames, with a top-5% cut."""
    clip_ids = {r.clip_id for r in records if "off_screen" in r.tags and not r.gt_mask.any()}
    subset = [r for r in records if r.clip_id in clip_ids]
    if not subset:
        raise DataError("no off-screen records to score")
    policy = ThresholdPolicy(kind="global_top_percent", percent=percent)
    return offscreen_tn(subset, policy)


@dataclass
class MetricsReport:
    """Scenario cells plus totals; absent cells mean no eligible frames."""

    cells: dict[str, dict] = field(default_factory=dict)
    policy: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    n_records: int = 0
    auc_grid: int = 21

    def to_records(self) -> list[dict]:
        """Machine-readable rows: one per (scenario, metric) pair."""
        rows = []
        for cell, metrics in self.cells.items():
            for key, value in metrics.items():
                if key == "count":
                    continue
                rows.append({"scenario": cell, "metric": key,
                             "value": round(float(value), 6),
                             "count": metrics["count"]})
        return rows

    def format_table(self) -> str:
        lines = [
            f"threshold policy: {self.policy.kind} "
            f"(percent={self.policy.percent:g}), AUC grid: {self.auc_grid} points",
            f"{'cell':<14}{'CIoU%':>10}{'AUC%':>10}{'TN%':>10}{'+TN%':>10}{'frames':>9}",
        ]
        order = [*SCENARIO_CELLS, "off_screen", "total", "cross_event", "delta"]
        for name in order:
            metrics = self.cells.get(name)
            if metrics is None:
                continue

            def fmt(key):
                return f"{metrics[key]:>10.2f}" if key in metrics else f"{'-':>10}"

            count = f"{metrics['count']:>9}" if "count" in metrics else f"{'':>9}"
            lines.append(f"{name:<14}{fmt('ciou')}{fmt('auc')}{fmt('tn')}{fmt('tn_strict')}{count}")
        return "\n".join(lines)


def scenario_report(records: list[EvalRecord], policy: ThresholdPolicy | None = None) -> MetricsReport:
    """Score every scenario cell against one shared global binarization."""
    policy = policy or ThresholdPolicy()
    if not records:
        raise DataError("scenario_report needs at least one record")
    preds = binarize(records, policy)
    ious = {}
    for pred, rec in zip(preds, records):
        if rec.gt_mask.any():
            ious[id(rec)] = frame_iou(pred, rec.gt_mask)

    def cell_for(selector) -> dict | None:
        vals = np.asarray([ious[id(r)] for r in records if id(r) in ious and selector(r)])
        if vals.size == 0:
            return None
        ciou, auc = _ciou_auc_from_ious(vals)
        return {"ciou": ciou, "auc": auc, "count": int(vals.size)}

    report = MetricsReport(policy=policy, n_records=len(records), auc_grid=len(AUC_TAUS))
    for tag in SCENARIO_CELLS:
        cell = cell_for(lambda r, tag=tag: tag in r.tags)
        if cell is not None:
            report.cells[tag] = cell

    off_records = [r for r in records if "off_screen" in r.tags and not r.gt_mask.any()]
    if off_records:
        off_preds = [p for p, r in zip(preds, records)
                     if "off_screen" in r.tags and not r.gt_mask.any()]
        positives = sum(int(p.sum()) for p in off_preds)
        total = sum(p.size for p in off_preds)
        report.cells["off_screen"] = {
            "tn": 100.0 * (1.0 - positives / total),
            "tn_strict": offscreen_tn_strict(records),
            "count": len(off_records),
        }

    total_cell = cell_for(lambda r: True)
    if total_cell is not None:
        report.cells["total"] = total_cell
    cross_cell = cell_for(lambda r: r.cross_event)
    if cross_cell is not None:
        report.cells["cross_event"] = cross_cell
        if total_cell is not None:
            report.cells["delta"] = {
                "ciou": cross_cell["ciou"] - total_cell["ciou"],
                "auc": cross_cell["auc"] - total_cell["auc"],
                "count": cross_cell["count"],
            }
    return report
