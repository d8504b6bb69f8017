"""Detection evaluation: IoU, greedy matching, average precision, summaries.

Matching follows the usual greedy convention: detections are visited in
descending confidence order and each one claims the highest-IoU unmatched
ground-truth box of its own class, provided the IoU clears the threshold.
AP uses all-point interpolation (monotone precision envelope). Classes with
no ground truth are excluded from the means rather than scored zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

IOU_THRESHOLDS = tuple(0.50 + 0.05 * i for i in range(10))  # 0.50 .. 0.95
REPORT_CONF = 0.25  # operating point for the single precision/recall figures

Box = tuple  # (x1, y1, x2, y2) in pixels


def _check_box(box) -> tuple:
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"degenerate box {box!r}: need x2 > x1 and y2 > y1")
    return x1, y1, x2, y2


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: Box
    confidence: float

    def __post_init__(self):
        _check_box(self.box)
        if not (0.0 <= self.confidence <= 1.0):
            raise DataError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    box: Box

    def __post_init__(self):
        _check_box(self.box)


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = _check_box(a)
    bx1, by1, bx2, by2 = _check_box(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


@dataclass
class MatchResult:
    """Flags from one image's matching pass.

    tp is indexed like the input detection list; order is the stable
    descending-confidence visit order used by the greedy pass.
    """

    tp: np.ndarray  # bool, per detection (input order)
    order: np.ndarray  # int, detection indices sorted by -confidence (stable)
    gt_matched: np.ndarray  # bool, per ground-truth box


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_threshold: float
) -> MatchResult:
    order = np.argsort([-d.confidence for d in dets], kind="stable")
    tp = np.zeros(len(dets), dtype=bool)
    matched = np.zeros(len(gts), dtype=bool)
    for di in order:
        d = dets[di]
        best_iou = 0.0
        best_gi = -1
        for gi, g in enumerate(gts):
            if matched[gi] or g.class_id != d.class_id:
                continue
            v = iou(d.box, g.box)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_gi = gi
        if best_gi >= 0:
            tp[di] = True
            matched[best_gi] = True
    return MatchResult(tp, order, matched)


def average_precision(tp_flags, confidences, gt_count: int) -> float:
    """Area under the monotone-envelope precision-recall curve.

    tp_flags and confidences are aligned per detection in any order; the
    function sorts stably by descending confidence itself.
    """
    if gt_count < 0:
        raise ValueError(f"gt_count must be >= 0, got {gt_count}")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    confidences = np.asarray(confidences, dtype=np.float64)
    if tp_flags.shape != confidences.shape:
        raise ValueError("tp_flags and confidences must align")
    if gt_count == 0 or tp_flags.size == 0:
        return 0.0
    order = np.argsort(-confidences, kind="stable")
    tp = tp_flags[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / gt_count
    precision = cum_tp / (cum_tp + cum_fp)
    # monotone envelope: precision at recall r is the best achievable at >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


@dataclass
class EvalResult:
    """Per-class AP table plus the headline means.

    ap has shape (class_count, len(IOU_THRESHOLDS)); rows for classes with
    no ground truth hold NaN and are excluded from both means.
    """

    ap: np.ndarray
    gt_counts: np.ndarray  # per class
    map50: float
    map50_95: float
    precision: float
    recall: float
    conf_threshold: float = REPORT_CONF

    @property
    def present(self) -> np.ndarray:
        return self.gt_counts > 0


def evaluate(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence[GroundTruthBox]],
    class_count: int,
) -> EvalResult:
    """Dataset-level evaluation across images, classes, IoU thresholds."""
    if len(dets_per_image) != len(gts_per_image):
        raise DataError(
            f"image count mismatch: {len(dets_per_image)} det lists, "
            f"{len(gts_per_image)} gt lists"
        )
    if class_count < 1:
        raise ValueError(f"class_count must be >= 1, got {class_count}")

    gt_counts = np.zeros(class_count, dtype=np.int64)
    for gts in gts_per_image:
        for g in gts:
            if not (0 <= g.class_id < class_count):
                raise DataError(f"gt class {g.class_id} outside [0, {class_count})")
            gt_counts[g.class_id] += 1

    ap = np.full((class_count, len(IOU_THRESHOLDS)), np.nan)
    for c in range(class_count):
        if gt_counts[c] == 0:
            continue
        for ti, thr in enumerate(IOU_THRESHOLDS):
            confs: list[float] = []
            flags: list[bool] = []
            for dets, gts in zip(dets_per_image, gts_per_image):
                cd = [d for d in dets if d.class_id == c]
                cg = [g for g in gts if g.class_id == c]
                m = match_detections(cd, cg, thr)
                confs.extend(d.confidence for d in cd)
                flags.extend(bool(v) for v in m.tp)
            ap[c, ti] = average_precision(flags, confs, int(gt_counts[c]))

    present = gt_counts > 0
    if present.any():
        map50 = float(np.mean(ap[present, 0]))
        map50_95 = float(np.mean(ap[present, :]))
    else:
        map50 = 0.0
        map50_95 = 0.0

    precision, recall = _pooled_pr(dets_per_image, gts_per_image, REPORT_CONF, 0.50)
    return EvalResult(ap, gt_counts, map50, map50_95, precision, recall)


def _pooled_pr(dets_per_image, gts_per_image, conf_threshold, iou_threshold):
    """Micro-pooled precision/recall over all classes at one operating point."""
    tp = 0
    fp = 0
    total_gt = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        total_gt += len(gts)
        kept = [d for d in dets if d.confidence >= conf_threshold]
        m = match_detections(kept, gts, iou_threshold)
        tp += int(m.tp.sum())
        fp += len(kept) - int(m.tp.sum())
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / total_gt if total_gt > 0 else 0.0
    return float(precision), float(recall)


# ---------------------------------------------------------------------------
# reporting


def write_eval_csv(result: EvalResult, path, class_names: Optional[Sequence[str]] = None) -> None:
    """One row per class per IoU threshold; absent classes keep an empty AP."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class_name", "iou_threshold", "ap", "gt_count"])
        for c in range(result.ap.shape[0]):
            name = class_names[c] if class_names else str(c)
            for ti, thr in enumerate(IOU_THRESHOLDS):
                v = result.ap[c, ti]
                w.writerow(
                    [c, name, f"{thr:.2f}", "" if np.isnan(v) else f"{v:.17g}", int(result.gt_counts[c])]
                )
        w.writerow(["", "all", "0.50", f"{result.map50:.17g}", int(result.gt_counts.sum())])
        w.writerow(["", "all", "0.50:0.95", f"{result.map50_95:.17g}", int(result.gt_counts.sum())])


def format_summary(result: EvalResult, class_names: Optional[Sequence[str]] = None) -> str:
    lines = [
        f"{'class':<12} {'gt':>5} {'ap50':>8} {'ap50-95':>8}",
    ]
    for c in range(result.ap.shape[0]):
        name = class_names[c] if class_names else f"class{c}"
        if result.gt_counts[c] == 0:
            lines.append(f"{name:<12} {0:>5} {'-':>8} {'-':>8}")
        else:
            lines.append(
                f"{name:<12} {int(result.gt_counts[c]):>5} "
                f"{result.ap[c, 0]:>8.4f} {np.mean(result.ap[c]):>8.4f}"
            )
    lines.append(
        f"{'all':<12} {int(result.gt_counts.sum()):>5} "
        f"{result.map50:>8.4f} {result.map50_95:>8.4f}"
    )
    lines.append(
        f"precision {result.precision:.4f}  recall {result.recall:.4f} "
        f"(conf >= {result.conf_threshold:.2f}, iou 0.50)"
    )
    return "\n".join(lines)
