"""Detection AP over IoU thresholds 0.50:0.05:0.95, COCO-style greedy protocol.

Matching is greedy per image and class: detections are visited by descending
score, each matched to the unmatched ground-truth box of the same class with
the highest IoU at or above the threshold. Detections whose best admissible
match is an ignore annotation count neither as true nor as false positives,
and ignore annotations may absorb any number of detections. Precision is
interpolated at 101 recall points with the running maximum taken from the
right. Classes without any countable ground truth are excluded from every
average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import UnknownClassError
from .geometry import BoundingBox, box_iou
from .pipeline import DetectionRun

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)

TP = "tp"
FP = "fp"
IGNORED = "ignored"


@dataclass(frozen=True)
class GroundTruthAnnotation:
    """One annotated object instance; ignored instances never count as GT."""

    scene_id: int
    image_id: int
    class_id: int
    bbox: BoundingBox
    ignore: bool = False


class GroundTruthSet:
    """Annotations plus the registered class-id universe."""

    def __init__(
        self,
        annotations: Iterable[GroundTruthAnnotation],
        class_ids: Iterable[int] | None = None,
        class_names: Mapping[int, str] | None = None,
    ) -> None:
        self.annotations = tuple(annotations)
        if class_ids is None:
            registered = {a.class_id for a in self.annotations}
        else:
            registered = {int(c) for c in class_ids}
            missing = {a.class_id for a in self.annotations} - registered
            if missing:
                raise UnknownClassError(f"annotations reference unregistered classes {sorted(missing)}")
        self.class_ids: tuple[int, ...] = tuple(sorted(registered))
        self.class_names: dict[int, str] = dict(class_names or {})


@dataclass(frozen=True)
class DetectionRecord:
    """Minimal detection view used by the evaluator."""

    scene_id: int
    image_id: int
    class_id: int
    bbox: BoundingBox
    score: float


def records_from_runs(runs: Iterable[DetectionRun]) -> list[DetectionRecord]:
    return [
        DetectionRecord(
            scene_id=run.scene_id,
            image_id=run.image_id,
            class_id=det.class_id,
            bbox=det.bbox,
            score=det.score,
        )
        for run in runs
        for det in run.detections
    ]


def match_detections(
    dets: Sequence[tuple[BoundingBox, float]],
    gts: Sequence[tuple[BoundingBox, bool]],
    iou_threshold: float,
) -> list[str]:
    """Label each detection of one (image, class) cell as tp/fp/ignored.

    ``dets`` must already be sorted by descending score (ties in input
    order); ``gts`` pair each box with its ignore flag. A detection prefers
    the highest-IoU unmatched countable ground truth; ignore entries are
    considered only when no countable match exists and may match repeatedly.
    """
    order = sorted(range(len(gts)), key=lambda j: gts[j][1])  # countable first, stable
    taken = [False] * len(gts)
    labels: list[str] = []
    for det_box, _ in dets:
        best_j = -1
        best_iou = 0.0
        for j in order:
            gt_box, gt_ignore = gts[j]
            if taken[j] and not gt_ignore:
                continue
            if best_j >= 0 and not gts[best_j][1] and gt_ignore:
                break  # countable match in hand; ignore entries cannot improve it
            iou = box_iou(det_box, gt_box)
            if iou < iou_threshold:
                continue
            if best_j >= 0 and iou <= best_iou:
                continue  # strictly better IoU required to displace the current match
            best_j = j
            best_iou = iou
        if best_j < 0:
            labels.append(FP)
        elif gts[best_j][1]:
            labels.append(IGNORED)
        else:
            taken[best_j] = True
            labels.append(TP)
    return labels


def average_precision(labels: Sequence[str], n_gt: int) -> float:
    """Area under the PR curve via 101-point interpolation.

    ``labels`` follow descending-score order; ignored entries are dropped.
    With zero ground truth the result is 0.0 (callers exclude such classes
    from averages).
    """
    if n_gt < 0:
        raise ValueError(f"n_gt must be non-negative, got {n_gt}")
    counted = [label for label in labels if label != IGNORED]
    if n_gt == 0 or not counted:
        return 0.0
    flags = np.array([label == TP for label in counted], dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    positions = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(positions < recall.size, precision[np.minimum(positions, recall.size - 1)], 0.0)
    return float(sampled.mean())


@dataclass(frozen=True)
class ApReport:
    """AP per class (averaged over thresholds), per threshold, and overall."""

    per_class_ap: dict[int, float]
    per_threshold_ap: dict[float, float]
    mean_ap: float

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(c): v for c, v in sorted(self.per_class_ap.items())},
            "per_threshold_ap": {f"{t:.2f}": v for t, v in sorted(self.per_threshold_ap.items())},
            "mean_ap": self.mean_ap,
        }


def evaluate(
    detections: Sequence[DetectionRecord],
    gts: GroundTruthSet,
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> ApReport:
    """AP per class per threshold, averaged over classes with ground truth."""
    registered = set(gts.class_ids)
    for det in detections:
        if det.class_id not in registered:
            raise UnknownClassError(f"detection class {det.class_id} has no registration")

    gt_by_cell: dict[tuple[int, int, int], list[tuple[BoundingBox, bool]]] = {}
    countable: dict[int, int] = {}
    for ann in gts.annotations:
        cell = (ann.class_id, ann.scene_id, ann.image_id)
        gt_by_cell.setdefault(cell, []).append((ann.bbox, ann.ignore))
        if not ann.ignore:
            countable[ann.class_id] = countable.get(ann.class_id, 0) + 1

    eval_classes = sorted(c for c in registered if countable.get(c, 0) > 0)
    ap: dict[int, dict[float, float]] = {}
    for class_id in eval_classes:
        dets = [
            (order, det)
            for order, det in enumerate(detections)
            if det.class_id == class_id
        ]
        dets.sort(key=lambda pair: (-pair[1].score, pair[0]))
        slots_by_image: dict[tuple[int, int], list[int]] = {}
        for k, (_, det) in enumerate(dets):
            slots_by_image.setdefault((det.scene_id, det.image_id), []).append(k)
        ap[class_id] = {}
        for threshold in thresholds:
            pooled = [""] * len(dets)
            for (scene_id, image_id), slots in slots_by_image.items():
                cell_gts = gt_by_cell.get((class_id, scene_id, image_id), [])
                cell_labels = match_detections(
                    [(dets[k][1].bbox, dets[k][1].score) for k in slots],
                    cell_gts,
                    threshold,
                )
                for k, label in zip(slots, cell_labels):
                    pooled[k] = label
            ap[class_id][threshold] = average_precision(pooled, countable[class_id])

    per_class_ap = {
        c: float(np.mean([ap[c][t] for t in thresholds])) if thresholds else 0.0
        for c in eval_classes
    }
    per_threshold_ap = {
        t: float(np.mean([ap[c][t] for c in eval_classes])) if eval_classes else 0.0
        for t in thresholds
    }
    mean_ap = float(np.mean(list(per_threshold_ap.values()))) if per_threshold_ap else 0.0
    return ApReport(per_class_ap=per_class_ap, per_threshold_ap=per_threshold_ap, mean_ap=mean_ap)


def evaluate_runs(
    runs: Iterable[DetectionRun],
    gts: GroundTruthSet,
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> ApReport:
    return evaluate(records_from_runs(runs), gts, thresholds)
