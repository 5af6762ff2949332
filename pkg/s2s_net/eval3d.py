"""
3D detection evaluation.

Boxes are matched greedily by descending confidence at a per-class IoU threshold, and average precision
is the mean interpolated precision over 40 recall points (1/40, 2/40, ..., 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import rapidjson
from logbook import Logger
from pydantic import ValidationError
from shapely.geometry import Polygon

from .base import IOU_THRESHOLDS, N_RECALL_POINTS, ObjectClass
from .errors import ConfigurationError, RecordParseError
from .grid import PointCloud, SparseVoxelGrid
from .records import BoxRecord, ClassAPRecord, FrameRecord


logger = Logger(__name__)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(yaw, 2 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    label: ObjectClass = ObjectClass.CAR
    # Only set on detections
    confidence: float | None = None

    def __post_init__(self):
        if any(not s > 0 for s in self.size):
            raise ConfigurationError(f'Box size must be positive, got {self.size}')
        if self.confidence is not None and not 0 <= self.confidence <= 1:
            raise ConfigurationError(f'Confidence must lie in [0, 1], got {self.confidence}')
        object.__setattr__(self, 'yaw', normalize_yaw(self.yaw))
        object.__setattr__(self, 'label', ObjectClass(self.label))

    @property
    def volume(self) -> float:
        length, width, height = self.size
        return length * width * height

    def footprint(self) -> np.ndarray:
        """BEV corners, counter-clockwise."""
        length, width, _h = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]]) * [length / 2, width / 2]
        rotation = np.array([[c, -s], [s, c]])
        return local @ rotation.T + np.array(self.center[:2])

    def z_interval(self) -> tuple[float, float]:
        half = self.size[2] / 2
        return (self.center[2] - half, self.center[2] + half)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Mask of the points lying inside the box, boundary included."""
        if not len(points):
            return np.zeros(0, dtype=bool)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = np.asarray(points, dtype=np.float64) - np.array(self.center)
        local_x = d[:, 0] * c + d[:, 1] * s
        local_y = -d[:, 0] * s + d[:, 1] * c
        half = np.array(self.size) / 2
        return (np.abs(local_x) <= half[0]) & (np.abs(local_y) <= half[1]) & (np.abs(d[:, 2]) <= half[2])

    @classmethod
    def from_record(cls, record: BoxRecord) -> Box3D:
        return cls(record.center, record.size, record.yaw, record.label, record.confidence)

    def to_record(self) -> BoxRecord:
        return BoxRecord(center=self.center, size=self.size, yaw=self.yaw, label=self.label,
                         confidence=self.confidence)


@dataclass(frozen=True)
class EvalRange:
    x: tuple[float, float] = (-140.0, 140.0)
    y: tuple[float, float] = (-40.0, 40.0)
    z: tuple[float, float] = (-4.0, 1.0)

    def __post_init__(self):
        for name in ('x', 'y', 'z'):
            low, high = getattr(self, name)
            if not low < high:
                raise ConfigurationError(f'Evaluation range on {name} must have min < max, got {(low, high)}')

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Closed-interval membership of each point."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        low = np.array([self.x[0], self.y[0], self.z[0]])
        high = np.array([self.x[1], self.y[1], self.z[1]])
        return np.all((p >= low) & (p <= high), axis=1)


def iou3d(a: Box3D, b: Box3D) -> float:
    a_low, a_high = a.z_interval()
    b_low, b_high = b.z_interval()
    height = min(a_high, b_high) - max(a_low, b_low)
    if height <= 0:
        return 0.0
    pa, pb = Polygon(a.footprint()), Polygon(b.footprint())
    if not (pa.is_valid and pb.is_valid) or pa.area <= 0 or pb.area <= 0:
        return 0.0
    overlap = pa.intersection(pb).area * height
    union = a.volume + b.volume - overlap
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, overlap / union)))


def filter_range(boxes: Iterable[Box3D], eval_range: EvalRange = EvalRange()) -> list[Box3D]:
    boxes = list(boxes)
    if not boxes:
        return []
    keep = eval_range.contains(np.array([b.center for b in boxes]))
    return [b for b, k in zip(boxes, keep) if k]


def filter_boxes_training(gts: Iterable[Box3D], ego_cloud: PointCloud, shared: SparseVoxelGrid) -> list[Box3D]:
    """Keep ground truths holding at least one ego point or one shared voxel center."""
    centers = shared.centers()
    kept = []
    for box in gts:
        if box.contains(ego_cloud.points).any() or box.contains(centers).any():
            kept.append(box)
    logger.debug('Training filter kept {} boxes', len(kept))
    return kept


class MatchResult(NamedTuple):
    # Aligned with the detections sorted by descending confidence
    scores: np.ndarray
    tp: np.ndarray
    gt_matched: np.ndarray
    order: np.ndarray


def match_detections(dets: Sequence[Box3D], gts: Sequence[Box3D], iou_threshold: float) -> MatchResult:
    """
    Greedy matching in descending confidence.

    Each detection takes the unmatched ground truth with the highest IoU at or above the threshold,
    ties going to the lowest ground-truth index.
    """
    scores = np.array([d.confidence if d.confidence is not None else 0.0 for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind='stable')
    tp = np.zeros(len(dets), dtype=bool)
    gt_matched = np.zeros(len(gts), dtype=bool)
    for rank, i in enumerate(order):
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gts):
            if gt_matched[j]:
                continue
            value = iou3d(dets[i], gt)
            if value > best_iou or (value == best_iou and best < 0):
                best, best_iou = j, value
        if best >= 0:
            tp[rank] = True
            gt_matched[best] = True
    return MatchResult(scores[order], tp, gt_matched, order)


def interpolated_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int, n_points: int = N_RECALL_POINTS) -> float:
    """Area under the interpolated precision-recall curve sampled at ``n_points`` recall levels."""
    if n_gt == 0:
        return float('nan')
    if not len(scores):
        return 0.0
    order = np.argsort(-scores, kind='stable')
    hits = tp[order].astype(np.float64)
    tp_cum = np.cumsum(hits)
    precision = tp_cum / np.arange(1, len(hits) + 1)
    recall = tp_cum / n_gt
    # Best precision reachable at this recall or beyond
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in np.arange(1, n_points + 1) / n_points:
        reached = np.nonzero(recall >= r - 1e-12)[0]
        if len(reached):
            total += envelope[reached[0]]
    return float(total / n_points)


def average_precision(
    dets: Sequence[Box3D], gts: Sequence[Box3D], label: ObjectClass, iou_threshold: float | None = None
) -> float:
    """AP of one class in one frame; NaN when the class has no ground truth."""
    threshold = IOU_THRESHOLDS[label] if iou_threshold is None else iou_threshold
    dets = [d for d in dets if d.label == label]
    gts = [g for g in gts if g.label == label]
    match = match_detections(dets, gts, threshold)
    return interpolated_ap(match.scores, match.tp, len(gts))


@dataclass
class ClassAccumulator:
    """Matched detections of one class, gathered over many frames."""

    label: ObjectClass
    iou_threshold: float
    scores: list[np.ndarray]
    tps: list[np.ndarray]
    n_gt: int = 0

    def add_frame(self, dets: Sequence[Box3D], gts: Sequence[Box3D]):
        dets = [d for d in dets if d.label == self.label]
        gts = [g for g in gts if g.label == self.label]
        match = match_detections(dets, gts, self.iou_threshold)
        self.scores.append(match.scores)
        self.tps.append(match.tp)
        self.n_gt += len(gts)

    def result(self) -> ClassAPRecord:
        scores = np.concatenate(self.scores) if self.scores else np.empty(0)
        tps = np.concatenate(self.tps) if self.tps else np.empty(0, dtype=bool)
        ap = interpolated_ap(scores, tps, self.n_gt)
        defined = self.n_gt > 0
        return ClassAPRecord(label=self.label, iou_threshold=self.iou_threshold, ap=ap if defined else None,
                             defined=defined, n_gt=self.n_gt, n_det=len(scores))


def evaluate(
    frames: Iterable[tuple[Sequence[Box3D], Sequence[Box3D]]],
    labels: Sequence[ObjectClass] = tuple(ObjectClass),
    eval_range: EvalRange | None = EvalRange(),
    thresholds: dict[ObjectClass, float] | None = None,
) -> list[ClassAPRecord]:
    """
    Per-class AP over (detections, ground truths) frame pairs.

    Boxes outside the evaluation range are dropped from both sides. No other ground truth is removed,
    even when it holds no point at all.
    """
    thresholds = {**IOU_THRESHOLDS, **(thresholds or {})}
    accumulators = [ClassAccumulator(label, thresholds[label], [], []) for label in labels]
    n_frames = 0
    for dets, gts in frames:
        if eval_range is not None:
            dets, gts = filter_range(dets, eval_range), filter_range(gts, eval_range)
        for acc in accumulators:
            acc.add_frame(dets, gts)
        n_frames += 1
    logger.info('Evaluated {} frames', n_frames)
    return [acc.result() for acc in accumulators]


# JSON-lines dumps


def load_frames(path: Path) -> dict[str, list[Box3D]]:
    frames: dict[str, list[Box3D]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = FrameRecord.model_validate(rapidjson.loads(line))
            except rapidjson.JSONDecodeError as e:
                raise RecordParseError(f'{path}: invalid JSON: {e}', lineno) from None
            except ValidationError as e:
                first = e.errors()[0]
                where = '.'.join(str(p) for p in first['loc'])
                raise RecordParseError(f'{path}: {where}: {first["msg"]}', lineno) from None
            frames[str(record.frame_id)] = [Box3D.from_record(b) for b in record.boxes]
    return frames


def dump_frames(frames: dict[str, list[Box3D]], path: Path):
    with open(path, 'w') as f:
        for frame_id, boxes in frames.items():
            record = FrameRecord(frame_id=frame_id, boxes=[b.to_record() for b in boxes])
            f.write(rapidjson.dumps(record.model_dump(mode='json', exclude_none=True)))
            f.write('\n')


def evaluate_files(det_path: Path, gt_path: Path, eval_range: EvalRange | None = EvalRange()) -> list[ClassAPRecord]:
    dets = load_frames(det_path)
    gts = load_frames(gt_path)
    unknown = set(dets) - set(gts)
    if unknown:
        logger.warning('Detections for frames without ground truth are ignored: {}', sorted(unknown))
    pairs = ((dets.get(frame_id, []), boxes) for frame_id, boxes in gts.items())
    return evaluate(pairs, eval_range=eval_range)
