import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from rose.errors import StructuralError

logger = logging.getLogger(__name__)

CORE = 'core'
DELTA = 'delta'
KINDS = (CORE, DELTA)

FALSE_ALARM_DEFINITION = 'false_alarm_rate = unmatched detections / total detections x 100 (0 when nothing is detected)'


@dataclass(frozen=True)
class SingularPoint:
    x: int
    y: int
    kind: str
    score: float

    def to_dict(self) -> dict:
        return {'x': int(self.x), 'y': int(self.y), 'kind': self.kind, 'score': float(self.score)}


def _disk(radius: float) -> np.ndarray:
    reach = int(np.floor(radius))
    dy, dx = np.mgrid[-reach:reach + 1, -reach:reach + 1]
    return (dy * dy + dx * dx) <= radius * radius


def nms(heatmap: np.ndarray, radius: float = 20.0, min_value: float = 0.2, kind: str = CORE) -> List[SingularPoint]:
    """
    Greedy non-maximum suppression.

    Repeatedly take the highest remaining pixel with value >= min_value, emit it and
    suppress every pixel within Euclidean distance <= radius. Equal scores are taken
    in row-major order.

    Args:
        heatmap (np.ndarray): (H, W) probability map
        radius (float): Suppression radius in pixels
        min_value (float): Lowest value a peak may have
        kind (str): 'core' or 'delta', copied onto every emitted point

    Returns:
        List[SingularPoint]: Peaks sorted by descending score
    """
    values = np.asarray(heatmap)
    if values.ndim == 3 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 2:
        raise StructuralError(f"nms needs an (H, W) map, got shape {values.shape}")
    if radius < 0:
        raise StructuralError(f"radius must be non-negative, got {radius}")

    height, width = values.shape
    flat = values.ravel()
    candidates = np.flatnonzero(flat >= min_value)
    order = candidates[np.lexsort((candidates, -flat[candidates]))]

    disk = _disk(radius)
    reach = disk.shape[0] // 2
    suppressed = np.zeros((height, width), dtype=bool)
    points = []
    for index in order:
        y, x = divmod(int(index), width)
        if suppressed[y, x]:
            continue
        points.append(SingularPoint(x, y, kind, float(flat[index])))
        top, bottom = max(0, y - reach), min(height, y + reach + 1)
        left, right = max(0, x - reach), min(width, x + reach + 1)
        suppressed[top:bottom, left:right] |= disk[top - y + reach:bottom - y + reach,
                                                   left - x + reach:right - x + reach]
    return points


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_detections: List[int] = field(default_factory=list)
    unmatched_ground_truth: List[int] = field(default_factory=list)


def _xy(point) -> Tuple[float, float]:
    if isinstance(point, SingularPoint):
        return float(point.x), float(point.y)
    x, y = point
    return float(x), float(y)


def match_points(detections: Sequence[Union[SingularPoint, Tuple[float, float]]],
                 ground_truth: Sequence[Tuple[float, float]],
                 match_radius: float = 20.0) -> MatchResult:
    """
    Greedy one-to-one matching by increasing distance; pairs farther apart than
    match_radius never match.

    Returns:
        MatchResult: (detection index, ground-truth index, distance) pairs plus the
        indices left unmatched on each side
    """
    result = MatchResult()
    if detections and ground_truth:
        det = np.array([_xy(p) for p in detections])
        gt = np.array([_xy(p) for p in ground_truth])
        distances = np.hypot(det[:, None, 0] - gt[None, :, 0], det[:, None, 1] - gt[None, :, 1])
        di, gi = np.nonzero(distances <= match_radius)
        order = np.lexsort((gi, di, distances[di, gi]))
        used_det, used_gt = set(), set()
        for k in order:
            d, g = int(di[k]), int(gi[k])
            if d in used_det or g in used_gt:
                continue
            used_det.add(d)
            used_gt.add(g)
            result.pairs.append((d, g, float(distances[d, g])))
    matched_det = {d for d, _, _ in result.pairs}
    matched_gt = {g for _, g, _ in result.pairs}
    result.unmatched_detections = [i for i in range(len(detections)) if i not in matched_det]
    result.unmatched_ground_truth = [i for i in range(len(ground_truth)) if i not in matched_gt]
    return result


@dataclass
class EvalReport:
    detection_rate: Dict[str, float]
    false_alarm_rate: Dict[str, float]
    avg_time_ms: float
    counts: Dict[str, Dict[str, int]]

    def to_dict(self) -> dict:
        return {
            'detection_rate': dict(self.detection_rate),
            'false_alarm_rate': dict(self.false_alarm_rate),
            'avg_time_ms': self.avg_time_ms,
            'counts': {kind: dict(c) for kind, c in self.counts.items()},
        }

    def to_frame(self) -> pd.DataFrame:
        """Summary table: one row per kind, rates in percent."""
        return pd.DataFrame(
            {
                'Detection rate (%)': [self.detection_rate[k] for k in KINDS],
                'False alarm rate (%)': [self.false_alarm_rate[k] for k in KINDS],
                'GT': [self.counts[k]['gt'] for k in KINDS],
                'Detected': [self.counts[k]['detected'] for k in KINDS],
                'Matched': [self.counts[k]['matched'] for k in KINDS],
            },
            index=pd.Index(KINDS, name='kind'),
        )


def evaluate(outputs: Sequence, annotations: Sequence, match_radius: float = 20.0) -> EvalReport:
    """
    Detection rate, false alarm rate and average time over a set of images.

    Args:
        outputs: Per-image detections (objects with `points` and `time_ms`)
        annotations: Per-image ground truth (objects with `cores` and `deltas`),
            aligned with outputs
        match_radius (float): Matching distance in pixels

    Returns:
        EvalReport: Aggregated indicators
    """
    if len(outputs) != len(annotations):
        raise StructuralError(f"{len(outputs)} outputs but {len(annotations)} annotations")

    counts = {kind: {'gt': 0, 'detected': 0, 'matched': 0, 'false_alarms': 0} for kind in KINDS}
    for output, record in zip(outputs, annotations):
        for kind in KINDS:
            detections = [p for p in output.points if p.kind == kind]
            truth = record.cores if kind == CORE else record.deltas
            matching = match_points(detections, truth, match_radius)
            counts[kind]['gt'] += len(truth)
            counts[kind]['detected'] += len(detections)
            counts[kind]['matched'] += len(matching.pairs)
            counts[kind]['false_alarms'] += len(matching.unmatched_detections)

    detection_rate = {}
    false_alarm_rate = {}
    for kind, c in counts.items():
        detection_rate[kind] = 100.0 * c['matched'] / c['gt'] if c['gt'] else 0.0
        false_alarm_rate[kind] = 100.0 * c['false_alarms'] / c['detected'] if c['detected'] else 0.0
    avg_time_ms = float(np.mean([o.time_ms for o in outputs])) if len(outputs) else 0.0

    report = EvalReport(detection_rate, false_alarm_rate, avg_time_ms, counts)
    logger.info(f"Evaluated {len(outputs)} images: detection {detection_rate}, false alarms {false_alarm_rate}")
    return report
