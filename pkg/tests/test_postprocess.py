import math
from types import SimpleNamespace

import numpy as np
import pytest

from rose.errors import StructuralError
from rose.models import detector as detector_module
from rose.models.detector import DetectionOutput, Detector
from rose.models.network import NetworkWeights, init_weights
from rose.models.postprocess import (
    FALSE_ALARM_DEFINITION, SingularPoint, evaluate, match_points, nms,
)
from rose.utils.data_loader import AnnotationRecord


def brute_force_nms(heatmap, radius, min_value):
    height, width = heatmap.shape
    candidates = sorted(
        ((float(heatmap[y, x]), y * width + x) for y in range(height) for x in range(width)
         if heatmap[y, x] >= min_value),
        key=lambda item: (-item[0], item[1]),
    )
    kept = []
    for _, index in candidates:
        y, x = divmod(index, width)
        if all(math.hypot(x - kx, y - ky) > radius for kx, ky in kept):
            kept.append((x, y))
    return kept


class TestNms:
    def test_single_peak(self):
        heatmap = np.zeros((64, 64))
        heatmap[30, 20] = 0.9
        points = nms(heatmap)
        assert points == [SingularPoint(20, 30, 'core', 0.9)]

    def test_two_peaks_apart(self):
        heatmap = np.zeros((64, 64))
        heatmap[10, 10] = 0.8
        heatmap[40, 40] = 0.7
        points = nms(heatmap)
        assert [(p.x, p.y) for p in points] == [(10, 10), (40, 40)]

    def test_nearby_peak_suppressed(self):
        heatmap = np.zeros((64, 64))
        heatmap[10, 10] = 0.8
        heatmap[10, 25] = 0.7
        assert [(p.x, p.y) for p in nms(heatmap)] == [(10, 10)]

    def test_suppression_boundary_is_inclusive(self):
        heatmap = np.zeros((64, 64))
        heatmap[10, 10] = 0.8
        heatmap[10, 30] = 0.7
        heatmap[10, 51] = 0.6
        assert [(p.x, p.y) for p in nms(heatmap)] == [(10, 10), (51, 10)]

    def test_below_threshold_is_ignored(self):
        heatmap = np.full((32, 32), 0.19)
        assert nms(heatmap) == []

    def test_ties_resolve_row_major(self):
        heatmap = np.zeros((64, 64))
        heatmap[40, 5] = 0.5
        heatmap[10, 50] = 0.5
        heatmap[10, 45] = 0.5
        points = nms(heatmap)
        assert [(p.x, p.y) for p in points] == [(45, 10), (5, 40)]

    def test_kind_and_score(self):
        heatmap = np.zeros((16, 16), dtype=np.float32)
        heatmap[3, 4] = 0.75
        (point,) = nms(heatmap, kind='delta')
        assert point.to_dict() == {'x': 4, 'y': 3, 'kind': 'delta', 'score': 0.75}

    def test_rejects_bad_input(self):
        with pytest.raises(StructuralError):
            nms(np.zeros((2, 4, 4)))
        with pytest.raises(StructuralError):
            nms(np.zeros((4, 4)), radius=-1)

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            heatmap = rng.random((64, 64)) ** 3
            points = nms(heatmap, radius=20.0, min_value=0.2)
            assert [(p.x, p.y) for p in points] == brute_force_nms(heatmap, 20.0, 0.2)

    def test_output_is_spread_out_and_above_threshold(self, rng):
        heatmap = rng.random((64, 64))
        points = nms(heatmap, radius=12.0, min_value=0.5)
        assert all(p.score >= 0.5 for p in points)
        for i, a in enumerate(points):
            for b in points[i + 1:]:
                assert math.hypot(a.x - b.x, a.y - b.y) > 12.0

    def test_invariant_under_monotone_rescaling(self, rng):
        heatmap = rng.random((64, 64))
        # strictly increasing and keeps 0.2 fixed
        rescaled = np.where(heatmap >= 0.2, 0.2 + 0.5 * (heatmap - 0.2), 0.9 * heatmap)
        original = [(p.x, p.y) for p in nms(heatmap)]
        assert [(p.x, p.y) for p in nms(rescaled)] == original


class TestMatchPoints:
    def test_close_pair_matches(self):
        result = match_points([(10, 10)], [(13, 14)])
        assert result.pairs == [(0, 0, 5.0)]
        assert result.unmatched_detections == []
        assert result.unmatched_ground_truth == []

    def test_beyond_radius_never_matches(self):
        result = match_points([(0, 0)], [(21, 0)])
        assert result.pairs == []
        assert result.unmatched_detections == [0]
        assert result.unmatched_ground_truth == [0]

    def test_one_to_one_by_increasing_distance(self):
        detections = [SingularPoint(10, 10, 'core', 0.9), SingularPoint(14, 10, 'core', 0.8)]
        result = match_points(detections, [(15, 10)])
        assert result.pairs == [(1, 0, 1.0)]
        assert result.unmatched_detections == [0]

    def test_empty_sides(self):
        assert match_points([], [(1, 1)]).unmatched_ground_truth == [0]
        assert match_points([(1, 1)], []).unmatched_detections == [0]


def output(points, time_ms=5.0):
    return DetectionOutput('img', [SingularPoint(x, y, kind, 0.9) for x, y, kind in points], time_ms)


class TestEvaluate:
    def test_perfect_detection(self):
        records = [AnnotationRecord('a', cores=((10, 10),), deltas=((50, 60),))]
        report = evaluate([output([(10, 10, 'core'), (50, 60, 'delta')])], records)
        assert report.detection_rate == {'core': 100.0, 'delta': 100.0}
        assert report.false_alarm_rate == {'core': 0.0, 'delta': 0.0}

    def test_nothing_detected(self):
        records = [AnnotationRecord('a', cores=((10, 10),), deltas=((50, 60),))]
        report = evaluate([output([])], records)
        assert report.detection_rate == {'core': 0.0, 'delta': 0.0}
        assert report.false_alarm_rate == {'core': 0.0, 'delta': 0.0}

    def test_partial_detection_with_false_alarms(self):
        truth = tuple((100 * i, 0) for i in range(10))
        hits = [(100 * i, 0, 'core') for i in range(9)]
        misses = [(50, 200, 'core'), (150, 200, 'core'), (250, 200, 'core')]
        report = evaluate([output(hits + misses)], [AnnotationRecord('a', cores=truth)])
        assert report.detection_rate['core'] == pytest.approx(90.0)
        assert report.false_alarm_rate['core'] == pytest.approx(25.0)
        assert report.counts['core'] == {'gt': 10, 'detected': 12, 'matched': 9, 'false_alarms': 3}

    def test_kinds_are_matched_separately(self):
        records = [AnnotationRecord('a', cores=((10, 10),))]
        report = evaluate([output([(10, 10, 'delta')])], records)
        assert report.detection_rate['core'] == 0.0
        assert report.false_alarm_rate['delta'] == 100.0

    def test_independent_of_image_order(self):
        records = [AnnotationRecord('a', cores=((10, 10),)), AnnotationRecord('b', deltas=((5, 5),))]
        outputs = [output([(12, 10, 'core')], 4.0), output([(90, 90, 'delta')], 6.0)]
        forward_order = evaluate(outputs, records)
        reverse_order = evaluate(outputs[::-1], records[::-1])
        assert forward_order.to_dict() == reverse_order.to_dict()
        assert forward_order.avg_time_ms == pytest.approx(5.0)

    def test_misaligned_inputs(self):
        with pytest.raises(StructuralError):
            evaluate([], [AnnotationRecord('a')])

    def test_report_serialisation(self):
        report = evaluate([output([(10, 10, 'core')])], [AnnotationRecord('a', cores=((10, 10),))])
        assert set(report.to_dict()) == {'detection_rate', 'false_alarm_rate', 'avg_time_ms', 'counts'}
        frame = report.to_frame()
        assert list(frame.index) == ['core', 'delta']
        assert frame.loc['core', 'Detection rate (%)'] == 100.0
        assert 'unmatched detections' in FALSE_ALARM_DEFINITION


def saturated_weights(config, bias):
    tensors = {}
    for name, tensor in init_weights(config, seed=0).items():
        if 'attention' in name:
            tensor = np.full_like(tensor, bias) if name.endswith('.bias') else np.zeros_like(tensor)
        tensors[name] = tensor
    return NetworkWeights(tensors, config)


class TestDetector:
    def test_low_confidence_maps_yield_nothing(self, small_config, rng):
        detector = Detector(saturated_weights(small_config, 0.0))
        result = detector.detect(rng.random((32, 32)), name='flat')
        assert result.image == 'flat'
        assert result.points == []
        assert result.time_ms > 0

    def test_drops_detections_in_padding(self, small_config, rng):
        # every fused pixel has the same value, so NMS lands peaks across the whole frame
        detector = Detector(saturated_weights(small_config, 40.0), nms_radius=10.0)
        result = detector.detect(rng.random((40, 40)))
        assert result.points
        assert result.points[0].x == 0 and result.points[0].y == 0
        assert all(p.x < 40 and p.y < 40 for p in result.points)

    def test_padding_peak_does_not_suppress_frame_peak(self, small_config, monkeypatch):
        p_core = np.zeros((112, 112), np.float32)
        p_core[50, 95] = 0.8
        p_core[50, 105] = 0.9
        fake = SimpleNamespace(p_core=p_core, p_delta=np.zeros_like(p_core))
        monkeypatch.setattr(detector_module, 'forward', lambda image, weights: fake)

        result = Detector(init_weights(small_config)).detect(np.zeros((100, 100), np.float32))
        assert [(p.x, p.y, p.kind) for p in result.points] == [(95, 50, 'core')]
        assert result.points[0].score == pytest.approx(0.8)

    def test_respects_original_size_of_prepadded_image(self, small_config, rng):
        detector = Detector(saturated_weights(small_config, 40.0), nms_radius=10.0)
        result = detector.detect(rng.random((1, 48, 48)), original_size=(20, 30))
        assert all(p.x < 30 and p.y < 20 for p in result.points)

    def test_parallel_matches_serial(self, small_config, rng):
        detector = Detector(init_weights(small_config, seed=4), nms_min=0.0)
        items = [(f'img{i}', rng.random((32, 32)), None) for i in range(4)]
        serial = detector.detect_many(items)
        parallel = detector.detect_many(items, workers=3)
        assert [o.image for o in parallel] == ['img0', 'img1', 'img2', 'img3']
        assert [o.points for o in serial] == [o.points for o in parallel]

    def test_rejects_bad_thresholds(self, small_config):
        weights = init_weights(small_config)
        with pytest.raises(StructuralError):
            Detector(weights, nms_min=1.5)
        with pytest.raises(StructuralError):
            Detector(weights, nms_radius=-1.0)
