import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from rose.errors import StructuralError
from rose.models.network import NetworkWeights, forward
from rose.models.postprocess import CORE, DELTA, SingularPoint, nms
from rose.utils.image_io import pad_to_multiple

logger = logging.getLogger(__name__)


@dataclass
class DetectionOutput:
    image: str
    points: List[SingularPoint] = field(default_factory=list)
    time_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            'image': self.image,
            'points': [p.to_dict() for p in self.points],
            'time_ms': float(self.time_ms),
        }


class Detector:
    """
    One-stage singular point detector: network forward pass followed by NMS on the
    fused core and delta maps. Weights are shared read-only, so one Detector can serve
    concurrent calls.
    """

    def __init__(self, weights: NetworkWeights, nms_radius: float = 20.0, nms_min: float = 0.2):
        if not 0.0 <= nms_min <= 1.0:
            raise StructuralError(f"nms_min must be in [0, 1], got {nms_min}")
        if nms_radius < 0:
            raise StructuralError(f"nms_radius must be non-negative, got {nms_radius}")
        self.weights = weights
        self.nms_radius = nms_radius
        self.nms_min = nms_min

    def detect(self, image: np.ndarray, name: str = '',
               original_size: Optional[Tuple[int, int]] = None) -> DetectionOutput:
        """
        Detect cores and deltas in one grayscale image.

        Args:
            image (np.ndarray): (H, W) or (1, H, W) image in [0, 1]; padded internally
            name (str): Label copied into the output
            original_size (Optional[Tuple[int, int]]): (height, width) of the unpadded
                image when `image` has already been padded

        Returns:
            DetectionOutput: Points in the original image frame and the forward + NMS time
        """
        plane = image[0] if image.ndim == 3 else image
        height, width = original_size if original_size is not None else plane.shape
        padded = pad_to_multiple(plane, self.weights.config.min_divisor)[None]

        start = time.perf_counter()
        result = forward(padded, self.weights)
        # NMS runs on the unpadded frame only
        points = (nms(result.p_core[:height, :width], self.nms_radius, self.nms_min, CORE)
                  + nms(result.p_delta[:height, :width], self.nms_radius, self.nms_min, DELTA))
        elapsed_ms = (time.perf_counter() - start) * 1000.0

        logger.debug(f"{name}: {len(points)} singular points in {elapsed_ms:.1f} ms")
        return DetectionOutput(name, points, elapsed_ms)

    def detect_many(self, images: Sequence[Tuple[str, np.ndarray, Optional[Tuple[int, int]]]],
                    workers: int = 1) -> List[DetectionOutput]:
        """Run detect() over (name, image, original_size) triples; output order follows input order."""
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                return list(executor.map(lambda item: self.detect(item[1], item[0], item[2]), images))
        return [self.detect(image, name, size) for name, image, size in images]
