"""
Gaussian heatmap targets and the penalty-reduced (variant) focal loss.

For a target heatmap y and a prediction p clamped into [eps, 1 - eps]:

    L = -1/N * sum_{i,j} { (1 - p)^2 log(p)                    if y == 1
                         { (1 - y)^4 p^2 log(1 - p)            otherwise

with N the number of pixels where y == 1 (at least 1).
"""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np

from rose.errors import StructuralError

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


@dataclass(frozen=True)
class HeatmapConfig:
    sigma: float = 6.0
    clamp_epsilon: float = 1e-6

    def __post_init__(self):
        if not self.sigma > 0:
            raise StructuralError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.clamp_epsilon < 0.5:
            raise StructuralError(f"clamp_epsilon must be in (0, 0.5), got {self.clamp_epsilon}")


def gaussian_heatmap(points: Sequence[Point], height: int, width: int,
                     config: HeatmapConfig = HeatmapConfig(), dtype=np.float32) -> np.ndarray:
    """
    Ground-truth heatmap with a Gaussian bump on every annotated point.

    Points are (x, y) = (column, row). Real coordinates are snapped to the nearest
    pixel so every bump peaks at exactly 1; overlapping bumps combine by max.

    Args:
        points (Sequence[Point]): Annotated points
        height (int): Map height
        width (int): Map width
        config (HeatmapConfig): Gaussian width

    Returns:
        np.ndarray: (height, width) map in [0, 1]
    """
    heatmap = np.zeros((height, width), dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    two_sigma_sq = 2.0 * config.sigma ** 2
    for x, y in points:
        if not (0 <= x < width and 0 <= y < height):
            raise StructuralError(f"Point ({x}, {y}) lies outside the {width}x{height} map")
        cx = min(int(math.floor(x + 0.5)), width - 1)
        cy = min(int(math.floor(y + 0.5)), height - 1)
        bump = np.exp(-((cols - cx) ** 2 + (rows - cy) ** 2) / two_sigma_sq)
        np.maximum(heatmap, bump, out=heatmap)
    return heatmap.astype(dtype)


def _prepare(y: np.ndarray, yhat: np.ndarray, config: HeatmapConfig):
    if y.shape != yhat.shape:
        raise StructuralError(f"Target shape {y.shape} does not match prediction shape {yhat.shape}")
    eps = config.clamp_epsilon
    target = np.asarray(y, dtype=np.float64)
    raw = np.asarray(yhat, dtype=np.float64)
    p = np.clip(raw, eps, 1.0 - eps)
    positive = target == 1.0
    n = max(1, int(positive.sum()))
    return target, raw, p, positive, n


def vfocal_loss(y: np.ndarray, yhat: np.ndarray, config: HeatmapConfig = HeatmapConfig()) -> float:
    target, _, p, positive, n = _prepare(y, yhat, config)
    pos_terms = (1.0 - p[positive]) ** 2 * np.log(p[positive])
    neg = ~positive
    neg_terms = (1.0 - target[neg]) ** 4 * p[neg] ** 2 * np.log1p(-p[neg])
    return float(-(pos_terms.sum() + neg_terms.sum()) / n)


def vfocal_loss_grad(y: np.ndarray, yhat: np.ndarray, config: HeatmapConfig = HeatmapConfig()) -> np.ndarray:
    """dL/dyhat; zero wherever the clamp is active."""
    target, raw, p, positive, n = _prepare(y, yhat, config)
    log_p = np.log(p)
    log_q = np.log1p(-p)
    pos_grad = 2.0 * (1.0 - p) * log_p - (1.0 - p) ** 2 / p
    neg_grad = -(1.0 - target) ** 4 * (2.0 * p * log_q - p ** 2 / (1.0 - p))
    grad = np.where(positive, pos_grad, neg_grad) / n
    eps = config.clamp_epsilon
    grad[(raw < eps) | (raw > 1.0 - eps)] = 0.0
    return grad.astype(np.result_type(yhat), copy=False)


class DetectionLoss(NamedTuple):
    total: float
    core: float
    delta: float
    grad_core: np.ndarray
    grad_delta: np.ndarray


def detection_loss(target_core: np.ndarray, target_delta: np.ndarray,
                   p_core: np.ndarray, p_delta: np.ndarray,
                   config: HeatmapConfig = HeatmapConfig()) -> DetectionLoss:
    """Sum of the core and delta focal losses, with both gradient maps."""
    core = vfocal_loss(target_core, p_core, config)
    delta = vfocal_loss(target_delta, p_delta, config)
    return DetectionLoss(
        total=core + delta,
        core=core,
        delta=delta,
        grad_core=vfocal_loss_grad(target_core, p_core, config),
        grad_delta=vfocal_loss_grad(target_delta, p_delta, config),
    )
