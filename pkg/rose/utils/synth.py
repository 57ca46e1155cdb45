"""
Synthetic fingerprints with planted singular points.

The orientation field follows the zero-pole model: every core adds half the argument
of (p - core), every delta subtracts half the argument of (p - delta), on top of a
constant background orientation. Ridges are grown from seeded noise by repeatedly
filtering it with Gabor kernels steered by that field, so the ground truth is known
exactly by construction.

Angles use the mathematical convention (x to the right, y up) while arrays are indexed
(row, column) with rows growing downwards.
"""
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from rose.errors import StructuralError
from rose.utils.data_loader import AnnotationRecord, write_annotations
from rose.utils.image_io import to_pixels, write_pgm

logger = logging.getLogger(__name__)

Point = Tuple[int, int]

MAX_MARGIN = 48
MIN_SEPARATION = 48
ORIENTATION_BINS = 16
PLACEMENT_ATTEMPTS = 10000


def border_margin(size: int) -> int:
    """Distance kept between planted points and the image border."""
    return min(MAX_MARGIN, size // 4)


@dataclass(frozen=True)
class SynthSpec:
    size: int = 128
    n_cores: int = 1
    n_deltas: int = 1
    ridge_frequency: float = 0.1
    noise_level: float = 0.0
    seed: int = 0
    theta0: float = 0.0
    cores: Optional[Tuple[Point, ...]] = None
    deltas: Optional[Tuple[Point, ...]] = None
    iterations: int = 8

    def __post_init__(self):
        if self.size < 16 or self.size % 16:
            raise StructuralError(f"size must be a positive multiple of 16, got {self.size}")
        for name, n in (('n_cores', self.n_cores), ('n_deltas', self.n_deltas)):
            if not 0 <= n <= 2:
                raise StructuralError(f"{name} must be between 0 and 2, got {n}")
        if not 0 < self.ridge_frequency < 0.5:
            raise StructuralError(f"ridge_frequency must be in (0, 0.5), got {self.ridge_frequency}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise StructuralError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if not 0.0 <= self.theta0 < math.pi:
            raise StructuralError(f"theta0 must be in [0, pi), got {self.theta0}")
        if self.iterations < 1:
            raise StructuralError(f"iterations must be >= 1, got {self.iterations}")


def check_spacing(points: Sequence[Point], size: int) -> None:
    margin = border_margin(size)
    for x, y in points:
        if not (margin <= x <= size - 1 - margin and margin <= y <= size - 1 - margin):
            raise StructuralError(f"Point ({x}, {y}) is closer than {margin} px to the border of a {size} px image")
    for i, (x1, y1) in enumerate(points):
        for x2, y2 in points[i + 1:]:
            if math.hypot(x1 - x2, y1 - y2) < MIN_SEPARATION:
                raise StructuralError(f"Points ({x1}, {y1}) and ({x2}, {y2}) are closer than {MIN_SEPARATION} px")


def place_points(spec: SynthSpec, rng: np.random.Generator) -> Tuple[Tuple[Point, ...], Tuple[Point, ...]]:
    """Explicit positions from the SynthSpec, or random ones respecting margin and separation."""
    if spec.cores is not None or spec.deltas is not None:
        cores = tuple(tuple(int(v) for v in p) for p in (spec.cores or ()))
        deltas = tuple(tuple(int(v) for v in p) for p in (spec.deltas or ()))
        if len(cores) > 2 or len(deltas) > 2:
            raise StructuralError("At most 2 cores and 2 deltas can be planted")
        check_spacing(cores + deltas, spec.size)
        return cores, deltas

    margin = border_margin(spec.size)
    low, high = margin, spec.size - 1 - margin
    wanted = spec.n_cores + spec.n_deltas
    for _ in range(PLACEMENT_ATTEMPTS):
        points: List[Point] = []
        for _ in range(wanted):
            candidate = (int(rng.integers(low, high + 1)), int(rng.integers(low, high + 1)))
            if all(math.hypot(candidate[0] - x, candidate[1] - y) >= MIN_SEPARATION for x, y in points):
                points.append(candidate)
            else:
                break
        if len(points) == wanted:
            return tuple(points[:spec.n_cores]), tuple(points[spec.n_cores:])
    raise StructuralError(
        f"Cannot place {spec.n_cores} cores and {spec.n_deltas} deltas {MIN_SEPARATION} px apart "
        f"in a {spec.size} px image"
    )


def orientation_field(cores: Sequence[Point], deltas: Sequence[Point], height: int, width: int,
                      theta0: float = 0.0) -> np.ndarray:
    """
    Zero-pole orientation field.

    Returns:
        np.ndarray: (height, width) ridge orientation in [0, pi)
    """
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    theta = np.full((height, width), float(theta0))
    for sign, points in ((0.5, cores), (-0.5, deltas)):
        for x, y in points:
            if not (0 <= x < width and 0 <= y < height):
                raise StructuralError(f"Singular point ({x}, {y}) lies outside the {width}x{height} field")
            theta += sign * np.arctan2(-(rows - y), cols - x)
    theta = np.mod(theta, np.pi)
    # the field is undefined on a planted pixel; borrow the neighbour's value
    for x, y in list(cores) + list(deltas):
        if float(x).is_integer() and float(y).is_integer():
            col, row = int(x), int(y)
            theta[row, col] = theta[row, col + 1] if col + 1 < width else theta[row, col - 1]
    return theta


def _wrap_half_pi(delta: np.ndarray) -> np.ndarray:
    """Map orientation differences into (-pi/2, pi/2]."""
    return np.pi / 2 - np.mod(np.pi / 2 - delta, np.pi)


def poincare_index(theta: np.ndarray, x: int, y: int, half_size: int = 8) -> float:
    """
    Winding of the orientation field along the square loop of half-size `half_size`
    around (x, y), traversed counter-clockwise. +0.5 around a core, -0.5 around a
    delta, 0 where the field is smooth.
    """
    height, width = theta.shape
    r = half_size
    if not (r <= x < width - r and r <= y < height - r):
        raise StructuralError(f"Loop of half-size {r} around ({x}, {y}) leaves the {width}x{height} field")
    path = []
    # counter-clockwise with y up: right side upwards, top leftwards, left downwards, bottom rightwards
    path += [(y - k, x + r) for k in range(0, r)]
    path += [(y - r, x + r - k) for k in range(0, 2 * r)]
    path += [(y - r + k, x - r) for k in range(0, 2 * r)]
    path += [(y + r, x - r + k) for k in range(0, 2 * r)]
    path += [(y + r - k, x + r) for k in range(0, r + 1)]
    samples = np.array([theta[row, col] for row, col in path])
    total = _wrap_half_pi(np.diff(samples)).sum()
    return float(total / (2 * np.pi))


def estimate_orientation(image: np.ndarray, block: int = 16) -> np.ndarray:
    """
    Block-wise ridge orientation from the averaged structure tensor.

    Returns:
        np.ndarray: (H // block, W // block) orientations in [0, pi)
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    gx = ndimage.sobel(img, axis=1)
    gy = -ndimage.sobel(img, axis=0)
    hb, wb = img.shape[0] // block, img.shape[1] // block

    def block_sum(a: np.ndarray) -> np.ndarray:
        return a[:hb * block, :wb * block].reshape(hb, block, wb, block).sum(axis=(1, 3))

    gxx, gyy, gxy = block_sum(gx * gx), block_sum(gy * gy), block_sum(gx * gy)
    gradient_angle = 0.5 * np.arctan2(2 * gxy, gxx - gyy)
    return np.mod(gradient_angle + np.pi / 2, np.pi)


def gabor_kernel(angle: float, frequency: float) -> np.ndarray:
    """Zero-mean even Gabor kernel whose ridges run along `angle`."""
    sigma = 0.5 / frequency
    reach = int(math.ceil(3 * sigma))
    rows, cols = np.mgrid[-reach:reach + 1, -reach:reach + 1].astype(np.float64)
    envelope = np.exp(-(rows ** 2 + cols ** 2) / (2 * sigma ** 2))
    # distance across the ridges, measured along the ridge normal
    across = cols * math.sin(angle) + rows * math.cos(angle)
    kernel = envelope * np.cos(2 * np.pi * frequency * across)
    kernel -= envelope * (kernel.sum() / envelope.sum())
    return kernel / np.abs(kernel).sum()


def _steered_filter(img: np.ndarray, theta: np.ndarray, kernels: Sequence[np.ndarray]) -> np.ndarray:
    responses = np.stack([fftconvolve(img, k, mode='same') for k in kernels])
    position = theta / (np.pi / len(kernels))
    lower = np.floor(position).astype(int) % len(kernels)
    upper = (lower + 1) % len(kernels)
    weight = position - np.floor(position)
    rows, cols = np.indices(img.shape)
    return (1 - weight) * responses[lower, rows, cols] + weight * responses[upper, rows, cols]


def render(spec: SynthSpec) -> Tuple[np.ndarray, AnnotationRecord]:
    """
    Render one synthetic fingerprint.

    Returns:
        Tuple[np.ndarray, AnnotationRecord]: (1, size, size) float32 image in [0, 1]
        and its annotation (image path left empty)
    """
    rng = np.random.default_rng(spec.seed)
    cores, deltas = place_points(spec, rng)
    theta = orientation_field(cores, deltas, spec.size, spec.size, spec.theta0)
    kernels = [gabor_kernel(k * np.pi / ORIENTATION_BINS, spec.ridge_frequency) for k in range(ORIENTATION_BINS)]
    smoothing = 1.0 / spec.ridge_frequency

    img = rng.standard_normal((spec.size, spec.size))
    for _ in range(spec.iterations):
        filtered = _steered_filter(img, theta, kernels)
        amplitude = np.sqrt(ndimage.gaussian_filter(filtered ** 2, smoothing)) + 1e-12
        img = np.clip(filtered / amplitude, -1.0, 1.0)

    image = 0.5 + 0.5 * img
    if spec.noise_level > 0:
        image = image + rng.normal(0.0, 0.5 * spec.noise_level, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    logger.debug(f"Rendered {spec.size}px fingerprint: cores {cores}, deltas {deltas}")
    return image, AnnotationRecord('', cores, deltas)


def generate_dataset(count: int, template: SynthSpec, seed: int, out_dir: Union[str, Path]) -> Path:
    """
    Write `count` PGM fingerprints plus an annotations.json file into out_dir.
    Image i is rendered with seed + i, so each image can be regenerated on its own.

    Returns:
        Path: The annotation file
    """
    if count < 0:
        raise StructuralError(f"count must be >= 0, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for index in range(count):
        spec = replace(template, seed=seed + index, cores=None, deltas=None)
        image, record = render(spec)
        name = f'synth_{index:04d}.pgm'
        write_pgm(out / name, to_pixels(image[0]))
        records.append(replace(record, image_path=name))
    annotation_file = write_annotations(records, out / 'annotations.json')
    logger.info(f"Wrote {count} synthetic fingerprints and {annotation_file}")
    return annotation_file
