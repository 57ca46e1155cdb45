import io
import logging
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from rose.errors import StructuralError

logger = logging.getLogger(__name__)


def decode_image(data: bytes, source: str = '<bytes>') -> np.ndarray:
    """
    Decode a binary PGM (P5, maxval <= 255) or PNG into a uint8 (H, W) array.

    Pillow parses both formats; PGM values below a maxval of 255 are rescaled to the
    full 8-bit range and non-grayscale PNGs are converted to 8-bit grayscale.
    """
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if img.format == 'PPM' and not data.startswith(b'P5'):
                raise StructuralError(f"{source}: only binary grayscale PGM (P5) is supported")
            if img.format not in ('PPM', 'PNG'):
                raise StructuralError(f"Unsupported image format {img.format} for {source} (expected PGM P5 or PNG)")
            if img.format == 'PPM' and img.mode != 'L':
                raise StructuralError(f"{source}: PGM maxval above 255 is not supported")
            if img.mode != 'L':
                logger.warning(f"{source} is {img.mode}, converting to 8-bit grayscale")
                img = img.convert('L')
            return np.asarray(img, dtype=np.uint8).copy()
    except StructuralError:
        raise
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as e:
        raise StructuralError(f"Could not decode {source}: {e}") from e


def encode_pgm(pixels: np.ndarray) -> bytes:
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise StructuralError(f"PGM encoder needs a uint8 (H, W) array, got {pixels.dtype} {pixels.shape}")
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels)).save(buffer, format='PPM')
    return buffer.getvalue()


def write_pgm(path: Union[str, Path], pixels: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(encode_pgm(pixels))
    return path


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Read a grayscale PGM (P5) or PNG file as uint8 (H, W)."""
    path = Path(path)
    return decode_image(path.read_bytes(), str(path))


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def to_pixels(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def padded_size(size: int, multiple: int = 16) -> int:
    return -(-size // multiple) * multiple


def pad_to_multiple(image: np.ndarray, multiple: int = 16) -> np.ndarray:
    """Zero-pad the last two axes on the right/bottom up to a multiple; coordinates are unchanged."""
    height, width = image.shape[-2:]
    pad = [(0, 0)] * (image.ndim - 2)
    pad += [(0, padded_size(height, multiple) - height), (0, padded_size(width, multiple) - width)]
    return np.pad(image, pad)


def draw_overlay(pixels: np.ndarray, points: Iterable, half_width: int = 5, value: int = 255) -> np.ndarray:
    """
    Burn detection glyphs into a copy of a grayscale image: a filled square for each
    core and a hollow square for each delta.
    """
    canvas = pixels.copy()
    height, width = canvas.shape
    for point in points:
        top, bottom = max(0, point.y - half_width), min(height - 1, point.y + half_width)
        left, right = max(0, point.x - half_width), min(width - 1, point.x + half_width)
        if point.kind == 'core':
            canvas[top:bottom + 1, left:right + 1] = value
            continue
        if point.y - half_width >= 0:
            canvas[point.y - half_width, left:right + 1] = value
        if point.y + half_width < height:
            canvas[point.y + half_width, left:right + 1] = value
        if point.x - half_width >= 0:
            canvas[top:bottom + 1, point.x - half_width] = value
        if point.x + half_width < width:
            canvas[top:bottom + 1, point.x + half_width] = value
    return canvas
