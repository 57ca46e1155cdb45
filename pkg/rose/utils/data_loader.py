import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from rose.errors import DatasetError, StructuralError
from rose.utils.image_io import pad_to_multiple, read_image, to_unit_range

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


@dataclass(frozen=True)
class AnnotationRecord:
    """One image plus its ground-truth core and delta positions, (x, y) = (column, row)."""
    image_path: str
    cores: Tuple[Point, ...] = field(default_factory=tuple)
    deltas: Tuple[Point, ...] = field(default_factory=tuple)

    def points(self, kind: str) -> Tuple[Point, ...]:
        return self.cores if kind == 'core' else self.deltas

    def to_dict(self) -> dict:
        return {
            'image': self.image_path,
            'cores': [list(p) for p in self.cores],
            'deltas': [list(p) for p in self.deltas],
        }


class Sample(NamedTuple):
    image: np.ndarray
    cores: Tuple[Point, ...]
    deltas: Tuple[Point, ...]
    path: str
    original_size: Tuple[int, int]


def _parse_points(raw, index: int, key: str) -> Tuple[Point, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise DatasetError(f"Record {index}: '{key}' must be a list of [x, y] pairs", record=index)
    points = []
    for item in raw:
        if (not isinstance(item, (list, tuple)) or len(item) != 2
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in item)):
            raise DatasetError(f"Record {index}: bad point {item!r} in '{key}'", record=index)
        x, y = item
        points.append((x, y))
    return tuple(points)


def parse_annotations(text: str, source: str = '<string>') -> List[AnnotationRecord]:
    """
    Parse the JSON annotation format:
    [{"image": str, "cores": [[x, y], ...], "deltas": [[x, y], ...]}, ...]
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError(f"Malformed JSON in {source} at line {e.lineno}: {e.msg}", path=source, line=e.lineno) from e
    if not isinstance(raw, list):
        raise DatasetError(f"{source}: top level must be a JSON array", path=source, line=1)

    records = []
    for index, entry in enumerate(raw):
        if not isinstance(entry, dict) or not isinstance(entry.get('image'), str):
            raise DatasetError(f"Record {index} in {source} needs an 'image' string", path=source, record=index)
        records.append(AnnotationRecord(
            image_path=entry['image'],
            cores=_parse_points(entry.get('cores'), index, 'cores'),
            deltas=_parse_points(entry.get('deltas'), index, 'deltas'),
        ))
    return records


def read_annotations(annotation_file: Union[str, Path]) -> List[AnnotationRecord]:
    path = Path(annotation_file)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise DatasetError(f"Cannot read annotation file {path}: {e}", path=str(path)) from e
    records = parse_annotations(text, source=str(path))
    if not records:
        logger.warning(f"Annotation file {path} is empty")
    return records


def write_annotations(records: Sequence[AnnotationRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps([r.to_dict() for r in records], indent=2) + '\n', encoding='utf-8')
    return path


def load_dataset(annotation_file: Union[str, Path], image_root: Optional[Union[str, Path]] = None,
                 multiple: int = 16) -> List[Sample]:
    """
    Load every annotated image, normalised to [0, 1] and zero-padded on the right and
    bottom to a multiple of 16 (annotation coordinates are unaffected by the padding).

    Args:
        annotation_file: JSON annotation file
        image_root: Directory image paths are relative to (defaults to the annotation
            file's directory)

    Returns:
        List[Sample]: Samples in file order. Nothing is returned if any record fails.
    """
    records = read_annotations(annotation_file)
    root = Path(image_root) if image_root is not None else Path(annotation_file).parent
    logger.info(f"Loading {len(records)} annotated images from {root}")

    samples = []
    for index, record in enumerate(records):
        path = root / record.image_path
        if not path.is_file():
            raise DatasetError(f"Image not found: {path}", path=str(path), record=index)
        try:
            pixels = read_image(path)
        except (OSError, StructuralError) as e:
            raise DatasetError(f"Cannot decode image {path}: {e}", path=str(path), record=index) from e

        height, width = pixels.shape
        for kind, points in (('core', record.cores), ('delta', record.deltas)):
            for x, y in points:
                if not (0 <= x < width and 0 <= y < height):
                    raise DatasetError(
                        f"Record {index} ({record.image_path}): {kind} ({x}, {y}) outside {width}x{height} image",
                        path=str(path), record=index,
                    )
        image = pad_to_multiple(to_unit_range(pixels), multiple)[None]
        samples.append(Sample(image, record.cores, record.deltas, str(path), (height, width)))
        logger.debug(f"{path}: {width}x{height} -> {image.shape[2]}x{image.shape[1]}")

    logger.info(f"Loaded {len(samples)} samples")
    return samples


def split_records(records: Sequence[AnnotationRecord], fraction: float = 0.5,
                  seed: int = 0) -> Tuple[List[AnnotationRecord], List[AnnotationRecord]]:
    """
    Seeded random split into (train, test); each part keeps the original file order.
    """
    if not 0.0 <= fraction <= 1.0:
        raise StructuralError(f"fraction must be in [0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_train = int(round(fraction * len(records)))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return [records[i] for i in train_idx], [records[i] for i in test_idx]
