import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

from dotenv import load_dotenv

from rose.errors import StructuralError
from rose.models.network import DEFAULT_FEATURE_WIDTHS, NetworkConfig

load_dotenv()


def _parse_widths(raw: str) -> Tuple[int, ...]:
    try:
        widths = tuple(int(part) for part in raw.split(',') if part.strip())
    except ValueError as e:
        raise StructuralError(f"ROSE_FEATURE_WIDTHS must be comma-separated integers: {raw!r}") from e
    return widths


def _parse_bool(raw: str) -> bool:
    return raw.strip().lower() in ('1', 'true', 'yes', 'on')


def _parse_float(name: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError as e:
        raise StructuralError(f"{name} must be a number: {raw!r}") from e


@dataclass(frozen=True)
class Settings:
    """Process-wide settings read from the environment (and a .env file if present)."""
    log_level: str = 'INFO'
    weights_path: str = 'weights/rose.rosew'
    feature_widths: Tuple[int, ...] = DEFAULT_FEATURE_WIDTHS
    feature_activation: str = 'relu'
    pool_source: str = 'core'
    feature_bias: bool = True
    nms_radius: float = 20.0
    nms_min: float = 0.2
    match_radius: float = 20.0
    workers: int = 1

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            feature_widths=self.feature_widths,
            feature_activation=self.feature_activation,
            pool_source=self.pool_source,
            feature_bias=self.feature_bias,
        )


def load_settings() -> Settings:
    """Build a Settings object from the current environment."""
    workers_raw = os.getenv('ROSE_WORKERS', '1')
    try:
        workers = int(workers_raw)
    except ValueError as e:
        raise StructuralError(f"ROSE_WORKERS must be an integer: {workers_raw!r}") from e
    if workers < 1:
        raise StructuralError(f"ROSE_WORKERS must be >= 1, got {workers}")

    settings = Settings(
        log_level=os.getenv('ROSE_LOG_LEVEL', 'INFO').upper(),
        weights_path=os.getenv('ROSE_WEIGHTS', 'weights/rose.rosew'),
        feature_widths=_parse_widths(os.getenv('ROSE_FEATURE_WIDTHS', ','.join(map(str, DEFAULT_FEATURE_WIDTHS)))),
        feature_activation=os.getenv('ROSE_FEATURE_ACTIVATION', 'relu').lower(),
        pool_source=os.getenv('ROSE_POOL_SOURCE', 'core').lower(),
        feature_bias=_parse_bool(os.getenv('ROSE_FEATURE_BIAS', '1')),
        nms_radius=_parse_float('ROSE_NMS_RADIUS', os.getenv('ROSE_NMS_RADIUS', '20')),
        nms_min=_parse_float('ROSE_NMS_MIN', os.getenv('ROSE_NMS_MIN', '0.2')),
        match_radius=_parse_float('ROSE_MATCH_RADIUS', os.getenv('ROSE_MATCH_RADIUS', '20')),
        workers=workers,
    )
    # validates widths/activation/pool source early
    settings.network_config()
    if not 0.0 <= settings.nms_min <= 1.0:
        raise StructuralError(f"ROSE_NMS_MIN must be in [0, 1], got {settings.nms_min}")
    return settings


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return load_settings()


def configure_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once for an entry point."""
    level_name = (level or get_settings().log_level).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
