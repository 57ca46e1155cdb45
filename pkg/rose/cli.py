"""
Command-line entry point: `python -m rose <command>`.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from rose.config import configure_logging, get_settings
from rose.errors import RoseError
from rose.models.detector import Detector
from rose.models.postprocess import FALSE_ALARM_DEFINITION, evaluate
from rose.models.training import TrainConfig, save_loss_log, train
from rose.models.weights_io import load_weights, save_weights
from rose.utils.data_loader import load_dataset, read_annotations, split_records, write_annotations
from rose.utils.image_io import draw_overlay, read_image, to_unit_range, write_pgm
from rose.utils.synth import SynthSpec, generate_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Arguments parsed but describe an unusable request."""


def _unit_interval(raw: str) -> float:
    value = float(raw)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {raw}")
    return value


def _positive_float(raw: str) -> float:
    value = float(raw)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {raw}")
    return value


def _non_negative_float(raw: str) -> float:
    value = float(raw)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {raw}")
    return value


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {raw}")
    return value


def _non_negative_int(raw: str) -> int:
    value = int(raw)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {raw}")
    return value


def _image_size(raw: str) -> int:
    value = int(raw)
    if value < 16 or value % 16:
        raise argparse.ArgumentTypeError(f"must be a positive multiple of 16, got {raw}")
    return value


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog='rose', description='One-stage fingerprint singular point detection.')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='Generate a synthetic fingerprint dataset.')
    synth.add_argument('--out', type=Path, required=True, help='Output directory.')
    synth.add_argument('--count', type=_non_negative_int, required=True, help='Number of images.')
    synth.add_argument('--size', type=_image_size, default=128, help='Image side in pixels (multiple of 16).')
    synth.add_argument('--cores', type=int, choices=[0, 1, 2], default=1, help='Cores per image.')
    synth.add_argument('--deltas', type=int, choices=[0, 1, 2], default=1, help='Deltas per image.')
    synth.add_argument('--seed', type=int, default=0, help='Base seed; image i uses seed + i.')
    synth.add_argument('--noise', type=_unit_interval, default=0.0, help='Additive noise level in [0, 1].')
    synth.add_argument('--frequency', type=_positive_float, default=0.1, help='Ridge frequency (cycles/pixel).')

    train_cmd = commands.add_parser('train', help='Train the network with Adam.')
    train_cmd.add_argument('--data', type=Path, default=None, help='Image directory (defaults to the annotation directory).')
    train_cmd.add_argument('--ann', type=Path, required=True, help='JSON annotation file.')
    train_cmd.add_argument('--epochs', type=_positive_int, default=100)
    train_cmd.add_argument('--batch', type=_positive_int, default=4)
    train_cmd.add_argument('--lr', type=_positive_float, default=0.01)
    train_cmd.add_argument('--sigma', type=_positive_float, default=6.0, help='Gaussian heatmap sigma (px).')
    train_cmd.add_argument('--seed', type=int, default=0)
    train_cmd.add_argument('--out', type=Path, required=True, help='Output weights file (.rosew).')
    train_cmd.add_argument('--loss-log', type=Path, default=None, help='Loss CSV (default: <out stem>.loss.csv).')
    train_cmd.add_argument('--checkpoint-interval', type=_non_negative_int, default=0,
                           help='Write a checkpoint every N batches (0 disables).')
    train_cmd.add_argument('--max-steps', type=_positive_int, default=None, help='Stop after N Adam steps.')

    detect = commands.add_parser('detect', help='Detect singular points in one image.')
    detect.add_argument('--weights', type=Path, required=True)
    detect.add_argument('--image', type=Path, required=True)
    detect.add_argument('--overlay', type=Path, default=None, help='Write a PGM with detections burned in.')
    detect.add_argument('--json', type=Path, default=None, help='Write the detections as JSON.')
    detect.add_argument('--nms-radius', type=_non_negative_float, default=settings.nms_radius)
    detect.add_argument('--nms-min', type=_unit_interval, default=settings.nms_min)

    eval_cmd = commands.add_parser('eval', help='Evaluate detection rate, false alarm rate and speed.')
    eval_cmd.add_argument('--weights', type=Path, required=True)
    eval_cmd.add_argument('--data', type=Path, default=None, help='Image directory (defaults to the annotation directory).')
    eval_cmd.add_argument('--ann', type=Path, required=True)
    eval_cmd.add_argument('--match-radius', type=_non_negative_float, default=settings.match_radius)
    eval_cmd.add_argument('--nms-radius', type=_non_negative_float, default=settings.nms_radius)
    eval_cmd.add_argument('--nms-min', type=_unit_interval, default=settings.nms_min)

    split = commands.add_parser('split', help='Seeded train/test split of an annotation file.')
    split.add_argument('--ann', type=Path, required=True)
    split.add_argument('--train-out', type=Path, required=True)
    split.add_argument('--test-out', type=Path, required=True)
    split.add_argument('--fraction', type=_unit_interval, default=0.5)
    split.add_argument('--seed', type=int, default=0)
    return parser


def cmd_synth(args: argparse.Namespace) -> int:
    template = SynthSpec(
        size=args.size, n_cores=args.cores, n_deltas=args.deltas,
        ridge_frequency=args.frequency, noise_level=args.noise,
    )
    annotation_file = generate_dataset(args.count, template, args.seed, args.out)
    print(annotation_file)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    settings = get_settings()
    dataset = load_dataset(args.ann, args.data)
    if not dataset:
        raise UsageError(f"{args.ann} lists no images to train on")
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, seed=args.seed, sigma=args.sigma, lr=args.lr,
        checkpoint_interval=args.checkpoint_interval, checkpoint_dir=str(args.out.parent),
        max_steps=args.max_steps, workers=settings.workers, network=settings.network_config(),
    )
    result = train(dataset, config)
    save_weights(result.weights, args.out)
    loss_log = args.loss_log or args.out.with_suffix('.loss.csv')
    save_loss_log(result.loss_history, loss_log)
    logger.info(f"Trained {result.steps} steps; weights {args.out}, loss log {loss_log}")
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    weights = load_weights(args.weights, get_settings().network_config())
    pixels = read_image(args.image)
    detector = Detector(weights, nms_radius=args.nms_radius, nms_min=args.nms_min)
    output = detector.detect(to_unit_range(pixels), name=str(args.image))

    payload = json.dumps(output.to_dict(), indent=2)
    print(payload)
    if args.json is not None:
        args.json.write_text(payload + '\n', encoding='utf-8')
    if args.overlay is not None:
        write_pgm(args.overlay, draw_overlay(pixels, output.points))
        logger.info(f"Overlay written to {args.overlay}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    settings = get_settings()
    weights = load_weights(args.weights, settings.network_config())
    dataset = load_dataset(args.ann, args.data)
    if not dataset:
        raise UsageError(f"{args.ann} lists no images to evaluate")
    detector = Detector(weights, nms_radius=args.nms_radius, nms_min=args.nms_min)
    outputs = detector.detect_many(
        [(s.path, s.image, s.original_size) for s in dataset], workers=settings.workers,
    )
    report = evaluate(outputs, dataset, args.match_radius)
    print(json.dumps(report.to_dict(), indent=2))
    print(report.to_frame().to_string(float_format=lambda v: f'{v:.1f}'), file=sys.stderr)
    print(FALSE_ALARM_DEFINITION, file=sys.stderr)
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    records = read_annotations(args.ann)
    train_records, test_records = split_records(records, args.fraction, args.seed)
    write_annotations(train_records, args.train_out)
    write_annotations(test_records, args.test_out)
    logger.info(f"Split {len(records)} records into {len(train_records)} train / {len(test_records)} test")
    return EXIT_OK


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'detect': cmd_detect,
    'eval': cmd_eval,
    'split': cmd_split,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        configure_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    except RoseError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (RoseError, OSError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        return EXIT_FAILURE
