#!/usr/bin/env python3
"""
ViSTRA3 - Adaptive Video Coding Command Line

Wraps a host codec with per-segment format adaptation (bit depth and/or
spatial resolution), learned mode selection and CNN restoration.

Usage:
    # Encode with the oracle mode search
    python3 vistra3.py encode input.y4m output.vst3 --qp 32 --stats stats.csv

    # Decode with baseline (non-learned) inversion
    python3 vistra3.py decode output.vst3 decoded.y4m --baseline-restore

    # Rate-quality sweep and BD report against an M0 anchor
    python3 vistra3.py sweep input.y4m test.csv --qmo oracle
    python3 vistra3.py sweep input.y4m anchor.csv --qmo fixed --mode M0
    python3 vistra3.py bd test.csv anchor.csv --output report.csv

    # Training data and models
    python3 vistra3.py label a.y4m b.y4m --output qmo_index.csv [--dry-run]
    python3 vistra3.py train-qmo qmo_index.csv --output qmo.vnn
    python3 vistra3.py train-restore a.y4m b.y4m --registry models/ --all-keys

Every command accepts --config (INI file; flags win), --jobs, --seed,
--verbose and --log-file. Errors exit 1 with one line on stderr:

    ERROR code=<code> message="<message>"
"""

import argparse
import json
import logging
import os
import sys
import time
from typing import Dict, List, Optional

from mode_optimisation import (QMO_CHANNELS, QmoDatasetConfig, count_qmo_samples, generate_qmo_dataset,
                               load_qmo_dataset, qmo_accuracy, save_qmo_dataset, train_qmo)
from neural_network import save_checkpoint
from rate_quality_metrics import bd_report, load_rd_csv, write_rd_csv
from restoration_network import (PATCH_SIZE, RESTORE_CHANNELS, RESTORE_LAYERS, RestorationModelKey,
                                 RestorationRegistry, generate_restoration_dataset, train_restoration)
from vistra3_base import (AdaptationMode, ConfigError, QpValue, Vistra3Error, configure_logging,
                          load_pipeline_config, print_stats)
from vistra3_pipeline import Vistra3Pipeline, read_sequence, sequence_name, write_sequence
from video_frames import read_y4m_shape

logger = logging.getLogger(__name__)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _mode(text: str) -> AdaptationMode:
    try:
        return AdaptationMode.parse(text)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(e.message) from None


def _config_overrides(args: argparse.Namespace) -> Dict[str, object]:
    overrides = {
        'codec': getattr(args, 'codec', None),
        'jobs': getattr(args, 'jobs', None),
        'seed': getattr(args, 'seed', None),
        'qmo_source': getattr(args, 'qmo', None),
        'qmo_checkpoint': getattr(args, 'qmo_checkpoint', None),
        'fixed_mode': getattr(args, 'mode', None),
        'confidence_threshold': getattr(args, 'threshold', None),
        'registry_path': getattr(args, 'registry', None),
        'qp_list': getattr(args, 'qps', None),
        'label': getattr(args, 'label', None),
    }
    if getattr(args, 'registry', None):
        overrides['baseline_restore'] = False
    if getattr(args, 'baseline_restore', False):
        overrides['baseline_restore'] = True
    return overrides


def _load_config(args: argparse.Namespace):
    return load_pipeline_config(args.config, _config_overrides(args))


def cmd_encode(args: argparse.Namespace) -> None:
    config = _load_config(args)
    pipeline = Vistra3Pipeline(config)
    qp_base = QpValue(args.qp if args.qp is not None else config.qp_list[0])
    sequence = read_sequence(args.input)
    result = pipeline.encode(sequence, qp_base)
    with open(os.path.expanduser(args.output), 'wb') as f:
        f.write(result.data)
    logger.info(f"💾 Wrote {len(result.data)} bytes to {args.output}")
    if args.stats:
        result.stats_frame().to_csv(os.path.expanduser(args.stats), index=False)
        logger.info(f"💾 Wrote segment stats to {args.stats}")
    print_stats(pipeline.stats, "ENCODE SUMMARY")


def cmd_decode(args: argparse.Namespace) -> None:
    config = _load_config(args)
    pipeline = Vistra3Pipeline(config, for_decode=True)
    try:
        with open(os.path.expanduser(args.input), 'rb') as f:
            data = f.read()
    except OSError as e:
        raise ConfigError('io-failure', f"cannot read {args.input}: {e}") from e
    sequence = pipeline.decode(data)
    write_sequence(sequence, args.output)
    logger.info(f"💾 Wrote {len(sequence)} frames to {args.output}")
    print_stats(pipeline.stats, "DECODE SUMMARY")


def cmd_sweep(args: argparse.Namespace) -> None:
    config = _load_config(args)
    encoder = Vistra3Pipeline(config)
    decoder = encoder if config.baseline_restore else Vistra3Pipeline(config, encoder.codec, for_decode=True)
    if args.name and len(args.inputs) > 1:
        raise ConfigError('ambiguous-name', "--name only applies to a single input")
    curves = []
    for path in args.inputs:
        sequence = read_sequence(path)
        curves.append(encoder.sweep(sequence, args.name or sequence_name(path), config.qp_list, decoder))
    write_rd_csv(curves, args.output)
    print_stats(encoder.stats, "SWEEP SUMMARY")


def cmd_bd(args: argparse.Namespace) -> None:
    report = bd_report(load_rd_csv(args.test), load_rd_csv(args.anchor))
    logger.info("=" * 60)
    logger.info("📊 BD REPORT")
    logger.info("=" * 60)
    for line in report.to_text().splitlines():
        logger.info(line)
    if args.output:
        report.to_csv(args.output)
        logger.info(f"💾 Wrote BD report to {args.output}")


def _dataset_config(args: argparse.Namespace, qps: List[int]) -> QmoDatasetConfig:
    return QmoDatasetConfig(num_crops=args.num_crops, crop_size=args.crop_size, crop_frames=args.crop_frames,
                            qps=tuple(qps), sub_crops=args.sub_crops, min_source_frames=args.min_source_frames,
                            seed=args.seed or 0)


def cmd_label(args: argparse.Namespace) -> None:
    config = _load_config(args)
    dataset_config = _dataset_config(args, config.qp_list)
    if args.dry_run:
        shapes = []
        for path in args.sources:
            if path.lower().endswith('.yuv'):
                sequence = read_sequence(path)
                shapes.append((len(sequence), sequence.width, sequence.height))
            else:
                shapes.append(read_y4m_shape(path))
        total = count_qmo_samples(shapes, dataset_config)
        logger.info(f"🔍 DRY RUN: {len(shapes)} sources would yield {total} labelled samples")
        print(total)
        return
    pipeline = Vistra3Pipeline(config)
    sources = [read_sequence(path) for path in args.sources]
    samples = generate_qmo_dataset(sources, pipeline.codec, dataset_config, jobs=config.jobs)
    save_qmo_dataset(samples, args.output, args.sources, write_cache=not args.no_cache)


def cmd_train_qmo(args: argparse.Namespace) -> None:
    samples = load_qmo_dataset(args.dataset)
    model = train_qmo(samples, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                      seed=args.seed or 0, channels=args.channels)
    logger.info(f"🎯 Training accuracy: {qmo_accuracy(model, samples):.3f}")
    save_checkpoint(model, args.output)


def cmd_train_restore(args: argparse.Namespace) -> None:
    config = _load_config(args)
    if not args.registry:
        raise ConfigError('missing-registry', "--registry is required for train-restore")
    if args.all_keys:
        keys = [RestorationModelKey(mode, qp) for mode in list(AdaptationMode)[1:] for qp in config.qp_list]
    else:
        if args.mode is None or args.qp is None:
            raise ConfigError('missing-key', "give --mode and --qp, or --all-keys")
        keys = [RestorationModelKey(args.mode, args.qp)]

    pipeline = Vistra3Pipeline(config)
    sources = [read_sequence(path) for path in args.sources]
    registry = RestorationRegistry(args.registry)
    start_time = time.time()
    for index, key in enumerate(keys, 1):
        logger.info(f"🔄 Training restoration model {index}/{len(keys)}: {key.mode.name} qp_base={key.qp_base}")
        dataset = generate_restoration_dataset(sources, pipeline.codec, key.mode, key.qp_base, args.num_patches,
                                               args.patch_size, seed=config.seed)
        model = train_restoration(dataset, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                                  seed=config.seed, mode=key.mode, qp_base=key.qp_base,
                                  channels=args.channels, num_layers=args.layers)
        registry.register(key, model)
    logger.info(f"✅ Trained {len(keys)} restoration models in {time.time() - start_time:.2f}s")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='INI configuration file (e.g., config/pipeline_example.ini)')
    common.add_argument('--jobs', type=int, help='Worker threads for segment coding and labelling')
    common.add_argument('--seed', type=int, help='Random seed')
    common.add_argument('--codec', choices=['toy', 'external'], help='Host codec')
    common.add_argument('--verbose', action='store_true', help='Enable debug logging')
    common.add_argument('--log-file', help='Also write logs to this file')

    qmo = argparse.ArgumentParser(add_help=False)
    qmo.add_argument('--qmo', choices=['oracle', 'model', 'fixed'], help='Mode decision source')
    qmo.add_argument('--qmo-checkpoint', help='QMO model checkpoint (with --qmo model)')
    qmo.add_argument('--mode', type=_mode, help='Adaptation mode for --qmo fixed (M0..M4)')
    qmo.add_argument('--threshold', type=float, help='Confidence needed to switch modes (default 0.70)')

    restore = argparse.ArgumentParser(add_help=False)
    restore.add_argument('--registry', help='Restoration model registry directory')
    restore.add_argument('--baseline-restore', action='store_true',
                         help='Invert adaptation without restoration models')

    parser = argparse.ArgumentParser(description='ViSTRA3 adaptive video coding')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('encode', parents=[common, qmo], help='Encode a sequence into a VST3 container')
    p.add_argument('input', help='Input .y4m (or .yuv with .meta sidecar)')
    p.add_argument('output', help='Output .vst3 file')
    p.add_argument('--qp', type=int, help='Base QP (default: first QP of the config list)')
    p.add_argument('--stats', help='Write per-segment stats CSV')
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser('decode', parents=[common, restore], help='Decode a VST3 container')
    p.add_argument('input', help='Input .vst3 file')
    p.add_argument('output', help='Output .y4m (or .yuv)')
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser('sweep', parents=[common, qmo, restore], help='Rate-quality sweep over base QPs')
    p.add_argument('inputs', nargs='+', help='Input sequences')
    p.add_argument('output', help='Output RD CSV')
    p.add_argument('--qps', type=_int_list, help='Comma-separated base QPs (default 22,27,32,37)')
    p.add_argument('--name', help='Sequence name for a single input (default: file stem)')
    p.add_argument('--label', help='Codec label written to the CSV')
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser('bd', help='BD-rate / BD-quality report')
    p.add_argument('test', help='Test RD CSV')
    p.add_argument('anchor', help='Anchor RD CSV')
    p.add_argument('--output', help='Write the report as CSV')
    p.add_argument('--verbose', action='store_true', help='Enable debug logging')
    p.add_argument('--log-file', help='Also write logs to this file')
    p.set_defaults(handler=cmd_bd, config=None)

    p = sub.add_parser('label', parents=[common], help='Generate oracle-labelled QMO training data')
    p.add_argument('sources', nargs='+', help='Source sequences')
    p.add_argument('--output', default='qmo_index.csv', help='Dataset index CSV')
    p.add_argument('--qps', type=_int_list, help='Base QPs to label (default 22,27,32,37)')
    p.add_argument('--num-crops', type=int, default=64, help='Random crops per source')
    p.add_argument('--crop-size', type=int, default=256, help='Crop width/height')
    p.add_argument('--crop-frames', type=int, default=32, help='Frames per crop')
    p.add_argument('--sub-crops', type=int, default=10, help='5-frame clips drawn per crop and QP')
    p.add_argument('--min-source-frames', type=int, default=64, help='Shortest accepted source, in frames')
    p.add_argument('--no-cache', action='store_true', help='Do not write the .npz clip cache')
    p.add_argument('--dry-run', action='store_true', help='Only count the samples, no encoding')
    p.set_defaults(handler=cmd_label)

    p = sub.add_parser('train-qmo', parents=[common], help='Train the QMO classifier')
    p.add_argument('dataset', help='Dataset index CSV written by label')
    p.add_argument('--output', required=True, help='Checkpoint path')
    p.add_argument('--epochs', type=int, default=10)
    p.add_argument('--lr', type=float, default=1e-4)
    p.add_argument('--batch-size', type=int, default=16)
    p.add_argument('--channels', type=_int_list, default=list(QMO_CHANNELS), help='Conv3D widths, e.g. 16,32,64')
    p.set_defaults(handler=cmd_train_qmo)

    p = sub.add_parser('train-restore', parents=[common], help='Train restoration models into a registry')
    p.add_argument('sources', nargs='+', help='Source sequences')
    p.add_argument('--registry', help='Registry directory')
    p.add_argument('--mode', type=_mode, help='Adaptation mode (M1..M4)')
    p.add_argument('--qp', type=int, help='Base QP')
    p.add_argument('--qps', type=_int_list, help='Base QPs for --all-keys (default 22,27,32,37)')
    p.add_argument('--all-keys', action='store_true', help='Train every (mode, base QP) key')
    p.add_argument('--num-patches', type=int, default=512)
    p.add_argument('--patch-size', type=int, default=PATCH_SIZE)
    p.add_argument('--epochs', type=int, default=50)
    p.add_argument('--lr', type=float, default=1e-4)
    p.add_argument('--batch-size', type=int, default=16)
    p.add_argument('--channels', type=int, default=RESTORE_CHANNELS)
    p.add_argument('--layers', type=int, default=RESTORE_LAYERS)
    p.set_defaults(handler=cmd_train_restore)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and return the exit status"""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.log_file)
    try:
        args.handler(args)
    except Vistra3Error as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"ERROR code={e.code} message={json.dumps(e.message)}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"❌ Unexpected error in {args.command}: {e}")
        print(f"ERROR code=internal message={json.dumps(str(e))}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
