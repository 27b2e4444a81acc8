#!/usr/bin/env python3
"""
Base classes and data structures for the ViSTRA3 adaptive coding pipeline

Shared by every component: adaptation modes, the exception hierarchy,
pipeline configuration, run statistics and the thread-safe counter used
when segments are coded concurrently.
"""

import configparser
import logging
import os
import sys
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from typing import Dict, List, Optional

# Configure logging
logger = logging.getLogger(__name__)

QP_MIN = 0
QP_MAX = 51

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class AdaptationMode(IntEnum):
    """Per-segment format adaptation; the value is the container flag byte"""
    M0 = 0  # no adaptation
    M1 = 1  # effective bit depth reduced by 1
    M2 = 2  # spatial resolution halved
    M3 = 3  # spatial halved and bit depth reduced by 1
    M4 = 4  # full format, CNN post-processing only

    @classmethod
    def parse(cls, text: str) -> 'AdaptationMode':
        """Accept 'M2', 'm2' or '2'"""
        value = text.strip().upper()
        if value.startswith('M'):
            value = value[1:]
        try:
            return cls(int(value))
        except ValueError:
            raise ConfigError('invalid-mode', f"unknown adaptation mode: {text!r}") from None


class Vistra3Error(Exception):
    """Root of all pipeline errors; `code` is stable and machine readable"""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class FrameFormatError(Vistra3Error):
    pass


class AdaptationError(Vistra3Error):
    pass


class CodecError(Vistra3Error):
    pass


class NetworkError(Vistra3Error):
    pass


class ModeOptimisationError(Vistra3Error):
    pass


class RestorationError(Vistra3Error):
    pass


class MetricsError(Vistra3Error):
    pass


class ContainerError(Vistra3Error):
    pass


class ConfigError(Vistra3Error):
    pass


class QpValue(int):
    """Quantisation parameter, an integer in [0, 51]"""

    def __new__(cls, value: int) -> 'QpValue':
        if isinstance(value, bool) or int(value) != value:
            raise ConfigError('invalid-qp', f"QP must be an integer, got {value!r}")
        if not QP_MIN <= int(value) <= QP_MAX:
            raise ConfigError('invalid-qp', f"QP {value} outside [{QP_MIN}, {QP_MAX}]")
        return super().__new__(cls, int(value))


def parse_frame_rate(text: str) -> Fraction:
    """Parse '30', '30:1', '30000/1001' or '29.97' into a positive Fraction"""
    value = text.strip().replace(':', '/')
    try:
        rate = Fraction(value)
    except (ValueError, ZeroDivisionError):
        raise ConfigError('invalid-frame-rate', f"cannot parse frame rate {text!r}") from None
    if rate <= 0:
        raise ConfigError('invalid-frame-rate', f"frame rate must be positive, got {text!r}")
    return rate


@dataclass
class PipelineConfig:
    """Pipeline settings; INI values are overridden by explicit CLI flags"""
    codec: str = 'toy'
    encode_template: Optional[str] = None
    decode_template: Optional[str] = None
    codec_input_format: str = 'y4m'
    codec_timeout: float = 600.0
    work_dir: Optional[str] = None
    qp_list: List[int] = field(default_factory=lambda: [22, 27, 32, 37])
    qmo_source: str = 'oracle'
    qmo_checkpoint: Optional[str] = None
    fixed_mode: AdaptationMode = AdaptationMode.M0
    confidence_threshold: float = 0.70
    registry_path: Optional[str] = None
    baseline_restore: bool = True
    label: str = 'vistra3'
    seed: int = 0
    jobs: int = 1

    def validate(self, for_decode: bool = False) -> None:
        if self.codec not in ('toy', 'external'):
            raise ConfigError('invalid-codec', f"codec must be 'toy' or 'external', got {self.codec!r}")
        if self.codec == 'external' and not (self.encode_template and self.decode_template):
            raise ConfigError('missing-codec-template', "external codec needs encode_template and decode_template")
        if not self.qp_list:
            raise ConfigError('empty-qp-list', "qp_list must name at least one QP")
        for qp in self.qp_list:
            QpValue(qp)
        if self.qmo_source not in ('oracle', 'model', 'fixed'):
            raise ConfigError('invalid-qmo-source', f"qmo_source must be oracle, model or fixed, got {self.qmo_source!r}")
        if self.qmo_source == 'model':
            if not self.qmo_checkpoint or not os.path.exists(os.path.expanduser(self.qmo_checkpoint)):
                raise ConfigError('missing-checkpoint', f"QMO checkpoint not found: {self.qmo_checkpoint}")
        if for_decode and not self.baseline_restore:
            if not self.registry_path or not os.path.isdir(os.path.expanduser(self.registry_path)):
                raise ConfigError('missing-registry', f"restoration registry not found: {self.registry_path}")
        if self.jobs < 1:
            raise ConfigError('invalid-jobs', f"jobs must be >= 1, got {self.jobs}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError('invalid-threshold', f"confidence threshold must be in [0, 1], got {self.confidence_threshold}")


def load_pipeline_config(config_file: Optional[str], overrides: Optional[Dict[str, object]] = None) -> PipelineConfig:
    """Build a PipelineConfig from an INI file, then apply non-None overrides"""
    config = PipelineConfig()
    if config_file:
        path = os.path.expanduser(config_file)
        if not os.path.exists(path):
            raise ConfigError('missing-config', f"Config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        logger.info(f"📋 Loaded configuration from {path}")

        try:
            if parser.has_section('pipeline'):
                section = parser['pipeline']
                config.qp_list = [int(qp) for qp in section.get('qp_list', '22,27,32,37').split(',') if qp.strip()]
                config.label = section.get('label', config.label)
                config.seed = section.getint('seed', config.seed)
                config.jobs = section.getint('jobs', config.jobs)
                config.work_dir = section.get('work_dir', config.work_dir)
            if parser.has_section('codec'):
                section = parser['codec']
                config.codec = section.get('type', config.codec)
                config.encode_template = section.get('encode_template', config.encode_template)
                config.decode_template = section.get('decode_template', config.decode_template)
                config.codec_input_format = section.get('input_format', config.codec_input_format)
                config.codec_timeout = section.getfloat('timeout', config.codec_timeout)
            if parser.has_section('qmo'):
                section = parser['qmo']
                config.qmo_source = section.get('source', config.qmo_source)
                config.qmo_checkpoint = section.get('checkpoint', config.qmo_checkpoint)
                if 'fixed_mode' in section:
                    config.fixed_mode = AdaptationMode.parse(section['fixed_mode'])
                config.confidence_threshold = section.getfloat('confidence_threshold', config.confidence_threshold)
            if parser.has_section('restore'):
                section = parser['restore']
                config.registry_path = section.get('registry', config.registry_path)
                config.baseline_restore = section.getboolean('baseline', config.baseline_restore)
        except ValueError as e:
            raise ConfigError('malformed-config', f"invalid value in {path}: {e}") from e

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if not hasattr(config, key):
            raise ConfigError('unknown-option', f"unknown configuration option: {key}")
        setattr(config, key, value)
    return config


@dataclass
class PipelineStats:
    """Statistics for one encode/decode run"""
    total_frames: int = 0
    total_segments: int = 0
    total_bits: int = 0
    side_info_bits: int = 0
    codec_calls: int = 0
    failed_calls: int = 0
    encode_seconds: float = 0.0
    decode_seconds: float = 0.0
    mode_counts: Dict[str, int] = field(default_factory=dict)

    def count_mode(self, mode: AdaptationMode, frames: int) -> None:
        self.mode_counts[mode.name] = self.mode_counts.get(mode.name, 0) + frames


class ThreadSafeCounter:
    """Thread-safe counter for tracking totals across worker threads"""
    def __init__(self):
        self._value = 0
        self._lock = threading.Lock()

    def increment(self, amount=1):
        with self._lock:
            self._value += amount

    def get_value(self):
        with self._lock:
            return self._value

    def reset(self):
        with self._lock:
            self._value = 0


def configure_logging(verbose: bool = False, log_file: Optional[str] = None) -> None:
    """Configure the root logger for command-line use"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(os.path.expanduser(log_file)))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )


def print_stats(stats: PipelineStats, title: str = "PIPELINE SUMMARY") -> None:
    """Log a run summary block"""
    logger.info("=" * 60)
    logger.info(f"📊 {title}")
    logger.info("=" * 60)
    logger.info(f"🎞️  Frames: {stats.total_frames}")
    logger.info(f"🧩 Segments: {stats.total_segments}")
    logger.info(f"📦 Total bits: {stats.total_bits} (side info: {stats.side_info_bits})")
    logger.info(f"🔧 Codec calls: {stats.codec_calls} (failed: {stats.failed_calls})")
    if stats.encode_seconds:
        logger.info(f"⏱️  Encode time: {stats.encode_seconds:.2f}s")
    if stats.decode_seconds:
        logger.info(f"⏱️  Decode time: {stats.decode_seconds:.2f}s")
    for mode, frames in sorted(stats.mode_counts.items()):
        logger.info(f"   {mode}: {frames} frames")
    logger.info("=" * 60)
