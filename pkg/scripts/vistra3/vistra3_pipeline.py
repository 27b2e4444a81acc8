#!/usr/bin/env python3
"""
ViSTRA3 encoder/decoder pipeline

Encoder: per 5-frame window mode decision (oracle, QMO model or fixed
mode) -> segmentation -> per-segment adaptation and host encoding at the
effective QP -> VST3 container.

Decoder: container parse -> per-segment host decoding -> CNN restoration
(or baseline inversion) -> sequence at the original geometry and EBD.
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import pandas as pd

from format_adaptation import adapted_geometry, apply_mode_sequence, invert_mode_sequence
from host_codec import HostCodec, StreamGeometry, create_codec
from mode_optimisation import (CLIP_FRAMES, DEFAULT_QPS, ModeDecision, SegmentDescriptor, build_anchor_curve,
                               evaluate_modes, qmo_forward, segment_sequence)
from neural_network import Model, load_checkpoint
from rate_quality_metrics import RateQualityCurve, RateQualityPoint
from restoration_network import RestorationRegistry, restore_sequence
from vistra3_base import (AdaptationMode, ConfigError, FrameFormatError, PipelineConfig, PipelineStats,
                          ThreadSafeCounter, Vistra3Error)
from video_frames import VideoSequence, read_raw_yuv, read_y4m, sequence_psnr, write_raw_yuv, write_y4m
from vst3_container import ContainerHeader, SegmentEntry, Vst3Container, parse, serialize

logger = logging.getLogger(__name__)

STATS_COLUMNS = ['segment', 'start', 'end', 'frames', 'mode', 'qp_base', 'qp_effective',
                 'payload_bytes', 'container_bits']


def read_sequence(path: str) -> VideoSequence:
    """Y4M, or planar .yuv with a sidecar"""
    if path.lower().endswith('.yuv'):
        return read_raw_yuv(path)
    return read_y4m(path)


def write_sequence(sequence: VideoSequence, path: str) -> int:
    if path.lower().endswith('.yuv'):
        return write_raw_yuv(sequence, path)
    return write_y4m(sequence, path)


def window_clips(sequence: VideoSequence, window: int = CLIP_FRAMES) -> List[VideoSequence]:
    """Consecutive windows; the last one is padded by repeating its final frame"""
    clips = []
    for start in range(0, len(sequence), window):
        frames = sequence.frames[start:start + window]
        frames = frames + (frames[-1],) * (window - len(frames))
        clips.append(VideoSequence(frames, sequence.frame_rate))
    return clips


@dataclass
class EncodeResult:
    data: bytes
    container: Vst3Container
    segments: List[SegmentDescriptor]

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)

    def stats_frame(self) -> pd.DataFrame:
        rows = []
        for index, (seg, entry) in enumerate(zip(self.segments, self.container.segments)):
            rows.append({'segment': index, 'start': seg.start, 'end': seg.end, 'frames': seg.frame_count,
                         'mode': seg.mode.name, 'qp_base': seg.qp_base, 'qp_effective': seg.qp_effective,
                         'payload_bytes': entry.payload_length, 'container_bits': self.total_bits})
        return pd.DataFrame(rows, columns=STATS_COLUMNS)


class Vistra3Pipeline:
    """Adaptive coding around a host codec"""

    def __init__(self, config: PipelineConfig, codec: Optional[HostCodec] = None, for_decode: bool = False):
        config.validate(for_decode=for_decode)
        self.config = config
        self.codec = codec or create_codec(config)
        self.stats = PipelineStats()
        self.bits_counter = ThreadSafeCounter()
        self._qmo_model: Optional[Model] = None
        self._registry: Optional[RestorationRegistry] = None
        if config.qmo_source == 'model' and not for_decode:
            self._qmo_model = load_checkpoint(config.qmo_checkpoint)
            if self._qmo_model.metadata.get("kind") != "qmo":
                raise ConfigError('wrong-checkpoint-kind', f"{config.qmo_checkpoint} is not a QMO checkpoint")
        if for_decode and not config.baseline_restore:
            self._registry = RestorationRegistry(config.registry_path)

    def _anchor_qps(self) -> Tuple[int, ...]:
        qps = tuple(sorted(set(self.config.qp_list)))
        return qps if len(qps) >= 3 else DEFAULT_QPS

    def choose_decisions(self, sequence: VideoSequence, qp_base: int) -> List[ModeDecision]:
        """One decision per 5-frame window"""
        clips = window_clips(sequence)
        source = self.config.qmo_source
        if source == 'fixed':
            return [ModeDecision(self.config.fixed_mode, 1.0) for _ in clips]
        if source == 'model':
            return [qmo_forward(self._qmo_model, clip.frames, qp_base) for clip in clips]

        def oracle(clip: VideoSequence) -> ModeDecision:
            anchor = build_anchor_curve(clip, self.codec, self._anchor_qps())
            return ModeDecision(evaluate_modes(clip, qp_base, self.codec, anchor).mode, 1.0)

        logger.info(f"🔍 Oracle mode search over {len(clips)} windows at qp_base={qp_base}")
        with ThreadPoolExecutor(max_workers=self.config.jobs) as executor:
            return list(executor.map(oracle, clips))

    def _encode_segment(self, sequence: VideoSequence, seg: SegmentDescriptor) -> Tuple[bytes, int]:
        adapted = apply_mode_sequence(sequence.slice(*seg.frame_range), seg.mode)
        try:
            payload, bits = self.codec.encode(adapted, seg.qp_effective)
        except Vistra3Error:
            self.stats.failed_calls += 1
            logger.error(f"❌ Segment frames {seg.start}-{seg.end - 1} ({seg.mode.name}, qp {seg.qp_effective}) failed")
            raise
        self.bits_counter.increment(bits)
        logger.debug(f"   frames {seg.start}-{seg.end - 1} {seg.mode.name} qp={seg.qp_effective}: {bits} bits")
        return payload, bits

    def encode(self, sequence: VideoSequence, qp_base: int) -> EncodeResult:
        if not sequence.frames:
            raise FrameFormatError('empty-sequence', "cannot encode an empty sequence")
        start_time = time.time()
        logger.info("=" * 60)
        logger.info(f"🎬 ENCODING {len(sequence)} frames {sequence.width}x{sequence.height} "
                    f"at qp_base={qp_base} ({self.config.qmo_source} QMO)")
        logger.info("=" * 60)

        decisions = self.choose_decisions(sequence, qp_base)
        segments = segment_sequence(decisions, sequence.frame_rate, qp_base, num_frames=len(sequence),
                                    threshold=self.config.confidence_threshold)
        logger.info(f"🧩 {len(segments)} segments: "
                    + ", ".join(f"{s.start}-{s.end - 1}:{s.mode.name}" for s in segments))

        self.bits_counter.reset()
        with ThreadPoolExecutor(max_workers=self.config.jobs) as executor:
            coded = list(executor.map(lambda seg: self._encode_segment(sequence, seg), segments))
        payloads = [payload for payload, _ in coded]

        rate = sequence.frame_rate
        header = ContainerHeader(sequence.width, sequence.height, rate.numerator, rate.denominator,
                                 sequence.container_bit_depth, sequence.effective_bit_depth, len(sequence))
        entries = [SegmentEntry(s.mode, s.qp_base, s.qp_effective, s.frame_count, len(p))
                   for s, p in zip(segments, payloads)]
        data = serialize(entries, payloads, header)
        container = Vst3Container(header, tuple(entries), tuple(payloads))

        elapsed = time.time() - start_time
        self.stats.total_frames += len(sequence)
        self.stats.total_segments += len(segments)
        self.stats.total_bits += 8 * len(data)
        self.stats.side_info_bits += 8 * container.side_info_bytes()
        self.stats.codec_calls += len(segments)
        self.stats.encode_seconds += elapsed
        for seg in segments:
            self.stats.count_mode(seg.mode, seg.frame_count)
        logger.info(f"✅ Encoded {len(data)} bytes ({self.bits_counter.get_value()} payload bits) in {elapsed:.2f}s")
        return EncodeResult(data, container, segments)

    def _decode_segment(self, header: ContainerHeader, entry: SegmentEntry, payload: bytes) -> VideoSequence:
        width, height, ebd = adapted_geometry(header.width, header.height, header.original_ebd, entry.mode)
        geometry = StreamGeometry(width, height, header.frame_rate, header.container_bit_depth, ebd, entry.frame_count)
        decoded = self.codec.decode(payload, geometry)
        if len(decoded) != entry.frame_count:
            raise FrameFormatError('frame-count-mismatch',
                                   f"{entry.mode.name} segment decoded to {len(decoded)} frames, expected {entry.frame_count}")
        if entry.mode == AdaptationMode.M0:
            return decoded
        if self._registry is None:
            return invert_mode_sequence(decoded, entry.mode)
        model = self._registry.load(entry.mode, entry.qp_base)
        return restore_sequence(decoded, entry.mode, model, expected_size=(header.width, header.height))

    def decode(self, data: bytes) -> VideoSequence:
        start_time = time.time()
        container = parse(data)
        header = container.header
        logger.info(f"📦 {container.describe()}")
        with ThreadPoolExecutor(max_workers=self.config.jobs) as executor:
            parts = list(executor.map(lambda item: self._decode_segment(header, *item),
                                      zip(container.segments, container.payloads)))
        frames = tuple(frame for part in parts for frame in part.frames)
        result = VideoSequence(frames, header.frame_rate)
        if (result.width, result.height, result.effective_bit_depth) != (header.width, header.height, header.original_ebd):
            raise FrameFormatError('geometry-mismatch', f"decoded {result.width}x{result.height} EBD "
                                                        f"{result.effective_bit_depth} does not match the header")
        elapsed = time.time() - start_time
        self.stats.decode_seconds += elapsed
        self.stats.codec_calls += len(container.segments)
        logger.info(f"✅ Decoded {len(frames)} frames in {elapsed:.2f}s")
        return result

    def sweep(self, sequence: VideoSequence, name: str, qps: Optional[Sequence[int]] = None,
              decoder: Optional['Vistra3Pipeline'] = None) -> RateQualityCurve:
        """Full encode/decode per qp_base; rate from container bytes and duration"""
        decoder = decoder or self
        points = []
        for qp in qps or self.config.qp_list:
            start_time = time.time()
            result = self.encode(sequence, qp)
            encode_seconds = time.time() - start_time
            start_time = time.time()
            decoded = decoder.decode(result.data)
            decode_seconds = time.time() - start_time
            rate = result.total_bits / sequence.duration_seconds
            quality = sequence_psnr(sequence, decoded)
            logger.info(f"📈 {name} qp={qp}: {rate:.0f} bps, PSNR_YUV {quality:.3f} dB")
            points.append(RateQualityPoint(rate, quality, 'psnr_yuv', int(qp), encode_seconds, decode_seconds))
        return RateQualityCurve(tuple(points), 'psnr_yuv', self.config.label, name)


def sequence_name(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]
