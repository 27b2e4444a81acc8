#!/usr/bin/env python3
"""
Quantisation-mode optimisation (QMO)

Chooses an adaptation mode per segment, either by brute force against
an M0 anchor rate-quality curve (the oracle, also used to label training
data) or with a small 3-D CNN that looks at five frames plus a constant
QP plane. Per-window decisions are merged into segments of at least one
second.
"""

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from format_adaptation import apply_mode_sequence, invert_mode_sequence
from host_codec import HostCodec, StreamGeometry
from neural_network import (Conv3D, Dense, GlobalAvgPool, Model, ReLU, adam_step, as_tensor,
                            cross_entropy, softmax)
from rate_quality_metrics import QualityInterpolant, RateQualityCurve, RateQualityPoint
from vistra3_base import QP_MAX, QP_MIN, AdaptationMode, ModeOptimisationError, QpValue
from video_frames import VideoFrame, VideoSequence, read_y4m, sequence_psnr

logger = logging.getLogger(__name__)

QP_OFFSETS: Dict[AdaptationMode, int] = {
    AdaptationMode.M0: 0,
    AdaptationMode.M1: 6,
    AdaptationMode.M2: 6,
    AdaptationMode.M3: 12,
    AdaptationMode.M4: 0,
}
DEFAULT_QPS = (22, 27, 32, 37)
CLIP_FRAMES = 5
MIN_SOURCE_FRAMES = 64
CONFIDENCE_THRESHOLD = 0.70
GAIN_TOLERANCE_DB = 1e-9
QMO_CHANNELS = (16, 32, 64)
NUM_MODES = len(AdaptationMode)


def effective_qp(qp_base: int, mode: AdaptationMode) -> QpValue:
    """QP used for coding an adapted segment, clamped to [0, 51]"""
    qp = int(qp_base) - QP_OFFSETS[AdaptationMode(mode)]
    return QpValue(min(QP_MAX, max(QP_MIN, qp)))


@dataclass(frozen=True)
class ModeDecision:
    mode: AdaptationMode
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ModeOptimisationError('invalid-confidence', f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class SegmentDescriptor:
    start: int
    end: int
    mode: AdaptationMode
    qp_base: int
    qp_effective: int

    @property
    def frame_count(self) -> int:
        return self.end - self.start

    @property
    def frame_range(self) -> Tuple[int, int]:
        return self.start, self.end


@dataclass(frozen=True)
class ModePoint:
    """One measured (rate, PSNR_YUV) point of a mode at a base QP"""
    mode: AdaptationMode
    qp_base: int
    qp_effective: int
    rate: float
    quality: float
    bits: int


@dataclass(frozen=True)
class AnchorCurve:
    """M0 rate-quality points with an interpolant over log10(rate)"""
    curve: RateQualityCurve
    interpolant: QualityInterpolant

    def quality_at(self, rate: float) -> float:
        return self.interpolant(math.log10(rate))

    def covers(self, rate: float) -> bool:
        """True when `rate` lies inside the measured anchor rates"""
        log_rate = math.log10(rate)
        return bool(self.interpolant.log_rates[0] <= log_rate <= self.interpolant.log_rates[-1])


@dataclass(frozen=True)
class OracleResult:
    mode: AdaptationMode
    gains: Dict[AdaptationMode, float]
    points: Dict[AdaptationMode, ModePoint]
    candidates: Tuple[AdaptationMode, ...]


def measure_point(sequence: VideoSequence, codec: HostCodec, mode: AdaptationMode, qp_base: int) -> ModePoint:
    """Adapt, code, decode and baseline-invert; PSNR_YUV against the input"""
    adapted = apply_mode_sequence(sequence, mode)
    qp = effective_qp(qp_base, mode)
    payload, bits = codec.encode(adapted, qp)
    decoded = codec.decode(payload, StreamGeometry.of(adapted))
    restored = invert_mode_sequence(decoded, mode)
    quality = sequence_psnr(sequence, restored)
    return ModePoint(AdaptationMode(mode), int(qp_base), int(qp), bits / sequence.duration_seconds, quality, bits)


def build_anchor_curve(segment: VideoSequence, codec: HostCodec, qps: Sequence[int] = DEFAULT_QPS) -> AnchorCurve:
    if len(set(qps)) < 3:
        raise ModeOptimisationError('too-few-qps', f"an anchor curve needs at least 3 distinct QPs, got {list(qps)}")
    points = [measure_point(segment, codec, AdaptationMode.M0, qp) for qp in sorted(set(qps))]
    rates = [p.rate for p in points]
    if any(b >= a for a, b in zip(rates, rates[1:])):
        logger.warning(f"⚠️  Anchor rates are not monotone in QP: {[round(r) for r in rates]}")

    by_rate: Dict[float, ModePoint] = {}
    for point in points:
        if point.rate in by_rate:
            logger.warning(f"⚠️  Dropping anchor point qp={point.qp_base}: same rate as qp={by_rate[point.rate].qp_base}")
            continue
        by_rate[point.rate] = point
    curve = RateQualityCurve(
        tuple(RateQualityPoint(p.rate, p.quality, 'psnr_yuv', p.qp_base) for p in by_rate.values()),
        'psnr_yuv', 'anchor')
    return AnchorCurve(curve, QualityInterpolant(curve))


def pick_mode(gains: Dict[AdaptationMode, float]) -> AdaptationMode:
    """Largest positive gain wins, ties go to the lower mode index, else M0"""
    best, best_gain = AdaptationMode.M0, GAIN_TOLERANCE_DB
    for mode in sorted(gains):
        if gains[mode] > best_gain:
            best, best_gain = mode, gains[mode]
    return best


def evaluate_modes(segment: VideoSequence, qp_base: int, codec: HostCodec, anchor: AnchorCurve) -> OracleResult:
    """Measure M1..M4 against the anchor

    Gains outside the anchor rate range are extrapolated and reported, but
    only points inside the range are candidates for selection.
    """
    gains: Dict[AdaptationMode, float] = {}
    points: Dict[AdaptationMode, ModePoint] = {}
    for mode in (AdaptationMode.M1, AdaptationMode.M2, AdaptationMode.M3, AdaptationMode.M4):
        point = measure_point(segment, codec, mode, qp_base)
        points[mode] = point
        gains[mode] = point.quality - anchor.quality_at(point.rate)
        logger.debug(f"   {mode.name} qp={point.qp_effective}: rate={point.rate:.0f} bps "
                     f"psnr={point.quality:.3f} dB gain={gains[mode]:+.3f} dB")
    candidates = tuple(mode for mode, point in points.items() if anchor.covers(point.rate))
    skipped = [mode.name for mode in points if mode not in candidates]
    if skipped:
        logger.debug(f"   outside anchor rates: {', '.join(skipped)}")
    return OracleResult(pick_mode({mode: gains[mode] for mode in candidates}), gains, points, candidates)


def oracle_select_mode(segment: VideoSequence, qp_base: int, codec: HostCodec, anchor: AnchorCurve) -> AdaptationMode:
    return evaluate_modes(segment, qp_base, codec, anchor).mode


@dataclass
class QmoDatasetConfig:
    num_crops: int = 64
    crop_size: int = 256
    crop_frames: int = 32
    qps: Tuple[int, ...] = DEFAULT_QPS
    sub_crops: int = 10
    clip_frames: int = CLIP_FRAMES
    min_source_frames: int = MIN_SOURCE_FRAMES
    seed: int = 0

    def samples_per_source(self) -> int:
        return self.num_crops * len(self.qps) * self.sub_crops


@dataclass(frozen=True)
class QmoCropPlan:
    """One (crop, QP) labelling job and the clip starts drawn inside it"""
    source_index: int
    t0: int
    x0: int
    y0: int
    qp_base: int
    clip_starts: Tuple[int, ...]


@dataclass(frozen=True)
class QmoSample:
    clip: Tuple[VideoFrame, ...]
    qp_base: int
    label: AdaptationMode
    source_index: int = 0
    frame_start: int = 0
    x0: int = 0
    y0: int = 0

    def __post_init__(self):
        if len(self.clip) != CLIP_FRAMES:
            raise ModeOptimisationError('wrong-frame-count', f"a QMO clip has {CLIP_FRAMES} frames, got {len(self.clip)}")
        shapes = {(f.width, f.height) for f in self.clip}
        if len(shapes) != 1:
            raise ModeOptimisationError('geometry-mismatch', "clip frames differ in size")


def iter_qmo_plan(source_shapes: Sequence[Tuple[int, int, int]], config: QmoDatasetConfig) -> Iterator[List[QmoCropPlan]]:
    """Yield, per random crop, its labelling jobs (one per QP)

    `source_shapes` holds (frames, width, height) per source. Only the
    random positions are drawn here, so counting the plan needs no
    encoding.
    """
    rng = np.random.default_rng(config.seed)
    min_frames = max(config.min_source_frames, config.crop_frames)
    for index, (frames, width, height) in enumerate(source_shapes):
        if frames < min_frames or width < config.crop_size or height < config.crop_size:
            raise ModeOptimisationError(
                'source-too-small',
                f"source {index} is {width}x{height}x{frames}, needs at least "
                f"{config.crop_size}x{config.crop_size}x{min_frames}"
            )
        for _ in range(config.num_crops):
            t0 = int(rng.integers(0, frames - config.crop_frames + 1))
            x0 = 2 * int(rng.integers(0, (width - config.crop_size) // 2 + 1))
            y0 = 2 * int(rng.integers(0, (height - config.crop_size) // 2 + 1))
            jobs = []
            for qp in config.qps:
                starts = tuple(int(t0 + s) for s in rng.integers(0, config.crop_frames - config.clip_frames + 1,
                                                                 size=config.sub_crops))
                jobs.append(QmoCropPlan(index, t0, x0, y0, int(qp), starts))
            yield jobs


def count_qmo_samples(source_shapes: Sequence[Tuple[int, int, int]], config: QmoDatasetConfig) -> int:
    return sum(len(job.clip_starts) for jobs in iter_qmo_plan(source_shapes, config) for job in jobs)


def _crop_sequence(source: VideoSequence, start: int, frames: int, x0: int, y0: int, size: int) -> VideoSequence:
    return VideoSequence(tuple(f.crop(x0, y0, size, size) for f in source.frames[start:start + frames]),
                         source.frame_rate)


def _label_crop(sources: Sequence[VideoSequence], codec: HostCodec, jobs: List[QmoCropPlan],
                config: QmoDatasetConfig) -> List[QmoSample]:
    first = jobs[0]
    source = sources[first.source_index]
    crop = _crop_sequence(source, first.t0, config.crop_frames, first.x0, first.y0, config.crop_size)
    anchor = build_anchor_curve(crop, codec, config.qps)
    samples = []
    for job in jobs:
        label = oracle_select_mode(crop, job.qp_base, codec, anchor)
        for start in job.clip_starts:
            clip = tuple(f.crop(job.x0, job.y0, config.crop_size, config.crop_size)
                         for f in source.frames[start:start + config.clip_frames])
            samples.append(QmoSample(clip, job.qp_base, label, job.source_index, start, job.x0, job.y0))
    return samples


def generate_qmo_dataset(sources: Sequence[VideoSequence], codec: HostCodec,
                         config: Optional[QmoDatasetConfig] = None, jobs: int = 1) -> List[QmoSample]:
    """Label random crops with the oracle; deterministic for a given seed"""
    config = config or QmoDatasetConfig()
    shapes = [(len(s), s.width, s.height) for s in sources]
    plan = list(iter_qmo_plan(shapes, config))
    logger.info(f"🏷️  Labelling {len(plan)} crops x {len(config.qps)} QPs from {len(sources)} sources "
                f"({len(plan) * len(config.qps) * config.sub_crops} samples)")
    start_time = time.time()
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        results = list(executor.map(lambda crop_jobs: _label_crop(sources, codec, crop_jobs, config), plan))
    samples = [sample for batch in results for sample in batch]
    counts = {mode.name: sum(1 for s in samples if s.label == mode) for mode in AdaptationMode}
    logger.info(f"✅ Labelled {len(samples)} samples in {time.time() - start_time:.2f}s: {counts}")
    return samples


def save_qmo_dataset(samples: Sequence[QmoSample], index_path: str, source_paths: Sequence[str],
                     write_cache: bool = True) -> None:
    """Write the sample index CSV and, optionally, an .npz clip cache next to it"""
    if not samples:
        raise ModeOptimisationError('empty-dataset', "no samples to save")
    size = samples[0].clip[0].width
    rows = [{'source_path': source_paths[s.source_index], 'source_index': s.source_index,
             'frame_start': s.frame_start, 'x0': s.x0, 'y0': s.y0, 'crop_size': size,
             'qp_base': s.qp_base, 'label': s.label.name} for s in samples]
    pd.DataFrame(rows).to_csv(index_path, index=False)
    if write_cache:
        first = samples[0].clip[0]
        np.savez_compressed(
            f"{index_path}.npz",
            y=np.stack([[f.y for f in s.clip] for s in samples]),
            u=np.stack([[f.u for f in s.clip] for s in samples]),
            v=np.stack([[f.v for f in s.clip] for s in samples]),
            depths=np.array([first.container_bit_depth, first.effective_bit_depth]),
        )
    logger.info(f"💾 Saved {len(samples)} QMO samples to {index_path}")


def load_qmo_dataset(index_path: str) -> List[QmoSample]:
    try:
        index = pd.read_csv(index_path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ModeOptimisationError('io-failure', f"cannot read dataset index {index_path}: {e}") from e
    labels = [AdaptationMode.parse(text) for text in index['label']]
    cache_path = f"{index_path}.npz"
    samples = []
    if os.path.exists(cache_path):
        with np.load(cache_path) as cache:
            y, u, v = cache['y'], cache['u'], cache['v']
            cbd, ebd = (int(d) for d in cache['depths'])
        if len(y) != len(index):
            raise ModeOptimisationError('cache-mismatch', f"{cache_path} holds {len(y)} clips, index has {len(index)}")
        for i, row in enumerate(index.itertuples()):
            clip = tuple(VideoFrame(y[i, t], u[i, t], v[i, t], cbd, ebd) for t in range(y.shape[1]))
            samples.append(QmoSample(clip, int(row.qp_base), labels[i], int(row.source_index),
                                     int(row.frame_start), int(row.x0), int(row.y0)))
    else:
        loaded: Dict[str, VideoSequence] = {}
        for i, row in enumerate(index.itertuples()):
            if row.source_path not in loaded:
                loaded[row.source_path] = read_y4m(row.source_path)
            frames = loaded[row.source_path].frames[row.frame_start:row.frame_start + CLIP_FRAMES]
            clip = tuple(f.crop(int(row.x0), int(row.y0), int(row.crop_size), int(row.crop_size)) for f in frames)
            samples.append(QmoSample(clip, int(row.qp_base), labels[i], int(row.source_index),
                                     int(row.frame_start), int(row.x0), int(row.y0)))
    logger.info(f"📋 Loaded {len(samples)} QMO samples from {index_path}")
    return samples


def _upsample_chroma(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)[:height, :width]


def build_qmo_input(clip: Sequence[VideoFrame], qp_base: int) -> np.ndarray:
    """(4, T, H, W) float32: Y, U, V on the luma grid in [0, 1] and a QP plane"""
    if len(clip) != CLIP_FRAMES:
        raise ModeOptimisationError('wrong-frame-count', f"QMO expects {CLIP_FRAMES} frames, got {len(clip)}")
    height, width = clip[0].height, clip[0].width
    if any((f.width, f.height) != (width, height) for f in clip):
        raise ModeOptimisationError('geometry-mismatch', "clip frames differ in size")
    x = np.empty((4, len(clip), height, width), dtype=np.float32)
    for t, frame in enumerate(clip):
        scale = 1.0 / frame.peak
        x[0, t] = frame.y * scale
        x[1, t] = _upsample_chroma(frame.u, height, width) * scale
        x[2, t] = _upsample_chroma(frame.v, height, width) * scale
    x[3] = QpValue(qp_base) / float(QP_MAX)
    return x


def build_qmo_model(channels: Sequence[int] = QMO_CHANNELS, seed: int = 0, zero_head: bool = False,
                    dtype=np.float32) -> Model:
    """Three conv3d+ReLU stages (spatial stride 2), global pooling, FC to 5 logits"""
    rng = np.random.default_rng(seed)
    layers = []
    in_channels = 4
    for out_channels in channels:
        layers.append(Conv3D(in_channels, out_channels, kernel=3, stride=(1, 2, 2), padding=1, rng=rng, dtype=dtype))
        layers.append(ReLU())
        in_channels = out_channels
    layers.append(GlobalAvgPool())
    head = Dense(in_channels, NUM_MODES, rng=rng, dtype=dtype)
    if zero_head:
        head.params["weight"][...] = 0
    layers.append(head)
    return Model(layers, metadata={"kind": "qmo", "channels": list(channels)}, dtype=dtype)


def _decision(probabilities: np.ndarray) -> ModeDecision:
    index = int(np.argmax(probabilities))
    return ModeDecision(AdaptationMode(index), float(np.clip(probabilities[index], 0.0, 1.0)))


def qmo_forward(model: Model, clip: Sequence[VideoFrame], qp_base: int) -> ModeDecision:
    x = build_qmo_input(clip, qp_base)[None]
    probabilities = softmax(model.forward(x).astype(np.float64))[0]
    return _decision(probabilities)


def qmo_predict(model: Model, samples: Sequence[QmoSample], batch_size: int = 16) -> List[ModeDecision]:
    inputs = np.stack([build_qmo_input(s.clip, s.qp_base) for s in samples])
    probabilities = softmax(model.predict(inputs, batch_size).astype(np.float64))
    return [_decision(p) for p in probabilities]


def qmo_accuracy(model: Model, samples: Sequence[QmoSample]) -> float:
    decisions = qmo_predict(model, samples)
    return float(np.mean([d.mode == s.label for d, s in zip(decisions, samples)]))


def train_qmo(samples: Sequence[QmoSample], epochs: int = 10, lr: float = 1e-4, batch_size: int = 16,
              seed: int = 0, channels: Sequence[int] = QMO_CHANNELS, model: Optional[Model] = None) -> Model:
    """Minimise mean cross-entropy with ADAM"""
    if not samples:
        raise ModeOptimisationError('empty-dataset', "cannot train QMO on an empty dataset")
    model = model or build_qmo_model(channels, seed)
    inputs = as_tensor(np.stack([build_qmo_input(s.clip, s.qp_base) for s in samples]), model.dtype)
    labels = np.array([int(s.label) for s in samples], dtype=np.int64)
    model.check_shapes(inputs.shape[1:])
    rng = np.random.default_rng(seed)

    logger.info("=" * 60)
    logger.info(f"🧠 TRAINING QMO: {len(samples)} samples, {epochs} epochs, lr={lr}, batch={batch_size}")
    logger.info("=" * 60)
    for epoch in range(1, epochs + 1):
        start_time = time.time()
        order = rng.permutation(len(samples))
        total_loss, correct = 0.0, 0
        for begin in range(0, len(order), batch_size):
            batch = order[begin:begin + batch_size]
            logits = model.forward(inputs[batch])
            loss, grad = cross_entropy(logits, labels[batch])
            adam_step(model, model.backward(grad), lr)
            total_loss += loss * len(batch)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[batch]))
        mean_loss = total_loss / len(order)
        accuracy = correct / len(order)
        model.training_log.append({"epoch": epoch, "lr": lr, "loss": mean_loss, "accuracy": accuracy})
        logger.info(f"   epoch {epoch}/{epochs}: loss={mean_loss:.4f} accuracy={accuracy:.3f} "
                    f"({time.time() - start_time:.2f}s)")
    return model


def segment_sequence(decisions: Sequence[ModeDecision], frame_rate: Fraction, qp_base: int,
                     num_frames: Optional[int] = None, window: int = CLIP_FRAMES,
                     threshold: float = CONFIDENCE_THRESHOLD) -> List[SegmentDescriptor]:
    """Merge per-window decisions into segments of at least one second

    A new segment opens only when the incoming mode differs, its
    confidence reaches `threshold` and the current segment already spans
    ceil(frame_rate) frames. The first segment uses the first decision's
    mode if it is confident enough, else M0.
    """
    if not decisions:
        raise ModeOptimisationError('empty-decisions', "segmentation needs at least one decision")
    total = window * len(decisions) if num_frames is None else int(num_frames)
    if not window * (len(decisions) - 1) < total <= window * len(decisions):
        raise ModeOptimisationError('decision-count-mismatch',
                                    f"{len(decisions)} windows of {window} cannot cover {total} frames")
    min_frames = math.ceil(Fraction(frame_rate))

    first = decisions[0]
    current_mode = first.mode if first.confidence >= threshold else AdaptationMode.M0
    current_start = 0
    bounds: List[Tuple[int, int, AdaptationMode]] = []
    for index, decision in enumerate(decisions[1:], start=1):
        window_start = index * window
        if (decision.mode != current_mode and decision.confidence >= threshold
                and window_start - current_start >= min_frames):
            bounds.append((current_start, window_start, current_mode))
            current_mode, current_start = decision.mode, window_start
    bounds.append((current_start, total, current_mode))
    return [SegmentDescriptor(start, end, mode, int(qp_base), int(effective_qp(qp_base, mode)))
            for start, end, mode in bounds]
