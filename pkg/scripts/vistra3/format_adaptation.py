#!/usr/bin/env python3
"""
Format adaptation: effective bit depth shifts and Lanczos3 2:1 resampling

Each adaptation mode maps to a (spatial factor, bit shift) pair. The
forward direction reduces the format before coding, the baseline inverse
restores the original format without any learned model:

    M0, M4  identity
    M1      EBD - 1          inverse: EBD + 1
    M2      2:1 spatial      inverse: 1:2 spatial
    M3      spatial, EBD - 1 inverse: EBD + 1, then spatial
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Tuple

import numpy as np

from vistra3_base import AdaptationError, AdaptationMode
from video_frames import VideoFrame, VideoSequence, chroma_size

logger = logging.getLogger(__name__)

LANCZOS_ORDER = 3


@dataclass(frozen=True)
class ResampleSpec:
    spatial_factor: int
    bit_shift: int


RESAMPLE_SPECS: Dict[AdaptationMode, ResampleSpec] = {
    AdaptationMode.M0: ResampleSpec(1, 0),
    AdaptationMode.M1: ResampleSpec(1, 1),
    AdaptationMode.M2: ResampleSpec(2, 0),
    AdaptationMode.M3: ResampleSpec(2, 1),
    AdaptationMode.M4: ResampleSpec(1, 0),
}


def ebd_down(frame: VideoFrame, shift_bits: int) -> VideoFrame:
    """Right-shift every sample; EBD drops by `shift_bits`"""
    if shift_bits < 0:
        raise AdaptationError('invalid-shift', f"shift must be non-negative, got {shift_bits}")
    if frame.effective_bit_depth - shift_bits < 1:
        raise AdaptationError(
            'bit-depth-underflow',
            f"shifting EBD {frame.effective_bit_depth} down by {shift_bits} leaves less than 1 bit"
        )
    y, u, v = (plane >> shift_bits for plane in frame.planes)
    return frame.replace(y=y, u=u, v=v, effective_bit_depth=frame.effective_bit_depth - shift_bits)


def ebd_up(frame: VideoFrame, shift_bits: int) -> VideoFrame:
    """Left-shift every sample; EBD rises by `shift_bits`"""
    if shift_bits < 0:
        raise AdaptationError('invalid-shift', f"shift must be non-negative, got {shift_bits}")
    if frame.effective_bit_depth + shift_bits > frame.container_bit_depth:
        raise AdaptationError(
            'bit-depth-overflow',
            f"EBD {frame.effective_bit_depth} + {shift_bits} exceeds container depth {frame.container_bit_depth}"
        )
    y, u, v = (plane << shift_bits for plane in frame.planes)
    return frame.replace(y=y, u=u, v=v, effective_bit_depth=frame.effective_bit_depth + shift_bits)


def lanczos3_weight(x: float) -> float:
    """Lanczos3 kernel: sinc(x) * sinc(x / 3) on |x| < 3, zero elsewhere"""
    if x == 0:
        return 1.0
    if abs(x) >= LANCZOS_ORDER or float(x).is_integer():
        return 0.0
    return float(np.sinc(x) * np.sinc(x / LANCZOS_ORDER))


def _lanczos3(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < LANCZOS_ORDER, np.sinc(x) * np.sinc(x / LANCZOS_ORDER), 0.0)


@lru_cache(maxsize=64)
def resample_matrix(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """(n_out, n_in) Lanczos3 resampling matrix along one axis

    `scale` is input samples per output sample: 2.0 decimates, 0.5
    interpolates. Output sample i sits at input coordinate
    (i + 0.5) * scale - 0.5. For decimation the kernel is stretched by
    `scale`. Taps beyond the edge replicate the border sample and every
    row sums to 1.
    """
    stretch = max(scale, 1.0)
    support = LANCZOS_ORDER * stretch
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        centre = (i + 0.5) * scale - 0.5
        taps = np.arange(math.floor(centre - support) + 1, math.ceil(centre + support))
        weights = _lanczos3((taps - centre) / stretch)
        weights /= weights.sum()
        np.add.at(matrix[i], np.clip(taps, 0, n_in - 1), weights)
    matrix.setflags(write=False)
    return matrix


def _resample_plane(plane: np.ndarray, out_shape: Tuple[int, int], scale: float, peak: int) -> np.ndarray:
    rows = resample_matrix(plane.shape[0], out_shape[0], scale)
    cols = resample_matrix(plane.shape[1], out_shape[1], scale)
    filtered = rows @ plane.astype(np.float64) @ cols.T
    return np.clip(np.floor(filtered + 0.5), 0, peak).astype(np.uint16)


def spatial_down(frame: VideoFrame, factor: int = 2) -> VideoFrame:
    """2:1 Lanczos3 decimation of all planes"""
    if factor != 2:
        raise AdaptationError('unsupported-factor', f"only 2:1 resampling is supported, got {factor}")
    if frame.width % factor or frame.height % factor:
        raise AdaptationError(
            'indivisible-dimensions',
            f"{frame.width}x{frame.height} is not divisible by {factor}"
        )
    width, height = frame.width // factor, frame.height // factor
    cw, ch = chroma_size(width, height)
    y = _resample_plane(frame.y, (height, width), float(factor), frame.peak)
    u = _resample_plane(frame.u, (ch, cw), float(factor), frame.peak)
    v = _resample_plane(frame.v, (ch, cw), float(factor), frame.peak)
    return frame.replace(y=y, u=u, v=v)


def spatial_up(frame: VideoFrame, factor: int = 2) -> VideoFrame:
    """1:2 Lanczos3 interpolation of all planes"""
    if factor != 2:
        raise AdaptationError('unsupported-factor', f"only 1:2 resampling is supported, got {factor}")
    width, height = frame.width * factor, frame.height * factor
    cw, ch = chroma_size(width, height)
    y = _resample_plane(frame.y, (height, width), 1.0 / factor, frame.peak)
    u = _resample_plane(frame.u, (ch, cw), 1.0 / factor, frame.peak)
    v = _resample_plane(frame.v, (ch, cw), 1.0 / factor, frame.peak)
    return frame.replace(y=y, u=u, v=v)


def apply_mode(frame: VideoFrame, mode: AdaptationMode) -> VideoFrame:
    spec = RESAMPLE_SPECS[AdaptationMode(mode)]
    if spec.spatial_factor > 1:
        frame = spatial_down(frame, spec.spatial_factor)
    if spec.bit_shift:
        frame = ebd_down(frame, spec.bit_shift)
    return frame


def invert_mode_baseline(frame: VideoFrame, mode: AdaptationMode) -> VideoFrame:
    spec = RESAMPLE_SPECS[AdaptationMode(mode)]
    if spec.bit_shift:
        frame = ebd_up(frame, spec.bit_shift)
    if spec.spatial_factor > 1:
        frame = spatial_up(frame, spec.spatial_factor)
    return frame


def apply_mode_sequence(sequence: VideoSequence, mode: AdaptationMode) -> VideoSequence:
    return sequence.map_frames(lambda frame: apply_mode(frame, mode))


def invert_mode_sequence(sequence: VideoSequence, mode: AdaptationMode) -> VideoSequence:
    return sequence.map_frames(lambda frame: invert_mode_baseline(frame, mode))


def adapted_geometry(width: int, height: int, effective_bit_depth: int, mode: AdaptationMode) -> Tuple[int, int, int]:
    """(width, height, EBD) of a frame after `apply_mode`"""
    spec = RESAMPLE_SPECS[AdaptationMode(mode)]
    return (width // spec.spatial_factor, height // spec.spatial_factor,
            effective_bit_depth - spec.bit_shift)
