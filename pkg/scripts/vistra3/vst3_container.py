#!/usr/bin/env python3
"""
VST3 container: host-codec payloads plus per-segment side information

Layout (all fields little-endian, see docs/FORMAT.md):

    header   26 bytes  magic "VST3", version u16, width u16, height u16,
                       fps_num u32, fps_den u32, container depth u8,
                       original EBD u8, frame count u32, segment count u16
    table    12 bytes per segment: mode flag u8, qp_base u8,
                       qp_effective u8, reserved u8 (0), frame count u32,
                       payload length u32
    payloads concatenated in table order
"""

import logging
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Sequence, Tuple

from vistra3_base import QP_MAX, AdaptationMode, ContainerError

logger = logging.getLogger(__name__)

VST3_MAGIC = b"VST3"
VST3_VERSION = 1
HEADER = struct.Struct("<4sHHHIIBBIH")
SEGMENT = struct.Struct("<BBBBII")


@dataclass(frozen=True)
class ContainerHeader:
    width: int
    height: int
    fps_num: int
    fps_den: int
    container_bit_depth: int
    original_ebd: int
    frame_count: int
    version: int = VST3_VERSION

    @property
    def frame_rate(self) -> Fraction:
        return Fraction(self.fps_num, self.fps_den)


@dataclass(frozen=True)
class SegmentEntry:
    mode: AdaptationMode
    qp_base: int
    qp_effective: int
    frame_count: int
    payload_length: int


@dataclass(frozen=True)
class Vst3Container:
    header: ContainerHeader
    segments: Tuple[SegmentEntry, ...]
    payloads: Tuple[bytes, ...]

    def side_info_bytes(self) -> int:
        return HEADER.size + SEGMENT.size * len(self.segments)

    def describe(self) -> str:
        h = self.header
        lines = [f"VST3 v{h.version}: {h.width}x{h.height} @ {h.fps_num}/{h.fps_den} fps, "
                 f"{h.container_bit_depth}-bit container (EBD {h.original_ebd}), {h.frame_count} frames"]
        start = 0
        for index, seg in enumerate(self.segments):
            lines.append(f"  [{index}] frames {start}-{start + seg.frame_count - 1} {seg.mode.name} "
                         f"qp {seg.qp_base}->{seg.qp_effective} {seg.payload_length} bytes")
            start += seg.frame_count
        return "\n".join(lines)


def _validate(header: ContainerHeader, segments: Sequence[SegmentEntry], payloads: Sequence[bytes]) -> None:
    if header.version != VST3_VERSION:
        raise ContainerError('version-mismatch', f"cannot write container version {header.version}")
    if not (0 < header.width < 1 << 16 and 0 < header.height < 1 << 16):
        raise ContainerError('invalid-header', f"dimensions {header.width}x{header.height} out of range")
    if header.fps_num <= 0 or header.fps_den <= 0:
        raise ContainerError('invalid-header', "frame rate terms must be positive")
    if not 1 <= header.original_ebd <= header.container_bit_depth <= 16:
        raise ContainerError('invalid-header', f"bit depths {header.container_bit_depth}/{header.original_ebd} are inconsistent")
    if len(segments) != len(payloads):
        raise ContainerError('payload-count-mismatch', f"{len(segments)} segments but {len(payloads)} payloads")
    if len(segments) >= 1 << 16:
        raise ContainerError('too-many-segments', f"{len(segments)} segments do not fit the table")
    for index, (seg, payload) in enumerate(zip(segments, payloads)):
        if int(seg.mode) not in range(5):
            raise ContainerError('invalid-mode-flag', f"segment {index} has mode flag {int(seg.mode)}")
        if not (0 <= seg.qp_base <= QP_MAX and 0 <= seg.qp_effective <= QP_MAX):
            raise ContainerError('invalid-qp', f"segment {index} QPs {seg.qp_base}/{seg.qp_effective} out of range")
        if seg.frame_count <= 0:
            raise ContainerError('invalid-segment', f"segment {index} has no frames")
        if seg.payload_length != len(payload):
            raise ContainerError('payload-length-mismatch',
                                 f"segment {index} declares {seg.payload_length} bytes, payload has {len(payload)}")
    total = sum(seg.frame_count for seg in segments)
    if total != header.frame_count:
        raise ContainerError('segment-sum-mismatch', f"segments cover {total} frames, header says {header.frame_count}")


def serialize(segments: Sequence[SegmentEntry], payloads: Sequence[bytes], header: ContainerHeader) -> bytes:
    _validate(header, segments, payloads)
    chunks = [HEADER.pack(VST3_MAGIC, header.version, header.width, header.height, header.fps_num,
                          header.fps_den, header.container_bit_depth, header.original_ebd,
                          header.frame_count, len(segments))]
    for seg in segments:
        chunks.append(SEGMENT.pack(int(seg.mode), seg.qp_base, seg.qp_effective, 0,
                                   seg.frame_count, seg.payload_length))
    chunks.extend(payloads)
    return b"".join(chunks)


def parse(data: bytes) -> Vst3Container:
    if len(data) < len(VST3_MAGIC) or data[:len(VST3_MAGIC)] != VST3_MAGIC:
        raise ContainerError('bad-magic', "not a VST3 container")
    if len(data) < HEADER.size:
        raise ContainerError('truncated-header', f"header needs {HEADER.size} bytes, got {len(data)}")
    (_, version, width, height, fps_num, fps_den, container_bit_depth, original_ebd,
     frame_count, segment_count) = HEADER.unpack_from(data)
    if version != VST3_VERSION:
        raise ContainerError('version-mismatch', f"unsupported container version {version}")
    header = ContainerHeader(width, height, fps_num, fps_den, container_bit_depth, original_ebd, frame_count, version)
    if width == 0 or height == 0 or fps_num == 0 or fps_den == 0:
        raise ContainerError('invalid-header', "zero dimension or frame rate term in header")
    if not 1 <= original_ebd <= container_bit_depth:
        raise ContainerError('invalid-header', f"EBD {original_ebd} exceeds container depth {container_bit_depth}")

    offset = HEADER.size
    table_end = offset + SEGMENT.size * segment_count
    if len(data) < table_end:
        raise ContainerError('truncated-table', f"segment table truncated at offset {len(data)} (needs {table_end})")
    segments: List[SegmentEntry] = []
    for index in range(segment_count):
        flag, qp_base, qp_effective, reserved, seg_frames, length = SEGMENT.unpack_from(data, offset)
        if flag > 4:
            raise ContainerError('invalid-mode-flag', f"segment {index} at offset {offset} has mode flag {flag:#04x}")
        if reserved != 0:
            raise ContainerError('invalid-segment', f"segment {index} reserved byte is {reserved:#04x}")
        if qp_base > QP_MAX or qp_effective > QP_MAX:
            raise ContainerError('invalid-qp', f"segment {index} QPs {qp_base}/{qp_effective} out of range")
        if seg_frames == 0:
            raise ContainerError('invalid-segment', f"segment {index} has no frames")
        segments.append(SegmentEntry(AdaptationMode(flag), qp_base, qp_effective, seg_frames, length))
        offset += SEGMENT.size

    total = sum(seg.frame_count for seg in segments)
    if total != frame_count:
        raise ContainerError('segment-sum-mismatch', f"segments cover {total} frames, header says {frame_count}")

    payloads: List[bytes] = []
    for index, seg in enumerate(segments):
        if offset + seg.payload_length > len(data):
            raise ContainerError('truncated-payload', f"payload {index} truncated at offset {len(data)} "
                                                      f"(expected {seg.payload_length} bytes from offset {offset})")
        payloads.append(bytes(data[offset:offset + seg.payload_length]))
        offset += seg.payload_length
    if offset != len(data):
        raise ContainerError('trailing-bytes', f"{len(data) - offset} unexpected bytes after offset {offset}")
    return Vst3Container(header, tuple(segments), tuple(payloads))
