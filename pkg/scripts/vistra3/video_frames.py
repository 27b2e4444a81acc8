#!/usr/bin/env python3
"""
Planar YUV 4:2:0 frames and sequences, Y4M / raw YUV I/O and PSNR

Samples of 8-bit content are carried as uint8 on disk, 10-bit content as
little-endian 16-bit words (Y4M colourspace tag C420p10). In memory every
plane is a read-only uint16 numpy array.
"""

import configparser
import logging
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from vistra3_base import FrameFormatError, parse_frame_rate

logger = logging.getLogger(__name__)

Y4M_MAGIC = b"YUV4MPEG2"
FRAME_INDICATOR = b"FRAME"
PSNR_CAP_DB = 100.0
SUPPORTED_BIT_DEPTHS = (8, 10)

# colourspace tag -> container bit depth
Y4M_COLORSPACES: Dict[str, int] = {
    "420": 8,
    "420jpeg": 8,
    "420paldv": 8,
    "420mpeg2": 8,
    "420p10": 10,
}


def chroma_size(width: int, height: int) -> Tuple[int, int]:
    """(width, height) of a 4:2:0 chroma plane"""
    return (width + 1) // 2, (height + 1) // 2


def _frozen_plane(plane: np.ndarray) -> np.ndarray:
    arr = np.array(plane, dtype=np.uint16, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VideoFrame:
    """One 4:2:0 frame; planes are immutable after construction"""
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    container_bit_depth: int = 8
    effective_bit_depth: int = 8
    chroma_format: str = "420"

    def __post_init__(self):
        for name in ("y", "u", "v"):
            plane = np.asarray(getattr(self, name))
            if plane.ndim != 2:
                raise FrameFormatError('malformed-frame', f"plane {name} must be 2-D, got shape {plane.shape}")
            if plane.size and (plane.min() < 0 or plane.max() >= (1 << self.effective_bit_depth)):
                raise FrameFormatError(
                    'sample-out-of-range',
                    f"plane {name} has samples outside [0, {(1 << self.effective_bit_depth) - 1}]"
                )
            object.__setattr__(self, name, _frozen_plane(plane))
        if self.chroma_format != "420":
            raise FrameFormatError('unsupported-chroma', f"only 4:2:0 is supported, got {self.chroma_format}")
        if self.container_bit_depth not in SUPPORTED_BIT_DEPTHS:
            raise FrameFormatError('unsupported-bit-depth', f"container bit depth {self.container_bit_depth} not in {SUPPORTED_BIT_DEPTHS}")
        if not 1 <= self.effective_bit_depth <= self.container_bit_depth:
            raise FrameFormatError(
                'invalid-bit-depth',
                f"effective bit depth {self.effective_bit_depth} outside [1, {self.container_bit_depth}]"
            )
        height, width = self.y.shape
        if width < 1 or height < 1:
            raise FrameFormatError('malformed-frame', "frame must have at least one luma sample")
        cw, ch = chroma_size(width, height)
        if self.u.shape != (ch, cw) or self.v.shape != (ch, cw):
            raise FrameFormatError(
                'dimension-mismatch',
                f"chroma planes {self.u.shape}/{self.v.shape} do not match luma {self.y.shape}"
            )

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def height(self) -> int:
        return self.y.shape[0]

    @property
    def planes(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.y, self.u, self.v

    @property
    def peak(self) -> int:
        return (1 << self.effective_bit_depth) - 1

    def replace(self, y=None, u=None, v=None, effective_bit_depth=None) -> 'VideoFrame':
        return VideoFrame(
            y=self.y if y is None else y,
            u=self.u if u is None else u,
            v=self.v if v is None else v,
            container_bit_depth=self.container_bit_depth,
            effective_bit_depth=self.effective_bit_depth if effective_bit_depth is None else effective_bit_depth,
        )

    def with_effective_bit_depth(self, effective_bit_depth: int) -> 'VideoFrame':
        """Relabel the EBD, clipping samples that exceed the new range"""
        peak = (1 << effective_bit_depth) - 1
        return VideoFrame(
            y=np.minimum(self.y, peak), u=np.minimum(self.u, peak), v=np.minimum(self.v, peak),
            container_bit_depth=self.container_bit_depth,
            effective_bit_depth=effective_bit_depth,
        )

    def crop(self, x0: int, y0: int, width: int, height: int) -> 'VideoFrame':
        """Crop at an even luma offset with even dimensions"""
        if x0 % 2 or y0 % 2 or width % 2 or height % 2:
            raise FrameFormatError('odd-crop', "4:2:0 crops need even offsets and sizes")
        if x0 < 0 or y0 < 0 or x0 + width > self.width or y0 + height > self.height:
            raise FrameFormatError('crop-out-of-bounds', f"crop {width}x{height}+{x0}+{y0} exceeds {self.width}x{self.height}")
        cx, cy = x0 // 2, y0 // 2
        cw, ch = width // 2, height // 2
        return self.replace(
            y=self.y[y0:y0 + height, x0:x0 + width],
            u=self.u[cy:cy + ch, cx:cx + cw],
            v=self.v[cy:cy + ch, cx:cx + cw],
        )

    def equals(self, other: 'VideoFrame') -> bool:
        return (
            self.container_bit_depth == other.container_bit_depth
            and self.effective_bit_depth == other.effective_bit_depth
            and all(np.array_equal(a, b) for a, b in zip(self.planes, other.planes))
        )


@dataclass(frozen=True, eq=False)
class VideoSequence:
    """Ordered frames sharing geometry and bit depths"""
    frames: Tuple[VideoFrame, ...]
    frame_rate: Fraction = Fraction(30)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "frame_rate", Fraction(self.frame_rate))
        if self.frame_rate <= 0:
            raise FrameFormatError('invalid-frame-rate', f"frame rate must be positive, got {self.frame_rate}")
        if self.frames:
            first = self.frames[0]
            for index, frame in enumerate(self.frames[1:], start=1):
                if (frame.width, frame.height) != (first.width, first.height):
                    raise FrameFormatError('dimension-mismatch', f"frame {index} is {frame.width}x{frame.height}, expected {first.width}x{first.height}")
                if (frame.container_bit_depth, frame.effective_bit_depth) != (first.container_bit_depth, first.effective_bit_depth):
                    raise FrameFormatError('bit-depth-mismatch', f"frame {index} bit depths differ from frame 0")

    def __len__(self) -> int:
        return len(self.frames)

    def _first(self) -> VideoFrame:
        if not self.frames:
            raise FrameFormatError('empty-sequence', "sequence has no frames")
        return self.frames[0]

    @property
    def width(self) -> int:
        return self._first().width

    @property
    def height(self) -> int:
        return self._first().height

    @property
    def container_bit_depth(self) -> int:
        return self._first().container_bit_depth

    @property
    def effective_bit_depth(self) -> int:
        return self._first().effective_bit_depth

    @property
    def duration_seconds(self) -> float:
        return float(len(self.frames) / self.frame_rate)

    def slice(self, start: int, end: int) -> 'VideoSequence':
        return VideoSequence(self.frames[start:end], self.frame_rate)

    def map_frames(self, fn) -> 'VideoSequence':
        return VideoSequence(tuple(fn(frame) for frame in self.frames), self.frame_rate)

    def equals(self, other: 'VideoSequence') -> bool:
        return (
            self.frame_rate == other.frame_rate
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.frames, other.frames))
        )


def _frame_layout(width: int, height: int, container_bit_depth: int) -> Tuple[int, int, int]:
    """(luma samples, chroma samples per plane, bytes per frame)"""
    cw, ch = chroma_size(width, height)
    luma, chroma = width * height, cw * ch
    bytes_per_sample = 1 if container_bit_depth == 8 else 2
    return luma, chroma, (luma + 2 * chroma) * bytes_per_sample


def _decode_planes(buffer: bytes, width: int, height: int, container_bit_depth: int) -> Tuple[np.ndarray, ...]:
    luma, chroma, _ = _frame_layout(width, height, container_bit_depth)
    dtype = np.dtype(np.uint8) if container_bit_depth == 8 else np.dtype('<u2')
    arr = np.frombuffer(buffer, dtype=dtype, count=luma + 2 * chroma)
    cw, ch = chroma_size(width, height)
    y = arr[:luma].reshape(height, width)
    u = arr[luma:luma + chroma].reshape(ch, cw)
    v = arr[luma + chroma:].reshape(ch, cw)
    return y, u, v


def _encode_planes(frame: VideoFrame) -> bytes:
    dtype = np.dtype(np.uint8) if frame.container_bit_depth == 8 else np.dtype('<u2')
    return b"".join(np.ascontiguousarray(plane, dtype=dtype).tobytes() for plane in frame.planes)


def _frames_from_buffer(data: bytes, start: int, width: int, height: int, container_bit_depth: int,
                        effective_bit_depth: int, source: str) -> List[VideoFrame]:
    """Parse FRAME blocks from `data` starting at byte offset `start`"""
    _, _, frame_bytes = _frame_layout(width, height, container_bit_depth)
    frames: List[VideoFrame] = []
    offset = start
    while offset < len(data):
        line_end = data.find(b"\n", offset)
        if line_end < 0 or not data.startswith(FRAME_INDICATOR, offset):
            raise FrameFormatError('truncated-frame', f"{source}: missing FRAME header at byte {offset}")
        payload_start = line_end + 1
        if payload_start + frame_bytes > len(data):
            raise FrameFormatError(
                'truncated-frame',
                f"{source}: frame {len(frames)} needs {frame_bytes} bytes at offset {payload_start}, "
                f"only {len(data) - payload_start} remain"
            )
        y, u, v = _decode_planes(data[payload_start:payload_start + frame_bytes], width, height, container_bit_depth)
        frames.append(VideoFrame(y, u, v, container_bit_depth, effective_bit_depth))
        offset = payload_start + frame_bytes
    return frames


def _parse_y4m_header(line: bytes, source: str) -> Dict[str, object]:
    tokens = line.split()
    if not tokens or tokens[0] != Y4M_MAGIC:
        raise FrameFormatError('malformed-magic', f"{source}: not a YUV4MPEG2 stream")
    header: Dict[str, object] = {"colorspace": "420", "frame_rate": None, "extensions": {}}
    try:
        for token in tokens[1:]:
            key, value = chr(token[0]), token[1:].decode('ascii')
            if key == 'W':
                header["width"] = int(value)
            elif key == 'H':
                header["height"] = int(value)
            elif key == 'F':
                header["frame_rate"] = parse_frame_rate(value)
            elif key == 'I':
                if value not in ('p', '?'):
                    raise FrameFormatError('unsupported-interlace', f"{source}: interlaced content (I{value}) is not supported")
            elif key == 'C':
                header["colorspace"] = value
            elif key == 'X':
                name, _, ext_value = value.partition('=')
                header["extensions"][name] = ext_value
            # A (aspect) and unknown tags are ignored
    except (ValueError, IndexError, UnicodeDecodeError) as e:
        raise FrameFormatError('malformed-header', f"{source}: malformed Y4M header: {e}") from e
    if "width" not in header or "height" not in header or header["frame_rate"] is None:
        raise FrameFormatError('malformed-header', f"{source}: Y4M header must carry W, H and F")
    if header["colorspace"] not in Y4M_COLORSPACES:
        raise FrameFormatError('unsupported-chroma', f"{source}: unsupported colourspace C{header['colorspace']}")
    if header["width"] < 2 or header["height"] < 2 or header["width"] % 2 or header["height"] % 2:
        raise FrameFormatError('malformed-header', f"{source}: luma dimensions must be even, got {header['width']}x{header['height']}")
    return header


def read_y4m(path: str) -> VideoSequence:
    """Read a 4:2:0 Y4M file (8-bit or C420p10)"""
    try:
        with open(os.path.expanduser(path), 'rb') as f:
            data = f.read()
    except OSError as e:
        raise FrameFormatError('io-failure', f"cannot read {path}: {e}") from e

    header_end = data.find(b"\n")
    if header_end < 0:
        if data.startswith(Y4M_MAGIC) or not data:
            raise FrameFormatError('malformed-header', f"{path}: missing header terminator")
        raise FrameFormatError('malformed-magic', f"{path}: not a YUV4MPEG2 stream")
    header = _parse_y4m_header(data[:header_end], path)
    container_bit_depth = Y4M_COLORSPACES[header["colorspace"]]
    effective_bit_depth = container_bit_depth
    ebd_text = header["extensions"].get("EBD")
    if ebd_text:
        try:
            effective_bit_depth = int(ebd_text)
        except ValueError:
            raise FrameFormatError('malformed-header', f"{path}: bad XEBD value {ebd_text!r}") from None

    frames = _frames_from_buffer(data, header_end + 1, header["width"], header["height"],
                                 container_bit_depth, effective_bit_depth, path)
    logger.debug(f"Read {len(frames)} frames {header['width']}x{header['height']} "
                 f"@ {header['frame_rate']} fps, {container_bit_depth}-bit from {path}")
    return VideoSequence(tuple(frames), header["frame_rate"])


def read_y4m_shape(path: str) -> Tuple[int, int, int]:
    """(frames, width, height) from the header and file size, without reading pixels

    Assumes bare FRAME markers, which is what write_y4m produces.
    """
    try:
        with open(os.path.expanduser(path), 'rb') as f:
            line = f.readline(4096)
            size = os.fstat(f.fileno()).st_size
    except OSError as e:
        raise FrameFormatError('io-failure', f"cannot read {path}: {e}") from e
    if not line.endswith(b"\n"):
        raise FrameFormatError('malformed-header', f"{path}: missing header terminator")
    header = _parse_y4m_header(line[:-1], path)
    _, _, frame_bytes = _frame_layout(header["width"], header["height"], Y4M_COLORSPACES[header["colorspace"]])
    frames = (size - len(line)) // (len(FRAME_INDICATOR) + 1 + frame_bytes)
    return frames, header["width"], header["height"]


def y4m_header(sequence: VideoSequence) -> bytes:
    tag = "420jpeg" if sequence.container_bit_depth == 8 else "420p10"
    rate = sequence.frame_rate
    fields = [f"YUV4MPEG2 W{sequence.width} H{sequence.height} F{rate.numerator}:{rate.denominator} Ip A1:1 C{tag}"]
    if sequence.effective_bit_depth != sequence.container_bit_depth:
        fields.append(f"XEBD={sequence.effective_bit_depth}")
    return (" ".join(fields) + "\n").encode('ascii')


def write_y4m(sequence: VideoSequence, path: str) -> int:
    """Write a sequence as Y4M; returns the number of bytes written"""
    if not sequence.frames:
        raise FrameFormatError('empty-sequence', f"refusing to write empty sequence to {path}")
    chunks = [y4m_header(sequence)]
    for frame in sequence.frames:
        chunks.append(FRAME_INDICATOR + b"\n")
        chunks.append(_encode_planes(frame))
    data = b"".join(chunks)
    try:
        with open(os.path.expanduser(path), 'wb') as f:
            f.write(data)
    except OSError as e:
        raise FrameFormatError('io-failure', f"cannot write {path}: {e}") from e
    return len(data)


def read_raw_yuv(path: str, sidecar: Optional[str] = None) -> VideoSequence:
    """Read planar .yuv using a key=value sidecar (width, height, fps, bit_depth)

    The sidecar defaults to `<path>.meta`.
    """
    sidecar = sidecar or f"{path}.meta"
    parser = configparser.ConfigParser()
    try:
        with open(os.path.expanduser(sidecar), 'r', encoding='utf-8') as f:
            parser.read_string("[raw]\n" + f.read())
        meta = parser["raw"]
        width, height = int(meta["width"]), int(meta["height"])
        frame_rate = parse_frame_rate(meta.get("fps", "30"))
        container_bit_depth = int(meta.get("bit_depth", "8"))
    except OSError as e:
        raise FrameFormatError('io-failure', f"cannot read sidecar {sidecar}: {e}") from e
    except (KeyError, ValueError, configparser.Error) as e:
        raise FrameFormatError('malformed-header', f"{sidecar}: malformed raw YUV sidecar: {e}") from e
    if container_bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise FrameFormatError('unsupported-bit-depth', f"{sidecar}: bit_depth {container_bit_depth} not supported")

    try:
        with open(os.path.expanduser(path), 'rb') as f:
            data = f.read()
    except OSError as e:
        raise FrameFormatError('io-failure', f"cannot read {path}: {e}") from e
    _, _, frame_bytes = _frame_layout(width, height, container_bit_depth)
    if len(data) % frame_bytes:
        raise FrameFormatError(
            'truncated-frame',
            f"{path}: {len(data)} bytes is not a whole number of {frame_bytes}-byte frames "
            f"(partial frame at offset {len(data) - len(data) % frame_bytes})"
        )
    frames = []
    for offset in range(0, len(data), frame_bytes):
        y, u, v = _decode_planes(data[offset:offset + frame_bytes], width, height, container_bit_depth)
        frames.append(VideoFrame(y, u, v, container_bit_depth, container_bit_depth))
    return VideoSequence(tuple(frames), frame_rate)


def write_raw_yuv(sequence: VideoSequence, path: str, sidecar: Optional[str] = None) -> int:
    """Write planar .yuv plus its sidecar; returns payload bytes written"""
    if not sequence.frames:
        raise FrameFormatError('empty-sequence', f"refusing to write empty sequence to {path}")
    data = b"".join(_encode_planes(frame) for frame in sequence.frames)
    rate = sequence.frame_rate
    meta = (f"width={sequence.width}\nheight={sequence.height}\n"
            f"fps={rate.numerator}/{rate.denominator}\nbit_depth={sequence.container_bit_depth}\n")
    try:
        with open(os.path.expanduser(path), 'wb') as f:
            f.write(data)
        with open(os.path.expanduser(sidecar or f"{path}.meta"), 'w', encoding='utf-8') as f:
            f.write(meta)
    except OSError as e:
        raise FrameFormatError('io-failure', f"cannot write {path}: {e}") from e
    return len(data)


def psnr_plane(a: np.ndarray, b: np.ndarray, peak: int) -> float:
    """PSNR in dB, capped at 100 dB for identical planes"""
    if a.shape != b.shape:
        raise FrameFormatError('dimension-mismatch', f"plane shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2, dtype=np.float64)
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * math.log10(float(peak) ** 2 / mse)))


def combine_psnr_yuv(psnr_y: float, psnr_u: float, psnr_v: float) -> float:
    """Weighted YUV PSNR (6*Y + U + V) / 8"""
    return (6.0 * psnr_y + psnr_u + psnr_v) / 8.0


def psnr_yuv(a: VideoFrame, b: VideoFrame) -> float:
    if (a.width, a.height) != (b.width, b.height):
        raise FrameFormatError('dimension-mismatch', f"frames differ in size: {a.width}x{a.height} vs {b.width}x{b.height}")
    if (a.container_bit_depth, a.effective_bit_depth) != (b.container_bit_depth, b.effective_bit_depth):
        raise FrameFormatError('bit-depth-mismatch', "frames differ in bit depth")
    peak = a.peak
    return combine_psnr_yuv(*(psnr_plane(pa, pb, peak) for pa, pb in zip(a.planes, b.planes)))


def sequence_psnr(reference: VideoSequence, test: VideoSequence) -> float:
    """Mean per-frame PSNR_YUV"""
    if len(reference) != len(test):
        raise FrameFormatError('length-mismatch', f"sequences have {len(reference)} and {len(test)} frames")
    if not reference.frames:
        raise FrameFormatError('empty-sequence', "cannot measure PSNR of an empty sequence")
    return float(np.mean([psnr_yuv(a, b) for a, b in zip(reference.frames, test.frames)]))

