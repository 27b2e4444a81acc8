#!/usr/bin/env python3
"""
Built-in intra-only toy codec

Per frame and plane: subtract the rounded plane mean (level shift),
split into 8x8 blocks, orthonormal 2-D DCT-II, uniform quantisation with
Qstep = 2^((qp - 4) / 6), zig-zag scan and Exp-Golomb coding. Each block
is coded as ue(n) followed by n se(level) codes, where n is one past the
last non-zero zig-zag position (0 for an all-zero block).

Payload layout (little-endian):

    magic "TOYC" | version u8 | width u16 | height u16 | frames u32 |
    fps_num u32 | fps_den u32 | container depth u8 | EBD u8 | qp u8 |
    bit length u64 | Exp-Golomb bit stream (MSB first, zero padded)
"""

import logging
import struct
from fractions import Fraction
from typing import List, Optional, Tuple

import numpy as np
from scipy.fft import dctn, idctn

from host_codec import HostCodec, StreamGeometry
from vistra3_base import CodecError, QpValue
from video_frames import VideoFrame, VideoSequence, chroma_size

logger = logging.getLogger(__name__)

TOY_MAGIC = b"TOYC"
TOY_VERSION = 1
BLOCK = 8
HEADER = struct.Struct("<4sBHHIIIBBBQ")
CHUNK = 1 << 18


def _zigzag_order(n: int = BLOCK) -> np.ndarray:
    """Raster indices of an n x n block in JPEG zig-zag order"""
    cells = sorted(((i, j) for i in range(n) for j in range(n)),
                   key=lambda c: (c[0] + c[1], c[0] if (c[0] + c[1]) % 2 else -c[0]))
    return np.array([i * n + j for i, j in cells], dtype=np.int64)


ZIGZAG = _zigzag_order()


def qstep(qp: int) -> float:
    return 2.0 ** ((qp - 4) / 6.0)


def signed_to_code(levels: np.ndarray) -> np.ndarray:
    """se(v) mapping: v > 0 -> 2v - 1, v <= 0 -> -2v"""
    levels = levels.astype(np.int64)
    return np.where(levels > 0, 2 * levels - 1, -2 * levels).astype(np.uint64)


def code_to_signed(codes: np.ndarray) -> np.ndarray:
    codes = codes.astype(np.int64)
    return np.where(codes % 2 == 1, (codes + 1) // 2, -(codes // 2))


def write_exp_golomb(codes: np.ndarray) -> Tuple[bytes, int]:
    """Pack unsigned Exp-Golomb codewords; returns (bytes, bit length)"""
    chunks: List[np.ndarray] = []
    for start in range(0, codes.size, CHUNK):
        value = codes[start:start + CHUNK].astype(np.uint64) + np.uint64(1)
        nbits = np.frexp(value.astype(np.float64))[1].astype(np.int64)
        length = 2 * nbits - 1
        width = int(length.max())
        shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
        bits = ((value[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
        keep = np.arange(width)[None, :] >= (width - length)[:, None]
        chunks.append(bits[keep])
    stream = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint8)
    return np.packbits(stream).tobytes(), int(stream.size)


def read_exp_golomb(bits: np.ndarray) -> np.ndarray:
    """Decode a bit array made only of unsigned Exp-Golomb codewords"""
    n = bits.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    ones = np.flatnonzero(bits)
    next_one = np.full(n + 1, n, dtype=np.int64)
    next_one[ones] = ones
    next_one = np.minimum.accumulate(next_one[::-1])[::-1]
    nxt = next_one.tolist()

    starts: List[int] = []
    zeros: List[int] = []
    pos = 0
    while pos < n:
        one = nxt[pos]
        z = one - pos
        end = one + z + 1
        if end > n:
            raise CodecError('corrupt-payload', f"Exp-Golomb codeword at bit {pos} runs past the end of the stream")
        starts.append(one)
        zeros.append(z)
        pos = end

    start_arr = np.array(starts, dtype=np.int64)
    zero_arr = np.array(zeros, dtype=np.int64)
    values = np.empty(start_arr.size, dtype=np.int64)
    for begin in range(0, start_arr.size, CHUNK):
        s = start_arr[begin:begin + CHUNK]
        z = zero_arr[begin:begin + CHUNK]
        offsets = np.arange(int(z.max()) + 1)
        valid = offsets[None, :] <= z[:, None]
        idx = np.minimum(s[:, None] + offsets[None, :], n - 1)
        shift = np.where(valid, z[:, None] - offsets[None, :], 0)
        weighted = np.where(valid, bits[idx].astype(np.int64) << shift, 0)
        values[begin:begin + CHUNK] = weighted.sum(axis=1) - 1
    return values


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3).reshape(-1, BLOCK, BLOCK)


def _from_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return blocks.reshape(h // BLOCK, w // BLOCK, BLOCK, BLOCK).transpose(0, 2, 1, 3).reshape(h, w)


def _padded(n: int) -> int:
    return -(-n // BLOCK) * BLOCK


def _encode_plane(plane: np.ndarray, step: float) -> np.ndarray:
    """Codewords for one plane: level shift, then per-block n and levels"""
    offset = int(np.floor(plane.mean(dtype=np.float64) + 0.5))
    h, w = plane.shape
    padded = np.pad(plane.astype(np.float64), ((0, _padded(h) - h), (0, _padded(w) - w)), mode='edge')
    coeffs = dctn(_to_blocks(padded - offset), type=2, norm='ortho', axes=(1, 2))
    levels = (np.sign(coeffs) * np.floor(np.abs(coeffs) / step + 0.5)).astype(np.int64)
    scanned = levels.reshape(-1, BLOCK * BLOCK)[:, ZIGZAG]

    nonzero = scanned != 0
    counts = BLOCK * BLOCK - np.argmax(nonzero[:, ::-1], axis=1)
    counts[~nonzero.any(axis=1)] = 0

    table = np.concatenate([counts[:, None].astype(np.uint64), signed_to_code(scanned)], axis=1)
    mask = np.concatenate([np.ones((counts.size, 1), dtype=bool),
                           np.arange(BLOCK * BLOCK)[None, :] < counts[:, None]], axis=1)
    return np.concatenate([np.array([offset], dtype=np.uint64), table[mask]])


def _decode_plane(codes: np.ndarray, code_list: List[int], pos: int, h: int, w: int,
                  step: float, peak: int) -> Tuple[np.ndarray, int]:
    """Rebuild one plane starting at codeword `pos`; returns (plane, next pos)"""
    ph, pw = _padded(h), _padded(w)
    num_blocks = (ph // BLOCK) * (pw // BLOCK)
    total = len(code_list)
    if pos >= total:
        raise CodecError('corrupt-payload', "stream ended before a plane header")
    offset = code_list[pos]
    pos += 1

    starts = np.empty(num_blocks, dtype=np.int64)
    counts = np.empty(num_blocks, dtype=np.int64)
    for b in range(num_blocks):
        if pos >= total:
            raise CodecError('corrupt-payload', "stream ended inside a plane")
        n = code_list[pos]
        if n > BLOCK * BLOCK:
            raise CodecError('corrupt-payload', f"block coefficient count {n} exceeds {BLOCK * BLOCK}")
        starts[b] = pos + 1
        counts[b] = n
        pos += 1 + n
    if pos > total:
        raise CodecError('corrupt-payload', "stream ended inside a block")

    scanned = np.zeros((num_blocks, BLOCK * BLOCK), dtype=np.int64)
    coded = int(counts.sum())
    if coded:
        rows = np.repeat(np.arange(num_blocks), counts)
        first = np.repeat(np.cumsum(counts) - counts, counts)
        cols = np.arange(coded) - first
        scanned[rows, cols] = code_to_signed(codes[np.repeat(starts, counts) + cols])

    levels = np.zeros_like(scanned)
    levels[:, ZIGZAG] = scanned
    blocks = idctn(levels.reshape(-1, BLOCK, BLOCK) * step, type=2, norm='ortho', axes=(1, 2))
    plane = _from_blocks(blocks, ph, pw)[:h, :w] + offset
    return np.clip(np.floor(plane + 0.5), 0, peak).astype(np.uint16), pos


class ToyIntraCodec(HostCodec):
    """Deterministic 8x8 DCT intra codec"""

    name = "toy"

    def encode(self, sequence: VideoSequence, qp: int) -> Tuple[bytes, int]:
        qp = QpValue(qp)
        if not sequence.frames:
            raise CodecError('empty-sequence', "cannot encode an empty sequence")
        if sequence.width % BLOCK or sequence.height % BLOCK:
            raise CodecError(
                'unaligned-dimensions',
                f"{sequence.width}x{sequence.height} is not a multiple of {BLOCK}"
            )
        step = qstep(qp)
        codes = [_encode_plane(plane, step) for frame in sequence.frames for plane in frame.planes]
        stream, bit_length = write_exp_golomb(np.concatenate(codes))
        rate = sequence.frame_rate
        header = HEADER.pack(TOY_MAGIC, TOY_VERSION, sequence.width, sequence.height, len(sequence),
                             rate.numerator, rate.denominator, sequence.container_bit_depth,
                             sequence.effective_bit_depth, int(qp), bit_length)
        payload = header + stream
        logger.debug(f"Toy codec: {len(sequence)} frames at qp={qp} -> {len(payload)} bytes")
        return payload, 8 * len(payload)

    def decode(self, payload: bytes, geometry: Optional[StreamGeometry] = None) -> VideoSequence:
        if len(payload) < HEADER.size:
            raise CodecError('corrupt-payload', f"payload of {len(payload)} bytes is shorter than the {HEADER.size}-byte header")
        (magic, version, width, height, num_frames, fps_num, fps_den,
         container_bit_depth, effective_bit_depth, qp, bit_length) = HEADER.unpack_from(payload)
        if magic != TOY_MAGIC:
            raise CodecError('corrupt-payload', f"bad toy codec magic {magic!r}")
        if version != TOY_VERSION:
            raise CodecError('corrupt-payload', f"unsupported toy codec version {version}")
        if fps_den == 0 or fps_num == 0 or not 1 <= effective_bit_depth <= container_bit_depth:
            raise CodecError('corrupt-payload', "invalid toy codec header")
        if len(payload) - HEADER.size < -(-bit_length // 8):
            raise CodecError('corrupt-payload', f"stream truncated: {bit_length} bits declared, "
                                                f"{8 * (len(payload) - HEADER.size)} present")

        bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8, offset=HEADER.size))[:bit_length]
        codes = read_exp_golomb(bits)
        code_list = codes.tolist()
        step = qstep(qp)
        peak = (1 << effective_bit_depth) - 1
        cw, ch = chroma_size(width, height)

        frames = []
        pos = 0
        for _ in range(num_frames):
            y, pos = _decode_plane(codes, code_list, pos, height, width, step, peak)
            u, pos = _decode_plane(codes, code_list, pos, ch, cw, step, peak)
            v, pos = _decode_plane(codes, code_list, pos, ch, cw, step, peak)
            frames.append(VideoFrame(y, u, v, container_bit_depth, effective_bit_depth))
        if pos != len(code_list):
            raise CodecError('corrupt-payload', f"{len(code_list) - pos} unexpected trailing codewords")
        return VideoSequence(tuple(frames), Fraction(fps_num, fps_den))
