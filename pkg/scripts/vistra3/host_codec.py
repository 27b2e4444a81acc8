#!/usr/bin/env python3
"""
Host codec interface and the external (subprocess) codec wrapper

Any codec that turns a VideoSequence plus a QP into bytes and back can
sit under the pipeline. External encoders/decoders are driven through
argv templates with the placeholders {input}, {output}, {qp}, {width},
{height} and {fps}; templates are split with shlex and substituted per
token, so no shell is involved.

Example templates for a copy-through stub:

    encode_template = cp {input} {output}
    decode_template = cp {input} {output}
"""

import logging
import os
import shlex
import subprocess
import tempfile
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Tuple

from vistra3_base import CodecError, PipelineConfig, QpValue
from video_frames import VideoSequence, read_raw_yuv, read_y4m, write_raw_yuv, write_y4m

logger = logging.getLogger(__name__)

PLACEHOLDERS = ("input", "output", "qp", "width", "height", "fps")


@dataclass(frozen=True)
class StreamGeometry:
    """What a decoder needs to know when the payload does not say it"""
    width: int
    height: int
    frame_rate: Fraction
    container_bit_depth: int
    effective_bit_depth: int
    num_frames: int

    @classmethod
    def of(cls, sequence: VideoSequence) -> 'StreamGeometry':
        return cls(sequence.width, sequence.height, sequence.frame_rate,
                   sequence.container_bit_depth, sequence.effective_bit_depth, len(sequence))


class HostCodec(ABC):
    """Deterministic encode/decode pair operating on whole sequences"""

    name = "host"

    @abstractmethod
    def encode(self, sequence: VideoSequence, qp: int) -> Tuple[bytes, int]:
        """Return (payload, bits)"""

    @abstractmethod
    def decode(self, payload: bytes, geometry: Optional[StreamGeometry] = None) -> VideoSequence:
        """Return the reconstructed sequence"""


def substitute_template(template: str, values: dict) -> List[str]:
    """Split a command template into argv and fill placeholders per token"""
    try:
        tokens = shlex.split(template)
    except ValueError as e:
        raise CodecError('malformed-template', f"cannot parse command template {template!r}: {e}") from e
    if not tokens:
        raise CodecError('malformed-template', "command template is empty")
    argv = []
    for token in tokens:
        try:
            argv.append(token.format(**values))
        except (KeyError, IndexError, ValueError) as e:
            raise CodecError('malformed-template', f"unknown placeholder in {token!r}; allowed: {PLACEHOLDERS}") from e
    return argv


class ExternalCodec(HostCodec):
    """Host codec backed by external encoder/decoder executables"""

    name = "external"

    def __init__(self, encode_template: str, decode_template: str, input_format: str = 'y4m',
                 timeout: float = 600.0, work_dir: Optional[str] = None):
        if input_format not in ('y4m', 'yuv'):
            raise CodecError('invalid-input-format', f"input_format must be y4m or yuv, got {input_format!r}")
        self.encode_template = encode_template
        self.decode_template = decode_template
        self.input_format = input_format
        self.timeout = timeout
        self.work_dir = os.path.expanduser(work_dir) if work_dir else None
        if self.work_dir:
            os.makedirs(self.work_dir, exist_ok=True)

    def _run(self, argv: List[str], expected_output: str) -> None:
        logger.info(f"🔧 Running: {' '.join(shlex.quote(arg) for arg in argv)}")
        start_time = time.time()
        try:
            result = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except FileNotFoundError as e:
            raise CodecError('spawn-failure', f"cannot start {argv[0]!r}: {e}") from e
        except PermissionError as e:
            raise CodecError('spawn-failure', f"cannot execute {argv[0]!r}: {e}") from e
        except subprocess.TimeoutExpired:
            raise CodecError('timeout', f"{argv[0]} did not finish within {self.timeout}s") from None
        elapsed_time = time.time() - start_time

        logger.info(f"⏱️  {argv[0]} completed in {elapsed_time:.2f}s with return code: {result.returncode}")
        logger.debug(f"   STDOUT: {result.stdout}")
        logger.debug(f"   STDERR: {result.stderr}")
        if result.returncode != 0:
            logger.warning(f"⚠️  {argv[0]} failed with return code {result.returncode}")
            logger.warning(f"   Error output: {result.stderr}")
            raise CodecError('nonzero-exit', f"{argv[0]} exited with status {result.returncode}: {result.stderr.strip()}")
        if not os.path.exists(expected_output):
            raise CodecError('missing-output', f"{argv[0]} exited cleanly but did not write {expected_output}")

    def _values(self, input_path: str, output_path: str, qp: int, geometry: StreamGeometry) -> dict:
        rate = geometry.frame_rate
        fps = str(rate.numerator) if rate.denominator == 1 else f"{float(rate):.6g}"
        return {"input": input_path, "output": output_path, "qp": qp,
                "width": geometry.width, "height": geometry.height, "fps": fps}

    def encode(self, sequence: VideoSequence, qp: int) -> Tuple[bytes, int]:
        qp = QpValue(qp)
        geometry = StreamGeometry.of(sequence)
        with tempfile.TemporaryDirectory(prefix="vst3_enc_", dir=self.work_dir) as tmp:
            input_path = os.path.join(tmp, f"input.{self.input_format}")
            output_path = os.path.join(tmp, "stream.bin")
            if self.input_format == 'y4m':
                write_y4m(sequence, input_path)
            else:
                write_raw_yuv(sequence, input_path)
            self._run(substitute_template(self.encode_template, self._values(input_path, output_path, qp, geometry)),
                      output_path)
            with open(output_path, 'rb') as f:
                payload = f.read()
        return payload, 8 * len(payload)

    def decode(self, payload: bytes, geometry: Optional[StreamGeometry] = None) -> VideoSequence:
        if geometry is None:
            raise CodecError('missing-geometry', "external decoding needs the stream geometry")
        with tempfile.TemporaryDirectory(prefix="vst3_dec_", dir=self.work_dir) as tmp:
            input_path = os.path.join(tmp, "stream.bin")
            output_path = os.path.join(tmp, f"recon.{self.input_format}")
            with open(input_path, 'wb') as f:
                f.write(payload)
            self._run(substitute_template(self.decode_template, self._values(input_path, output_path, 0, geometry)),
                      output_path)
            if self.input_format == 'y4m':
                decoded = read_y4m(output_path)
            else:
                meta_path = f"{output_path}.meta"
                if not os.path.exists(meta_path):
                    rate = geometry.frame_rate
                    with open(meta_path, 'w', encoding='utf-8') as f:
                        f.write(f"width={geometry.width}\nheight={geometry.height}\n"
                                f"fps={rate.numerator}/{rate.denominator}\nbit_depth={geometry.container_bit_depth}\n")
                decoded = read_raw_yuv(output_path, meta_path)

        if (decoded.width, decoded.height) != (geometry.width, geometry.height):
            raise CodecError('geometry-mismatch', f"decoder produced {decoded.width}x{decoded.height}, "
                                                  f"expected {geometry.width}x{geometry.height}")
        if len(decoded) != geometry.num_frames:
            raise CodecError('frame-count-mismatch', f"decoder produced {len(decoded)} frames, expected {geometry.num_frames}")
        # decoders emit the container depth; restore the coded EBD and frame rate
        return VideoSequence(
            tuple(frame.with_effective_bit_depth(geometry.effective_bit_depth) for frame in decoded.frames),
            geometry.frame_rate,
        )


def create_codec(config: PipelineConfig) -> HostCodec:
    """Instantiate the host codec named by the configuration"""
    if config.codec == 'toy':
        from toy_codec import ToyIntraCodec
        return ToyIntraCodec()
    if config.codec == 'external':
        return ExternalCodec(config.encode_template, config.decode_template, config.codec_input_format,
                             config.codec_timeout, config.work_dir)
    raise CodecError('unknown-codec', f"unknown codec {config.codec!r}")
