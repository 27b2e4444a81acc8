import numpy as np
import pytest

from conftest import synthetic_sequence
from toy_codec import (HEADER, ToyIntraCodec, code_to_signed, qstep, read_exp_golomb, signed_to_code,
                       write_exp_golomb)
from vistra3_base import CodecError, ConfigError
from video_frames import VideoFrame, VideoSequence, sequence_psnr

QPS = (22, 27, 32, 37)


def test_exp_golomb_known_codewords():
    "ue(0)=1, ue(1)=010, ue(2)=011, ue(3)=00100"
    data, length = write_exp_golomb(np.array([0, 1, 2, 3], dtype=np.uint64))
    assert length == 1 + 3 + 3 + 5
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:length]
    assert ''.join(map(str, bits)) == '1' + '010' + '011' + '00100'
    assert read_exp_golomb(bits).tolist() == [0, 1, 2, 3]


def test_exp_golomb_large_values():
    codes = np.array([0, 5, 1000, 123456789, 7], dtype=np.uint64)
    data, length = write_exp_golomb(codes)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:length]
    assert read_exp_golomb(bits).tolist() == codes.tolist()


def test_exp_golomb_overrun():
    with pytest.raises(CodecError) as info:
        read_exp_golomb(np.array([0, 0, 0, 1, 0], dtype=np.uint8))
    assert info.value.code == 'corrupt-payload'


def test_signed_mapping():
    levels = np.array([0, 1, -1, 2, -2])
    assert signed_to_code(levels).tolist() == [0, 1, 2, 3, 4]
    assert code_to_signed(signed_to_code(levels)).tolist() == levels.tolist()


def test_qstep_doubles_every_six():
    assert qstep(4) == 1.0
    assert qstep(10) == pytest.approx(2.0)


def test_zero_frame_codes_all_zero_levels(toy_codec):
    frame = VideoFrame(np.zeros((16, 16)), np.zeros((8, 8)), np.zeros((8, 8)))
    seq = VideoSequence((frame,))
    payload, bits = toy_codec.encode(seq, 32)
    # 3 level shifts + 6 all-zero blocks, one bit each
    assert len(payload) - HEADER.size == 2
    assert bits == 8 * len(payload)
    assert toy_codec.decode(payload).equals(seq)


def test_decode_is_deterministic(toy_codec, moving_sequence):
    payload, _ = toy_codec.encode(moving_sequence, 27)
    assert toy_codec.encode(moving_sequence, 27)[0] == payload
    first, second = toy_codec.decode(payload), toy_codec.decode(payload)
    assert first.equals(second)
    assert first.frame_rate == moving_sequence.frame_rate


def test_rate_and_quality_fall_with_qp():
    rng = np.random.default_rng(7)
    frames = tuple(VideoFrame(rng.integers(0, 256, (32, 32)), rng.integers(0, 256, (16, 16)),
                              rng.integers(0, 256, (16, 16))) for _ in range(10))
    seq = VideoSequence(frames)
    codec = ToyIntraCodec()
    results = []
    for qp in QPS:
        payload, bits = codec.encode(seq, qp)
        results.append((bits, sequence_psnr(seq, codec.decode(payload))))
    for (bits_a, psnr_a), (bits_b, psnr_b) in zip(results, results[1:]):
        assert bits_b <= bits_a
        assert psnr_b <= psnr_a


def test_reduced_depth_roundtrip_keeps_depth(toy_codec):
    seq = synthetic_sequence('gradient', 16, 16, 2, bit_depth=10)
    seq = seq.map_frames(lambda f: f.replace(y=f.y >> 1, u=f.u >> 1, v=f.v >> 1, effective_bit_depth=9))
    decoded = toy_codec.decode(toy_codec.encode(seq, 22)[0])
    assert decoded.container_bit_depth == 10
    assert decoded.effective_bit_depth == 9
    assert max(int(f.y.max()) for f in decoded.frames) <= 511


def test_low_qp_is_nearly_lossless(toy_codec, gradient_sequence):
    decoded = toy_codec.decode(toy_codec.encode(gradient_sequence, 0)[0])
    assert sequence_psnr(gradient_sequence, decoded) > 45.0


def test_encode_rejects_bad_input(toy_codec):
    odd = synthetic_sequence('gradient', 12, 16, 1)
    with pytest.raises(CodecError) as info:
        toy_codec.encode(odd, 22)
    assert info.value.code == 'unaligned-dimensions'
    with pytest.raises(CodecError) as info:
        toy_codec.encode(VideoSequence(()), 22)
    assert info.value.code == 'empty-sequence'
    with pytest.raises(ConfigError):
        toy_codec.encode(synthetic_sequence('gradient', 16, 16, 1), 52)


@pytest.mark.parametrize('damage', ['magic', 'truncate', 'short'])
def test_decode_rejects_damaged_payload(toy_codec, gradient_sequence, damage):
    payload, _ = toy_codec.encode(gradient_sequence, 32)
    if damage == 'magic':
        payload = b'XXXX' + payload[4:]
    elif damage == 'truncate':
        payload = payload[:HEADER.size + 5]
    else:
        payload = payload[:10]
    with pytest.raises(CodecError) as info:
        toy_codec.decode(payload)
    assert info.value.code == 'corrupt-payload'
