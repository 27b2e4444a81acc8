from fractions import Fraction

import pytest

from conftest import synthetic_sequence
from format_adaptation import ebd_up
from mode_optimisation import ModeDecision, build_qmo_model
from neural_network import save_checkpoint
from rate_quality_metrics import bd_rate
from restoration_network import RestorationModelKey, RestorationRegistry, build_restoration_model
from toy_codec import ToyIntraCodec
from vistra3_base import AdaptationMode, ConfigError, FrameFormatError, PipelineConfig
from vistra3_pipeline import STATS_COLUMNS, Vistra3Pipeline, window_clips
from video_frames import VideoSequence, sequence_psnr

M0, M1, M2, M3, M4 = AdaptationMode


def fixed_pipeline(mode, **kwargs):
    return Vistra3Pipeline(PipelineConfig(qmo_source='fixed', fixed_mode=mode, **kwargs))


def test_window_clips_pad_the_last_window():
    seq = synthetic_sequence('moving', 16, 16, 12)
    clips = window_clips(seq)
    assert [len(c) for c in clips] == [5, 5, 5]
    assert clips[-1].frames[2:] == (seq.frames[-1],) * 3


def test_fixed_m0_payload_is_the_plain_host_stream(moving_sequence):
    result = fixed_pipeline(M0).encode(moving_sequence, 32)
    plain, _ = ToyIntraCodec().encode(moving_sequence, 32)
    assert result.container.payloads == (plain,)
    assert [(s.start, s.end, s.mode) for s in result.segments] == [(0, 10, M0)]


@pytest.mark.parametrize('mode', list(AdaptationMode))
def test_decoded_geometry_matches_source(mode, moving_sequence):
    pipeline = fixed_pipeline(mode)
    decoded = pipeline.decode(pipeline.encode(moving_sequence, 27).data)
    assert len(decoded) == len(moving_sequence)
    assert (decoded.width, decoded.height) == (moving_sequence.width, moving_sequence.height)
    assert decoded.effective_bit_depth == moving_sequence.effective_bit_depth
    assert decoded.frame_rate == moving_sequence.frame_rate


def test_m1_baseline_decode_is_a_left_shift(gradient_sequence):
    pipeline = fixed_pipeline(M1)
    result = pipeline.encode(gradient_sequence, 32)
    entry = result.container.segments[0]
    assert (entry.qp_base, entry.qp_effective) == (32, 26)
    host = ToyIntraCodec().decode(result.container.payloads[0])
    assert host.effective_bit_depth == 7
    expected = host.map_frames(lambda f: ebd_up(f, 1))
    assert pipeline.decode(result.data).equals(expected)


def test_segments_follow_decisions(monkeypatch):
    seq = synthetic_sequence('moving', 32, 32, 20, frame_rate=5)
    pipeline = Vistra3Pipeline(PipelineConfig())
    decisions = [ModeDecision(M0, 1.0)] * 2 + [ModeDecision(M2, 0.9)] * 2
    monkeypatch.setattr(pipeline, 'choose_decisions', lambda sequence, qp_base: decisions)
    result = pipeline.encode(seq, 37)
    stats = result.stats_frame()
    assert list(stats.columns) == STATS_COLUMNS
    assert stats[['start', 'end', 'mode']].values.tolist() == [[0, 10, 'M0'], [10, 20, 'M2']]
    assert stats['qp_effective'].tolist() == [37, 31]
    assert (stats['container_bits'] == 8 * len(result.data)).all()
    assert pipeline.stats.mode_counts == {'M0': 10, 'M2': 10}
    decoded = pipeline.decode(result.data)
    assert decoded.width == 32 and len(decoded) == 20


def test_oracle_segments_cover_the_sequence():
    seq = synthetic_sequence('gradient', 32, 32, 10, frame_rate=5)
    pipeline = Vistra3Pipeline(PipelineConfig(jobs=2))
    result = pipeline.encode(seq, 37)
    assert result.segments[0].start == 0 and result.segments[-1].end == 10
    assert sum(entry.frame_count for entry in result.container.segments) == 10
    assert len(result.stats_frame()) == len(result.segments)


def test_qmo_model_decisions(tmp_path, moving_sequence):
    path = tmp_path / 'qmo.vnn'
    save_checkpoint(build_qmo_model((2, 2, 2), zero_head=True), str(path))
    pipeline = Vistra3Pipeline(PipelineConfig(qmo_source='model', qmo_checkpoint=str(path)))
    decisions = pipeline.choose_decisions(moving_sequence, 32)
    assert [d.mode for d in decisions] == [M0, M0]
    assert all(d.confidence == pytest.approx(0.2) for d in decisions)


def test_qmo_checkpoint_must_exist(tmp_path):
    with pytest.raises(ConfigError) as info:
        Vistra3Pipeline(PipelineConfig(qmo_source='model', qmo_checkpoint=str(tmp_path / 'missing.vnn')))
    assert info.value.code == 'missing-checkpoint'


def test_restoration_checkpoint_is_not_a_qmo_model(tmp_path):
    path = tmp_path / 'restore.vnn'
    save_checkpoint(build_restoration_model(M1, 22, channels=2, num_layers=2), str(path))
    with pytest.raises(ConfigError) as info:
        Vistra3Pipeline(PipelineConfig(qmo_source='model', qmo_checkpoint=str(path)))
    assert info.value.code == 'wrong-checkpoint-kind'


def test_registry_decode_with_zero_models_matches_baseline(tmp_path, moving_sequence):
    registry = RestorationRegistry(str(tmp_path / 'models'))
    registry.register(RestorationModelKey(M3, 32), build_restoration_model(M3, 32, channels=2, num_layers=2))
    encoder = fixed_pipeline(M3)
    data = encoder.encode(moving_sequence, 32).data
    decoder = Vistra3Pipeline(PipelineConfig(registry_path=str(tmp_path / 'models'), baseline_restore=False),
                              for_decode=True)
    assert decoder.decode(data).equals(encoder.decode(data))


def test_registry_decode_requires_registry(tmp_path):
    with pytest.raises(ConfigError) as info:
        Vistra3Pipeline(PipelineConfig(registry_path=str(tmp_path / 'none'), baseline_restore=False),
                        for_decode=True)
    assert info.value.code == 'missing-registry'


def test_sweep_builds_a_curve(noise_sequence):
    pipeline = fixed_pipeline(M0, label='anchor')
    curve = pipeline.sweep(noise_sequence, 'noise', [22, 27, 32, 37])
    assert curve.codec == 'anchor' and curve.sequence == 'noise'
    assert sorted(p.qp for p in curve.points) == [22, 27, 32, 37]
    best = max(curve.points, key=lambda p: p.rate)
    assert best.qp == 22
    assert all(p.encode_seconds is not None for p in curve.points)
    payload, bits = ToyIntraCodec().encode(noise_sequence, 22)
    assert best.quality == pytest.approx(sequence_psnr(noise_sequence, ToyIntraCodec().decode(payload)))


@pytest.mark.parametrize('kind', ['gradient', 'noise', 'moving'])
def test_oracle_is_never_materially_worse_than_m0(kind):
    seq = synthetic_sequence(kind, 128, 128, 64, seed=1)
    qps = [22, 27, 32, 37]
    oracle = Vistra3Pipeline(PipelineConfig(qp_list=qps, jobs=4))
    anchor = fixed_pipeline(M0, label='anchor', qp_list=qps)
    assert bd_rate(oracle.sweep(seq, kind, qps), anchor.sweep(seq, kind, qps)) <= 0.5


def test_empty_sequence_is_rejected():
    with pytest.raises(FrameFormatError) as info:
        fixed_pipeline(M0).encode(VideoSequence((), Fraction(30)), 32)
    assert info.value.code == 'empty-sequence'
