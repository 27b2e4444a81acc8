import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from conftest import synthetic_frame, synthetic_sequence
import mode_optimisation
from mode_optimisation import (CLIP_FRAMES, AnchorCurve, ModeDecision, ModePoint, QmoDatasetConfig, QmoSample,
                               build_anchor_curve, build_qmo_input, build_qmo_model, count_qmo_samples, effective_qp,
                               evaluate_modes, generate_qmo_dataset, load_qmo_dataset, measure_point,
                               oracle_select_mode, pick_mode,
                               qmo_accuracy, qmo_forward, qmo_predict, save_qmo_dataset, segment_sequence,
                               train_qmo)
from rate_quality_metrics import QualityInterpolant, RateQualityCurve, RateQualityPoint
from vistra3_base import AdaptationMode, ModeOptimisationError
from video_frames import write_y4m

M0, M1, M2, M3, M4 = AdaptationMode


@pytest.mark.parametrize('qp_base,mode,expected', [(37, M3, 25), (22, M0, 22), (3, M1, 0), (27, M2, 21),
                                                   (51, M4, 51)])
def test_effective_qp_examples(qp_base, mode, expected):
    assert effective_qp(qp_base, mode) == expected


def test_effective_qp_offset_table():
    offsets = {M0: 0, M1: -6, M2: -6, M3: -12, M4: 0}
    for qp_base in range(12, 52):
        for mode, offset in offsets.items():
            assert effective_qp(qp_base, mode) == qp_base + offset


def test_pick_mode_rules():
    assert pick_mode({M1: -0.5, M2: -0.1, M3: -2.0, M4: 0.0}) == M0
    assert pick_mode({M1: 0.3, M2: 0.3, M3: 0.1, M4: 0.0}) == M1
    assert pick_mode({M1: 0.1, M2: 0.2, M3: 0.4, M4: 0.3}) == M3
    assert pick_mode({M1: 1e-12, M2: 0.0, M3: 0.0, M4: 0.0}) == M0


def test_anchor_needs_three_qps(toy_codec, gradient_sequence):
    with pytest.raises(ModeOptimisationError) as info:
        build_anchor_curve(gradient_sequence, toy_codec, (22, 27, 27))
    assert info.value.code == 'too-few-qps'


def test_anchor_passes_through_measured_points(toy_codec):
    seq = synthetic_sequence('moving', 32, 32, 5)
    anchor = build_anchor_curve(seq, toy_codec)
    for point in anchor.curve.points:
        assert anchor.quality_at(point.rate) == pytest.approx(point.quality, abs=1e-9)


def test_oracle_never_picks_a_losing_mode(toy_codec):
    seq = synthetic_sequence('gradient', 32, 32, 5)
    anchor = build_anchor_curve(seq, toy_codec)
    result = evaluate_modes(seq, 37, toy_codec, anchor)
    assert set(result.gains) == {M1, M2, M3, M4}
    assert oracle_select_mode(seq, 37, toy_codec, anchor) == result.mode
    candidate_gains = [result.gains[mode] for mode in result.candidates]
    if result.mode == M0:
        assert all(gain <= 1e-9 for gain in candidate_gains)
    else:
        assert result.mode in result.candidates
        assert result.gains[result.mode] > 0
        assert result.gains[result.mode] == max(candidate_gains)
        point = measure_point(seq, toy_codec, result.mode, 37)
        assert point.quality >= anchor.quality_at(point.rate)


def linear_anchor():
    curve = RateQualityCurve((RateQualityPoint(1000.0, 30.0), RateQualityPoint(2000.0, 35.0),
                              RateQualityPoint(4000.0, 40.0)), 'psnr_yuv', 'anchor')
    return AnchorCurve(curve, QualityInterpolant(curve))


def fake_points(monkeypatch, table):
    def measure(sequence, codec, mode, qp_base):
        rate, quality = table[mode]
        return ModePoint(mode, qp_base, effective_qp(qp_base, mode), rate, quality, int(rate))
    monkeypatch.setattr(mode_optimisation, 'measure_point', measure)


def test_points_outside_the_anchor_rates_cannot_win(monkeypatch, gradient_sequence):
    anchor = linear_anchor()
    fake_points(monkeypatch, {M1: (1500.0, 31.0), M2: (100.0, 25.0), M3: (50000.0, 60.0), M4: (2000.0, 35.0)})
    result = evaluate_modes(gradient_sequence, 37, None, anchor)
    assert result.gains[M2] > 5 and result.gains[M3] > 0
    assert result.candidates == (M1, M4)
    assert result.mode == M0


def test_in_range_gain_still_wins(monkeypatch, gradient_sequence):
    anchor = linear_anchor()
    fake_points(monkeypatch, {M1: (1500.0, 34.0), M2: (100.0, 25.0), M3: (50000.0, 60.0), M4: (2000.0, 35.0)})
    assert oracle_select_mode(gradient_sequence, 37, None, anchor) == M1
    assert anchor.covers(1000.0) and anchor.covers(3000.0)
    assert not anchor.covers(999.0) and not anchor.covers(4001.0)


def test_m0_point_reproduces_anchor(toy_codec):
    seq = synthetic_sequence('noise', 32, 32, 5, seed=4)
    anchor = build_anchor_curve(seq, toy_codec)
    point = measure_point(seq, toy_codec, M0, 27)
    assert point.quality - anchor.quality_at(point.rate) == pytest.approx(0.0, abs=1e-9)


def test_sample_counts_match_loop_parameters():
    config = QmoDatasetConfig()
    assert count_qmo_samples([(64, 256, 256)], config) == 2560
    assert count_qmo_samples([(64, 256, 256)] * 200, config) == 512000
    desk = QmoDatasetConfig(num_crops=4)
    assert count_qmo_samples([(64, 256, 256)] * 2, desk) == 320
    assert config.samples_per_source() == 2560


def test_plan_rejects_small_sources():
    with pytest.raises(ModeOptimisationError) as info:
        count_qmo_samples([(64, 128, 256)], QmoDatasetConfig())
    assert info.value.code == 'source-too-small'


def test_plan_needs_64_source_frames_even_for_short_crops():
    with pytest.raises(ModeOptimisationError) as info:
        count_qmo_samples([(63, 256, 256)], QmoDatasetConfig())
    assert info.value.code == 'source-too-small'
    assert '256x256x64' in info.value.message
    assert count_qmo_samples([(64, 256, 256)], QmoDatasetConfig(num_crops=1)) == 40
    assert count_qmo_samples([(40, 32, 32)], QmoDatasetConfig(num_crops=1, crop_size=32, min_source_frames=40)) == 40


@pytest.fixture
def small_dataset_config():
    return QmoDatasetConfig(num_crops=1, crop_size=16, crop_frames=8, qps=(22, 27, 32), sub_crops=2,
                            min_source_frames=8, seed=5)


@pytest.fixture
def small_sources():
    return [synthetic_sequence('moving', 32, 32, 10), synthetic_sequence('noise', 32, 32, 10, seed=8)]


def test_dataset_generation_is_reproducible(toy_codec, small_sources, small_dataset_config):
    first = generate_qmo_dataset(small_sources, toy_codec, small_dataset_config, jobs=2)
    second = generate_qmo_dataset(small_sources, toy_codec, small_dataset_config, jobs=1)
    assert len(first) == 2 * 1 * 3 * 2
    key = [(s.source_index, s.frame_start, s.x0, s.y0, s.qp_base, s.label) for s in first]
    assert key == [(s.source_index, s.frame_start, s.x0, s.y0, s.qp_base, s.label) for s in second]
    assert all(len(s.clip) == CLIP_FRAMES and s.clip[0].width == 16 for s in first)


@pytest.mark.parametrize('write_cache', [True, False])
def test_dataset_save_and_load(tmp_path, toy_codec, small_sources, small_dataset_config, write_cache):
    paths = []
    for i, seq in enumerate(small_sources):
        path = tmp_path / f'src{i}.y4m'
        write_y4m(seq, str(path))
        paths.append(str(path))
    samples = generate_qmo_dataset(small_sources, toy_codec, small_dataset_config)
    index = tmp_path / 'index.csv'
    save_qmo_dataset(samples, str(index), paths, write_cache=write_cache)
    loaded = load_qmo_dataset(str(index))
    assert [s.label for s in loaded] == [s.label for s in samples]
    for a, b in zip(loaded, samples):
        assert all(fa.equals(fb) for fa, fb in zip(a.clip, b.clip))


def test_sample_needs_five_frames():
    frame = synthetic_frame('flat', 8, 8)
    with pytest.raises(ModeOptimisationError) as info:
        QmoSample((frame,) * 4, 22, M0)
    assert info.value.code == 'wrong-frame-count'


def test_qmo_input_layout():
    clip = [synthetic_frame('gradient', 8, 8, i) for i in range(CLIP_FRAMES)]
    x = build_qmo_input(clip, 51)
    assert x.shape == (4, 5, 8, 8)
    assert np.all(x[3] == 1.0)
    assert 0.0 <= x[:3].min() and x[:3].max() <= 1.0
    np.testing.assert_allclose(x[1, 0, :2, :2], clip[0].u[0, 0] / 255.0, rtol=1e-6)


def test_zero_head_gives_uniform_confidence():
    model = build_qmo_model((4, 4, 4), zero_head=True)
    clip = [synthetic_frame('moving', 16, 16, i) for i in range(CLIP_FRAMES)]
    decision = qmo_forward(model, clip, 32)
    assert decision.mode == M0
    assert decision.confidence == pytest.approx(0.2)
    assert qmo_forward(model, clip, 32) == decision


def test_decision_does_not_depend_on_batch():
    model = build_qmo_model((4, 4, 4), seed=3)
    samples = [QmoSample(tuple(synthetic_frame(kind, 16, 16, i) for i in range(CLIP_FRAMES)), 27, M0)
               for kind in ('gradient', 'noise', 'moving')]
    batched = qmo_predict(model, samples)
    single = [qmo_forward(model, s.clip, s.qp_base) for s in samples]
    assert [d.mode for d in batched] == [d.mode for d in single]
    for a, b in zip(batched, single):
        assert a.confidence == pytest.approx(b.confidence, rel=1e-5)


def test_qmo_learns_separable_classes():
    "Dark clips are M0, bright clips are M2"
    rng = np.random.default_rng(0)
    samples = []
    for index in range(32):
        bright = index % 2 == 1
        base = 200 if bright else 40
        clip = []
        for _ in range(CLIP_FRAMES):
            y = np.clip(base + rng.integers(-10, 11, (16, 16)), 0, 255)
            clip.append(synthetic_frame('flat', 16, 16).replace(y=y))
        samples.append(QmoSample(tuple(clip), 32, M2 if bright else M0))
    model = train_qmo(samples, epochs=40, lr=1e-2, batch_size=8, channels=(4, 8, 8))
    assert qmo_accuracy(model, samples) >= 0.95
    log = model.training_log
    assert len(log) == 40 and log[-1]['loss'] < log[0]['loss']


def test_train_qmo_rejects_empty_dataset():
    with pytest.raises(ModeOptimisationError) as info:
        train_qmo([])
    assert info.value.code == 'empty-dataset'


def test_segmentation_examples():
    fps30 = Fraction(30)
    segments = segment_sequence([ModeDecision(M2, 0.9)] * 12, fps30, 32)
    assert [(s.start, s.end, s.mode) for s in segments] == [(0, 60, M2)]
    assert segments[0].qp_effective == 26

    alternating = [ModeDecision(M1 if i % 2 else M2, 0.5) for i in range(12)]
    segments = segment_sequence(alternating, fps30, 32)
    assert [(s.start, s.end, s.mode) for s in segments] == [(0, 60, M0)]

    decisions = [ModeDecision(M0, 0.9)] * 12 + [ModeDecision(M2, 0.9)] * 12
    segments = segment_sequence(decisions, Fraction(60), 27)
    assert [(s.start, s.end, s.mode) for s in segments] == [(0, 60, M0), (60, 120, M2)]


def test_segmentation_short_final_window():
    segments = segment_sequence([ModeDecision(M1, 0.8)] * 3, Fraction(30), 22, num_frames=13)
    assert segments[-1].end == 13
    with pytest.raises(ModeOptimisationError):
        segment_sequence([ModeDecision(M1, 0.8)] * 3, Fraction(30), 22, num_frames=20)
    with pytest.raises(ModeOptimisationError) as info:
        segment_sequence([], Fraction(30), 22)
    assert info.value.code == 'empty-decisions'


decision_strategy = st.builds(ModeDecision, st.sampled_from(list(AdaptationMode)), st.floats(0.0, 1.0))


@settings(max_examples=1000, deadline=None)
@given(decisions=st.lists(decision_strategy, min_size=1, max_size=60),
       frame_rate=st.sampled_from([Fraction(24), Fraction(25), Fraction(30000, 1001), Fraction(50), Fraction(60)]))
def test_segmentation_rules_hold(decisions, frame_rate):
    segments = segment_sequence(decisions, frame_rate, 32)
    total = CLIP_FRAMES * len(decisions)
    assert segments[0].start == 0 and segments[-1].end == total
    for a, b in zip(segments, segments[1:]):
        assert a.end == b.start
        assert a.mode != b.mode
        assert a.frame_count >= math.ceil(frame_rate)
        opener = decisions[b.start // CLIP_FRAMES]
        assert b.start % CLIP_FRAMES == 0
        assert opener.confidence >= 0.70 and opener.mode == b.mode
