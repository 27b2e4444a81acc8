import numpy as np
import pytest
import yaml

from conftest import synthetic_frame, synthetic_sequence
from format_adaptation import apply_mode, apply_mode_sequence, invert_mode_baseline
from neural_network import adam_step
from restoration_network import (PatchPair, RestorationModelKey, RestorationRegistry, build_restoration_model,
                                 collapse_pyramid, generate_restoration_dataset, laplacian_pyramid,
                                 learning_rate_at, restoration_loss, restoration_loss_and_grad, restore_forward,
                                 restore_sequence, train_restoration)
from vistra3_base import AdaptationMode, RestorationError
from video_frames import VideoSequence, psnr_plane, psnr_yuv

M0, M1, M2, M3, M4 = AdaptationMode


def test_pyramid_collapse_reconstructs():
    image = np.random.default_rng(0).random((16, 16))
    bands = laplacian_pyramid(image, 3)
    assert [b.shape for b in bands] == [(16, 16), (8, 8), (4, 4)]
    np.testing.assert_allclose(collapse_pyramid(bands), image, atol=1e-5)


def test_constant_image_has_empty_bands():
    bands = laplacian_pyramid(np.full((2, 1, 8, 8), 0.25), 3)
    for band in bands[:-1]:
        np.testing.assert_allclose(band, 0.0, atol=1e-12)
    np.testing.assert_allclose(bands[-1], 0.25)


def test_pyramid_needs_divisible_size():
    with pytest.raises(RestorationError) as info:
        laplacian_pyramid(np.zeros((10, 10)), 3)
    assert info.value.code == 'indivisible-dimensions'


def test_loss_is_zero_for_identical_images():
    image = np.random.default_rng(1).random((1, 1, 8, 8))
    loss, grad = restoration_loss_and_grad(image, image.copy())
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    output = rng.random((2, 1, 8, 8))
    target = rng.random((2, 1, 8, 8))
    _, grad = restoration_loss_and_grad(output, target)
    numeric = np.zeros_like(output)
    eps = 1e-7
    for index in np.ndindex(*output.shape):
        saved = output[index]
        output[index] = saved + eps
        plus = restoration_loss(output, target)
        output[index] = saved - eps
        minus = restoration_loss(output, target)
        output[index] = saved
        numeric[index] = (plus - minus) / (2 * eps)
    error = np.linalg.norm(grad - numeric) / (np.linalg.norm(grad) + np.linalg.norm(numeric))
    assert error < 1e-3


def test_model_gradient_through_loss():
    "End-to-end check of one restoration model parameter in float64"
    rng = np.random.default_rng(3)
    model = build_restoration_model(M1, 22, channels=3, num_layers=3, seed=1, dtype=np.float64)
    model.layers[-1].params['weight'][...] = rng.normal(0, 0.1, model.layers[-1].params['weight'].shape)
    x = rng.random((1, 1, 8, 8))
    target = rng.random((1, 1, 8, 8))

    def loss():
        return restoration_loss(model.forward(x), target)

    _, grad = restoration_loss_and_grad(model.forward(x), target)
    grads = model.backward(grad)
    name, param = model.parameters()[1]
    analytic = grads[1]
    numeric = np.zeros_like(param)
    for index in np.ndindex(*param.shape):
        saved = param[index]
        param[index] = saved + 1e-7
        plus = loss()
        param[index] = saved - 1e-7
        minus = loss()
        param[index] = saved
        numeric[index] = (plus - minus) / 2e-7
    assert np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric)) < 1e-3, name


def test_zero_initialised_model_reproduces_baseline():
    frame = synthetic_frame('moving', 32, 32)
    decoded = apply_mode(frame, M3)
    model = build_restoration_model(M3, 32, channels=4, num_layers=3)
    restored = restore_forward(decoded, M3, model, expected_size=(32, 32))
    assert restored.equals(invert_mode_baseline(decoded, M3))


def test_restore_rejects_m0_and_mismatched_keys():
    frame = synthetic_frame('gradient', 16, 16)
    model = build_restoration_model(M1, 22, channels=2, num_layers=2)
    with pytest.raises(RestorationError) as info:
        restore_forward(frame, M0, model)
    assert info.value.code == 'no-model-for-M0'
    with pytest.raises(RestorationError) as info:
        restore_forward(frame, M2, model)
    assert info.value.code == 'model-key-mismatch'
    with pytest.raises(RestorationError) as info:
        restore_forward(frame, M1, model, expected_size=(32, 32))
    assert info.value.code == 'geometry-mismatch'


def test_restore_sequence_is_independent_of_jobs():
    seq = synthetic_sequence('noise', 16, 16, 4, seed=2)
    model = build_restoration_model(M4, 27, channels=2, num_layers=3, seed=4)
    model.layers[-1].params['weight'][...] = 0.01
    serial = restore_sequence(seq, M4, model, jobs=1)
    parallel = restore_sequence(seq, M4, model, jobs=3)
    assert serial.equals(parallel)


def test_dataset_generation(toy_codec):
    sources = [synthetic_sequence('moving', 32, 32, 3), synthetic_sequence('noise', 32, 32, 3, seed=5)]
    pairs = generate_restoration_dataset(sources, toy_codec, M2, 37, num_patches=12, patch_size=16, seed=9)
    again = generate_restoration_dataset(sources, toy_codec, M2, 37, num_patches=12, patch_size=16, seed=9)
    assert len(pairs) == 12
    assert [p.origin for p in pairs] == [p.origin for p in again]
    assert all(p.degraded.shape == (16, 16) and p.degraded.dtype == np.float32 for p in pairs)
    assert all(np.array_equal(a.degraded, b.degraded) for a, b in zip(pairs, again))


def test_dataset_errors(toy_codec):
    sources = [synthetic_sequence('moving', 16, 16, 2)]
    with pytest.raises(RestorationError) as info:
        generate_restoration_dataset(sources, toy_codec, M0, 22, 4, patch_size=8)
    assert info.value.code == 'no-model-for-M0'
    with pytest.raises(RestorationError) as info:
        generate_restoration_dataset(sources, toy_codec, M1, 22, 4, patch_size=32)
    assert info.value.code == 'source-too-small'


def test_learning_rate_halves_every_twenty_epochs():
    assert learning_rate_at(1, 1e-4) == 1e-4
    assert learning_rate_at(20, 1e-4) == 1e-4
    assert learning_rate_at(21, 1e-4) == 5e-5
    assert learning_rate_at(41, 1e-4) == 2.5e-5


def test_training_logs_learning_rate_schedule():
    rng = np.random.default_rng(0)
    gt = rng.random((8, 8)).astype(np.float32)
    dataset = [PatchPair(gt.copy(), gt.copy())] * 2
    model = train_restoration(dataset, epochs=41, channels=2, num_layers=2)
    log = model.training_log
    assert [log[i]['lr'] for i in (0, 20, 40)] == [1e-4, 5e-5, 2.5e-5]
    # degraded == target with a zero final layer starts and stays at zero loss
    assert all(entry['loss'] == pytest.approx(0.0, abs=1e-6) for entry in log)


def test_training_reduces_loss_and_beats_baseline():
    rng = np.random.default_rng(1)
    pairs, held_out = [], []
    for index in range(40):
        gt = (0.25 + 0.5 * rng.random((16, 16))).astype(np.float32)
        pair = PatchPair((0.9 * gt).astype(np.float32), gt)
        (held_out if index >= 32 else pairs).append(pair)
    model = train_restoration(pairs, epochs=20, lr=1e-2, batch_size=8, channels=4, num_layers=3, seed=2)
    log = model.training_log
    assert log[-1]['loss'] < log[0]['loss']

    degraded = np.stack([p.degraded for p in held_out])[:, None]
    target = np.stack([p.target for p in held_out])[:, None]
    restored = model.predict(degraded)
    assert restoration_loss(restored, target) < restoration_loss(degraded, target)


def odd_valued(sequence):
    """Every sample odd, so the floor shift of M1 always drops exactly one level"""
    return sequence.map_frames(lambda f: f.replace(y=f.y | 1, u=f.u | 1, v=f.v | 1))


def to_levels(patches, peak=255):
    return np.clip(np.floor(patches.astype(np.float64) * peak + 0.5), 0, peak)


def test_desk_scale_training_halves_loss_and_keeps_quality(toy_codec):
    train_sources = [odd_valued(synthetic_sequence(kind, 64, 64, 4)) for kind in ('gradient', 'moving')]
    held_out_sources = [odd_valued(synthetic_sequence(kind, 64, 64, 8).slice(4, 8))
                        for kind in ('gradient', 'moving')]
    pairs = generate_restoration_dataset(train_sources, toy_codec, M1, 6, num_patches=512, patch_size=16, seed=1)
    held_out = generate_restoration_dataset(held_out_sources, toy_codec, M1, 6, num_patches=64, patch_size=16,
                                            seed=2)

    degraded = np.stack([p.degraded for p in pairs])[:, None]
    target = np.stack([p.target for p in pairs])[:, None]
    initial_loss = restoration_loss(degraded, target)
    model = train_restoration(pairs, epochs=10, lr=2e-5, batch_size=16, channels=4, num_layers=3, seed=3)
    assert len(model.training_log) == 10
    assert restoration_loss(model.predict(degraded), target) < 0.5 * initial_loss

    degraded = np.stack([p.degraded for p in held_out])[:, None]
    target = to_levels(np.stack([p.target for p in held_out])[:, None])
    baseline_psnr = psnr_plane(to_levels(degraded), target, 255)
    assert psnr_plane(to_levels(model.predict(degraded)), target, 255) >= baseline_psnr

    baseline, restored = [], []
    for source in held_out_sources:
        adapted = apply_mode_sequence(source, M1)
        decoded = toy_codec.decode(toy_codec.encode(adapted, 0)[0])
        for original, frame in zip(source.frames, decoded.frames):
            baseline.append(psnr_yuv(original, invert_mode_baseline(frame, M1)))
            restored.append(psnr_yuv(original, restore_forward(frame, M1, model)))
    assert np.mean(restored) >= np.mean(baseline)


def test_checkpoints_are_reproducible(tmp_path):
    rng = np.random.default_rng(4)
    gt = rng.random((8, 8)).astype(np.float32)
    dataset = [PatchPair(0.8 * gt, gt)] * 4
    a, b = tmp_path / 'a.vnn', tmp_path / 'b.vnn'
    train_restoration(dataset, epochs=2, channels=2, num_layers=2, seed=3, checkpoint_path=str(a))
    train_restoration(dataset, epochs=2, channels=2, num_layers=2, seed=3, checkpoint_path=str(b))
    assert a.read_bytes() == b.read_bytes()


def test_registry_roundtrip_and_nearest_lookup(tmp_path):
    registry = RestorationRegistry(str(tmp_path / 'models'))
    for qp in (22, 37):
        registry.register(RestorationModelKey(M2, qp), build_restoration_model(M2, qp, channels=2, num_layers=2))
    manifest = yaml.safe_load((tmp_path / 'models' / 'manifest.yaml').read_text())
    assert [entry['file'] for entry in manifest['models']] == ['restore_M2_qp22.vnn', 'restore_M2_qp37.vnn']

    reopened = RestorationRegistry(str(tmp_path / 'models'))
    assert reopened.keys() == [RestorationModelKey(M2, 22), RestorationModelKey(M2, 37)]
    assert reopened.resolve(M2, 27).qp_base == 22
    assert reopened.resolve(M2, 32).qp_base == 37
    assert reopened.load(M2, 37).metadata['qp_base'] == 37
    with pytest.raises(RestorationError) as info:
        reopened.load(M1, 22)
    assert info.value.code == 'missing-model'


def test_m0_has_no_registry_key():
    with pytest.raises(RestorationError) as info:
        RestorationModelKey(M0, 22)
    assert info.value.code == 'no-model-for-M0'


def test_patch_pair_validation():
    with pytest.raises(RestorationError):
        PatchPair(np.zeros((4, 4), dtype=np.float32), np.zeros((4, 5), dtype=np.float32))
    with pytest.raises(RestorationError):
        PatchPair(np.full((4, 4), 2.0, dtype=np.float32), np.zeros((4, 4), dtype=np.float32))


def test_restore_keeps_sequence_frame_rate():
    seq = synthetic_sequence('gradient', 16, 16, 2)
    seq = VideoSequence(tuple(apply_mode(f, M1) for f in seq.frames), seq.frame_rate)
    out = restore_sequence(seq, M1, build_restoration_model(M1, 22, channels=2, num_layers=2))
    assert out.frame_rate == seq.frame_rate
    assert out.effective_bit_depth == 8


def test_adam_step_is_used_by_training():
    model = build_restoration_model(M1, 22, channels=2, num_layers=2)
    before = model.layers[-1].params['weight'].copy()
    x = np.random.default_rng(0).random((1, 1, 8, 8)).astype(np.float32)
    _, grad = restoration_loss_and_grad(model.forward(x), 0.5 * x)
    adam_step(model, model.backward(grad), 1e-3)
    assert not np.array_equal(before, model.layers[-1].params['weight'])
