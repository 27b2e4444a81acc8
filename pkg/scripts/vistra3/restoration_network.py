#!/usr/bin/env python3
"""
Decoder-side restoration: residual CNN per (mode, QP_base), Laplacian
pyramid loss, patch dataset generation, training and the model registry
"""

import copy
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from format_adaptation import apply_mode_sequence, invert_mode_baseline, invert_mode_sequence
from host_codec import HostCodec, StreamGeometry
from mode_optimisation import effective_qp
from neural_network import Conv2D, Model, ReLU, adam_step, as_tensor, load_checkpoint, save_checkpoint
from vistra3_base import AdaptationMode, QpValue, RestorationError
from video_frames import VideoFrame, VideoSequence

logger = logging.getLogger(__name__)

PYRAMID_LEVELS = 3
PYRAMID_WEIGHT = 10.0
BINOMIAL_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
PATCH_SIZE = 96
RESTORE_CHANNELS = 32
RESTORE_LAYERS = 8
LR_HALVING_EPOCHS = 20
MANIFEST_NAME = "manifest.yaml"


@lru_cache(maxsize=64)
def _blur_matrix(n: int) -> np.ndarray:
    """5-tap binomial smoothing with replicated borders"""
    matrix = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for offset, weight in zip(range(-2, 3), BINOMIAL_KERNEL):
            matrix[i, min(max(i + offset, 0), n - 1)] += weight
    matrix.setflags(write=False)
    return matrix


@lru_cache(maxsize=64)
def _down_matrix(n: int) -> np.ndarray:
    """Smooth then keep even samples: (n / 2, n)"""
    matrix = np.ascontiguousarray(_blur_matrix(n)[::2])
    matrix.setflags(write=False)
    return matrix


@lru_cache(maxsize=64)
def _up_matrix(m: int) -> np.ndarray:
    """Zero-insert then smooth, rows normalised to unit gain: (2m, m)"""
    insert = np.zeros((2 * m, m), dtype=np.float64)
    insert[::2] = np.eye(m)
    matrix = _blur_matrix(2 * m) @ insert
    matrix /= matrix.sum(axis=1, keepdims=True)
    matrix.setflags(write=False)
    return matrix


def _apply(rows: np.ndarray, cols: np.ndarray, x: np.ndarray) -> np.ndarray:
    return rows @ x @ cols.T


def _apply_adjoint(rows: np.ndarray, cols: np.ndarray, g: np.ndarray) -> np.ndarray:
    return rows.T @ g @ cols


def _check_divisible(shape: Tuple[int, ...], levels: int) -> None:
    if levels < 1:
        raise RestorationError('invalid-levels', f"pyramid needs at least one level, got {levels}")
    factor = 1 << (levels - 1)
    if shape[-1] % factor or shape[-2] % factor:
        raise RestorationError('indivisible-dimensions', f"image {shape[-2]}x{shape[-1]} is not divisible by {factor}")


def laplacian_pyramid(image: np.ndarray, levels: int = PYRAMID_LEVELS) -> List[np.ndarray]:
    """Band-pass levels, finest first; the last entry is the coarse Gaussian image

    Works on the trailing two axes, so batches of images are accepted.
    """
    _check_divisible(image.shape, levels)
    gaussian = np.asarray(image, dtype=np.float64)
    bands = []
    for _ in range(levels - 1):
        h, w = gaussian.shape[-2:]
        coarse = _apply(_down_matrix(h), _down_matrix(w), gaussian)
        bands.append(gaussian - _apply(_up_matrix(h // 2), _up_matrix(w // 2), coarse))
        gaussian = coarse
    bands.append(gaussian)
    return bands


def collapse_pyramid(bands: Sequence[np.ndarray]) -> np.ndarray:
    image = bands[-1]
    for band in reversed(bands[:-1]):
        h, w = image.shape[-2:]
        image = band + _apply(_up_matrix(h), _up_matrix(w), image)
    return image


def _pyramid_adjoint(band_grads: Sequence[np.ndarray]) -> np.ndarray:
    """Pull gradients w.r.t. each level back to the input image"""
    grad = band_grads[-1]
    for level in range(len(band_grads) - 1, 0, -1):
        fine = band_grads[level - 1]
        h, w = grad.shape[-2:]
        grad = grad - _apply_adjoint(_up_matrix(h), _up_matrix(w), fine)
        grad = fine + _apply_adjoint(_down_matrix(2 * h), _down_matrix(2 * w), grad)
    return grad


def restoration_loss_and_grad(output: np.ndarray, target: np.ndarray,
                              levels: int = PYRAMID_LEVELS) -> Tuple[float, np.ndarray]:
    """10 * sum_s 2^(s-1) * mean|L^s(out) - L^s(gt)| + mean|out - gt| and its gradient"""
    if output.shape != target.shape:
        raise RestorationError('dimension-mismatch', f"output {output.shape} and target {target.shape} differ")
    diff = output.astype(np.float64) - target.astype(np.float64)
    bands = laplacian_pyramid(diff, levels)
    loss = float(np.mean(np.abs(diff)))
    band_grads = []
    for s, band in enumerate(bands, start=1):
        weight = PYRAMID_WEIGHT * 2.0 ** (s - 1)
        loss += weight * float(np.mean(np.abs(band)))
        band_grads.append(weight * np.sign(band) / band.size)
    grad = _pyramid_adjoint(band_grads) + np.sign(diff) / diff.size
    return loss, grad


def restoration_loss(output: np.ndarray, target: np.ndarray, levels: int = PYRAMID_LEVELS) -> float:
    return restoration_loss_and_grad(output, target, levels)[0]


@dataclass(frozen=True, order=True)
class RestorationModelKey:
    mode: AdaptationMode
    qp_base: int

    def __post_init__(self):
        object.__setattr__(self, 'mode', AdaptationMode(self.mode))
        if self.mode == AdaptationMode.M0:
            raise RestorationError('no-model-for-M0', "mode M0 has no restoration model")
        object.__setattr__(self, 'qp_base', int(QpValue(self.qp_base)))

    @property
    def filename(self) -> str:
        return f"restore_{self.mode.name}_qp{self.qp_base}.vnn"


@dataclass(frozen=True)
class PatchPair:
    degraded: np.ndarray
    target: np.ndarray
    source_index: int = 0
    frame_index: int = 0
    x0: int = 0
    y0: int = 0
    rotation: int = 0
    flip: bool = False

    def __post_init__(self):
        if self.degraded.shape != self.target.shape or self.degraded.ndim != 2:
            raise RestorationError('dimension-mismatch', f"patch shapes {self.degraded.shape}/{self.target.shape} differ")
        for arr in (self.degraded, self.target):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise RestorationError('patch-out-of-range', "patch values must lie in [0, 1]")

    @property
    def origin(self) -> Tuple[int, int, int, int, int, bool]:
        return self.source_index, self.frame_index, self.x0, self.y0, self.rotation, self.flip


def build_restoration_model(mode: Optional[AdaptationMode] = None, qp_base: Optional[int] = None,
                            channels: int = RESTORE_CHANNELS, num_layers: int = RESTORE_LAYERS,
                            seed: int = 0, dtype=np.float32) -> Model:
    """3x3 conv stack with ReLU and a global skip; the last layer starts at zero"""
    if num_layers < 2:
        raise RestorationError('invalid-model', f"need at least 2 conv layers, got {num_layers}")
    rng = np.random.default_rng(seed)
    layers = [Conv2D(1, channels, kernel=3, padding=1, rng=rng, dtype=dtype), ReLU()]
    for _ in range(num_layers - 2):
        layers += [Conv2D(channels, channels, kernel=3, padding=1, rng=rng, dtype=dtype), ReLU()]
    last = Conv2D(channels, 1, kernel=3, padding=1, rng=rng, dtype=dtype)
    last.params["weight"][...] = 0
    layers.append(last)
    metadata = {"kind": "restoration", "channels": channels, "layers": num_layers}
    if mode is not None:
        metadata["mode"] = AdaptationMode(mode).name
    if qp_base is not None:
        metadata["qp_base"] = int(qp_base)
    return Model(layers, global_residual=True, metadata=metadata, dtype=dtype)


def _refine_plane(model: Model, plane: np.ndarray, peak: int) -> np.ndarray:
    x = (plane.astype(np.float64) / peak)[None, None]
    out = model.forward(x)[0, 0].astype(np.float64) * peak
    return np.clip(np.floor(out + 0.5), 0, peak).astype(np.uint16)


def restore_forward(decoded_frame: VideoFrame, mode: AdaptationMode, model: Model,
                    expected_size: Optional[Tuple[int, int]] = None) -> VideoFrame:
    """Baseline inversion followed by per-plane CNN refinement"""
    mode = AdaptationMode(mode)
    if mode == AdaptationMode.M0:
        raise RestorationError('no-model-for-M0', "mode M0 segments are not restored")
    model_mode = model.metadata.get("mode")
    if model_mode is not None and model_mode != mode.name:
        raise RestorationError('model-key-mismatch', f"model was trained for {model_mode}, segment is {mode.name}")
    frame = invert_mode_baseline(decoded_frame, mode)
    if expected_size is not None and (frame.width, frame.height) != tuple(expected_size):
        raise RestorationError('geometry-mismatch', f"restored frame is {frame.width}x{frame.height}, "
                                                    f"expected {expected_size[0]}x{expected_size[1]}")
    y, u, v = (_refine_plane(model, plane, frame.peak) for plane in frame.planes)
    return frame.replace(y=y, u=u, v=v)


def restore_sequence(decoded: VideoSequence, mode: AdaptationMode, model: Model,
                     expected_size: Optional[Tuple[int, int]] = None, jobs: int = 1) -> VideoSequence:
    """Restore every frame; with jobs > 1 each worker gets its own model copy"""
    frames = list(decoded.frames)
    if jobs <= 1 or len(frames) < 2:
        restored = [restore_forward(f, mode, model, expected_size) for f in frames]
    else:
        chunks = [frames[i::jobs] for i in range(jobs)]

        def work(chunk):
            local = copy.deepcopy(model)
            return [restore_forward(f, mode, local, expected_size) for f in chunk]

        with ThreadPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(work, chunks))
        restored = [None] * len(frames)
        for offset, chunk in enumerate(results):
            restored[offset::jobs] = chunk
    return VideoSequence(tuple(restored), decoded.frame_rate)


def _augment(patch: np.ndarray, rotation: int, flip: bool) -> np.ndarray:
    patch = np.rot90(patch, rotation)
    return np.ascontiguousarray(patch[:, ::-1] if flip else patch)


def generate_restoration_dataset(sources: Sequence[VideoSequence], codec: HostCodec, mode: AdaptationMode,
                                 qp_base: int, num_patches: int, patch_size: int = PATCH_SIZE,
                                 seed: int = 0) -> List[PatchPair]:
    """Co-located luma patches of (coded + baseline-inverted, original) frames"""
    mode = AdaptationMode(mode)
    if mode == AdaptationMode.M0:
        raise RestorationError('no-model-for-M0', "no restoration model is trained for M0")
    if not sources:
        raise RestorationError('empty-dataset', "no source sequences given")
    for index, source in enumerate(sources):
        if source.width < patch_size or source.height < patch_size:
            raise RestorationError('source-too-small',
                                   f"source {index} is {source.width}x{source.height}, patches are {patch_size}x{patch_size}")

    qp = effective_qp(qp_base, mode)
    degraded_sources = []
    for index, source in enumerate(sources):
        adapted = apply_mode_sequence(source, mode)
        payload, bits = codec.encode(adapted, qp)
        degraded_sources.append(invert_mode_sequence(codec.decode(payload, StreamGeometry.of(adapted)), mode))
        logger.info(f"   source {index}: {mode.name} qp={qp} -> {bits} bits")

    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(num_patches):
        s = int(rng.integers(len(sources)))
        source, degraded = sources[s], degraded_sources[s]
        f = int(rng.integers(len(source)))
        y0 = int(rng.integers(0, source.height - patch_size + 1))
        x0 = int(rng.integers(0, source.width - patch_size + 1))
        rotation = int(rng.integers(4))
        flip = bool(rng.integers(2))
        peak = float(source.frames[f].peak)
        window = (slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
        pairs.append(PatchPair(
            _augment(degraded.frames[f].y[window] / peak, rotation, flip).astype(np.float32),
            _augment(source.frames[f].y[window] / peak, rotation, flip).astype(np.float32),
            s, f, x0, y0, rotation, flip,
        ))
    logger.info(f"✅ Generated {len(pairs)} {patch_size}x{patch_size} patches for {mode.name} qp_base={qp_base}")
    return pairs


def learning_rate_at(epoch: int, base_lr: float, halve_every: int = LR_HALVING_EPOCHS) -> float:
    """Learning rate for a 1-based epoch, halved every `halve_every` epochs"""
    return base_lr * 0.5 ** ((epoch - 1) // halve_every)


def train_restoration(dataset: Sequence[PatchPair], epochs: int = 50, lr: float = 1e-4, batch_size: int = 16,
                      seed: int = 0, mode: Optional[AdaptationMode] = None, qp_base: Optional[int] = None,
                      channels: int = RESTORE_CHANNELS, num_layers: int = RESTORE_LAYERS,
                      levels: int = PYRAMID_LEVELS, checkpoint_path: Optional[str] = None,
                      model: Optional[Model] = None) -> Model:
    """ADAM on the pyramid loss with a step-halving learning rate"""
    if not dataset:
        raise RestorationError('empty-dataset', "cannot train restoration on an empty dataset")
    model = model or build_restoration_model(mode, qp_base, channels, num_layers, seed)
    degraded = as_tensor(np.stack([p.degraded for p in dataset])[:, None], model.dtype)
    target = as_tensor(np.stack([p.target for p in dataset])[:, None], model.dtype)
    _check_divisible(degraded.shape, levels)
    rng = np.random.default_rng(seed)

    logger.info("=" * 60)
    logger.info(f"🧠 TRAINING RESTORATION: {len(dataset)} patches, {epochs} epochs, lr={lr}, batch={batch_size}")
    logger.info("=" * 60)
    for epoch in range(1, epochs + 1):
        start_time = time.time()
        epoch_lr = learning_rate_at(epoch, lr)
        order = rng.permutation(len(dataset))
        total_loss = 0.0
        for begin in range(0, len(order), batch_size):
            batch = order[begin:begin + batch_size]
            output = model.forward(degraded[batch])
            loss, grad = restoration_loss_and_grad(output, target[batch], levels)
            adam_step(model, model.backward(grad), epoch_lr)
            total_loss += loss * len(batch)
        mean_loss = total_loss / len(order)
        model.training_log.append({"epoch": epoch, "lr": epoch_lr, "loss": mean_loss})
        logger.info(f"   epoch {epoch}/{epochs}: lr={epoch_lr:.3g} loss={mean_loss:.6f} "
                    f"({time.time() - start_time:.2f}s)")
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return model


class RestorationRegistry:
    """Directory of per-key checkpoints listed in manifest.yaml"""

    def __init__(self, root: str):
        self.root = os.path.expanduser(root)
        self._lock = threading.Lock()
        self._models: Dict[RestorationModelKey, Model] = {}
        self._entries: Dict[RestorationModelKey, str] = {}
        manifest = os.path.join(self.root, MANIFEST_NAME)
        if os.path.exists(manifest):
            try:
                with open(manifest, 'r', encoding='utf-8') as f:
                    content = yaml.safe_load(f) or {}
                for entry in content.get('models', []):
                    key = RestorationModelKey(AdaptationMode.parse(str(entry['mode'])), int(entry['qp_base']))
                    self._entries[key] = entry['file']
            except (yaml.YAMLError, KeyError, TypeError, ValueError) as e:
                raise RestorationError('corrupt-manifest', f"cannot read {manifest}: {e}") from e

    def keys(self) -> List[RestorationModelKey]:
        return sorted(self._entries)

    def _write_manifest(self) -> None:
        content = {'version': 1, 'models': [{'mode': key.mode.name, 'qp_base': key.qp_base, 'file': name}
                                            for key, name in sorted(self._entries.items())]}
        with open(os.path.join(self.root, MANIFEST_NAME), 'w', encoding='utf-8') as f:
            yaml.safe_dump(content, f, sort_keys=False)

    def register(self, key: RestorationModelKey, model: Model) -> str:
        os.makedirs(self.root, exist_ok=True)
        path = os.path.join(self.root, key.filename)
        model.metadata.update({"mode": key.mode.name, "qp_base": key.qp_base})
        save_checkpoint(model, path)
        with self._lock:
            self._entries[key] = key.filename
            self._models[key] = model
            self._write_manifest()
        logger.info(f"📚 Registered restoration model {key.mode.name}/qp{key.qp_base}")
        return path

    def resolve(self, mode: AdaptationMode, qp_base: int) -> RestorationModelKey:
        """Exact key, else the nearest trained QP for the same mode"""
        mode = AdaptationMode(mode)
        candidates = [key for key in self._entries if key.mode == mode]
        if not candidates:
            raise RestorationError('missing-model', f"no restoration model for {mode.name} in {self.root}")
        best = min(candidates, key=lambda key: (abs(key.qp_base - int(qp_base)), key.qp_base))
        if best.qp_base != int(qp_base):
            logger.warning(f"⚠️  No {mode.name} model for qp_base={qp_base}; using qp_base={best.qp_base}")
        return best

    def load(self, mode: AdaptationMode, qp_base: int) -> Model:
        key = self.resolve(mode, qp_base)
        with self._lock:
            if key not in self._models:
                self._models[key] = load_checkpoint(os.path.join(self.root, self._entries[key]))
            return self._models[key]
