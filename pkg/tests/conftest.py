"""Shared fixtures: synthetic 4:2:0 content and a toy codec"""

import os
import sys
from fractions import Fraction

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'scripts', 'vistra3'))

from toy_codec import ToyIntraCodec  # noqa: E402
from video_frames import VideoFrame, VideoSequence  # noqa: E402


def synthetic_frame(kind: str, width: int, height: int, index: int = 0, seed: int = 0,
                    bit_depth: int = 8) -> VideoFrame:
    """gradient | noise | moving | flat content at the given depth"""
    peak = (1 << bit_depth) - 1
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    rng = np.random.default_rng(seed * 1000 + index)
    if kind == 'gradient':
        luma = (xx + yy + 2 * index) / (width + height) * peak
    elif kind == 'noise':
        luma = 0.5 * peak + 0.25 * peak * rng.standard_normal((height, width))
    elif kind == 'moving':
        luma = 0.5 * peak * (1 + np.sin((xx + 3 * index) / 4.0) * np.cos(yy / 6.0))
    elif kind == 'flat':
        luma = np.full((height, width), peak // 2, dtype=np.float64)
    else:
        raise ValueError(kind)
    y = np.clip(np.round(luma), 0, peak)
    chroma = y[::2, ::2]
    u = np.clip(np.round(peak - chroma), 0, peak)
    v = np.clip(np.round(0.5 * chroma + peak // 4), 0, peak)
    return VideoFrame(y, u, v, bit_depth, bit_depth)


def synthetic_sequence(kind: str, width: int = 64, height: int = 64, frames: int = 10,
                       frame_rate=Fraction(30), seed: int = 0, bit_depth: int = 8) -> VideoSequence:
    return VideoSequence(tuple(synthetic_frame(kind, width, height, i, seed, bit_depth) for i in range(frames)),
                         Fraction(frame_rate))


@pytest.fixture
def toy_codec():
    return ToyIntraCodec()


@pytest.fixture
def gradient_sequence():
    return synthetic_sequence('gradient')


@pytest.fixture
def noise_sequence():
    return synthetic_sequence('noise', seed=3)


@pytest.fixture
def moving_sequence():
    return synthetic_sequence('moving')


@pytest.fixture
def ten_bit_sequence():
    return synthetic_sequence('moving', frames=3, bit_depth=10)
