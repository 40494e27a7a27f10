"""
Statistical context features for pointwise classification.

For a time point t the context window is [t - c//2, t - c//2 + c), truncated at
the recording edges. Every channel contributes mean, maximum, minimum,
standard deviation and root mean square over that window.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from src.data_transformation.dataset import IMURecording


STATISTICS = ("mean", "maximum", "minimum", "std", "rms")


@dataclass(frozen=True, eq=False)
class StatFeatures:
    mean: np.ndarray
    maximum: np.ndarray
    minimum: np.ndarray
    std: np.ndarray
    rms: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, name) for name in STATISTICS])


def _frames_of(recording) -> np.ndarray:
    if isinstance(recording, IMURecording):
        return recording.frames
    return np.asarray(recording, dtype=np.float64)


def context_bounds(t, n_frames: int, context_frames: int):
    if context_frames < 1:
        raise ValueError(f"context_frames must be at least 1, got {context_frames}")
    low = np.asarray(t) - context_frames // 2
    return np.clip(low, 0, n_frames), np.clip(low + context_frames, 0, n_frames)


def extract_features(recording, t: int, context_frames: int = 100) -> StatFeatures:
    frames = _frames_of(recording)
    if not 0 <= t < frames.shape[0]:
        raise IndexError(f"time point {t} outside recording of {frames.shape[0]} frames")
    low, high = context_bounds(t, frames.shape[0], context_frames)
    window = frames[int(low) : int(high)]
    return StatFeatures(
        mean=window.mean(axis=0),
        maximum=window.max(axis=0),
        minimum=window.min(axis=0),
        std=window.std(axis=0),
        rms=np.sqrt(np.mean(window**2, axis=0)),
    )


def feature_matrix(recording, context_frames: int = 100, stride: int = 1):
    """
    Features at time points 0, stride, 2*stride, ...

    Returns:
        tuple: (points, features) with features of shape (len(points), 5 * channels),
        laid out like StatFeatures.as_vector().
    """
    frames = _frames_of(recording)
    n_frames = frames.shape[0]
    points = np.arange(0, n_frames, max(int(stride), 1))
    low, high = context_bounds(points, n_frames, context_frames)
    length = (high - low)[:, None].astype(np.float64)

    # centering keeps the running sums small
    centered = frames - frames.mean(axis=0)
    first = np.vstack([np.zeros(frames.shape[1]), np.cumsum(centered, axis=0)])
    second = np.vstack([np.zeros(frames.shape[1]), np.cumsum(centered**2, axis=0)])
    centered_mean = (first[high] - first[low]) / length
    centered_square = (second[high] - second[low]) / length
    mean = centered_mean + frames.mean(axis=0)
    std = np.sqrt(np.maximum(centered_square - centered_mean**2, 0.0))
    rms = np.sqrt(np.maximum(std**2 + mean**2, 0.0))

    size = int(context_frames)
    maximum = maximum_filter1d(frames, size=size, axis=0, mode="nearest")[points]
    minimum = minimum_filter1d(frames, size=size, axis=0, mode="nearest")[points]
    return points, np.hstack([mean, maximum, minimum, std, rms])
