"""
Kaiser-window running average over pointwise probability tracks.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.signal import windows


def beta_from_attenuation(attenuation_db: float) -> float:
    """Kaiser shape parameter for a relative sidelobe attenuation in positive dB."""
    if attenuation_db < 0:
        raise ValueError(
            f"Kaiser window shape needs a non-negative sidelobe attenuation, got {attenuation_db} dB"
        )
    if attenuation_db > 60.0:
        return 0.12438 * (attenuation_db + 6.3)
    if attenuation_db > 13.26:
        excess = attenuation_db - 13.26
        return 0.76609 * excess**0.4 + 0.09834 * excess
    return 0.0


def kaiser_weights(window_length: int, beta: float) -> np.ndarray:
    if window_length < 1 or window_length % 2 == 0:
        raise ValueError(f"window_length must be odd and positive, got {window_length}")
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    weights = windows.kaiser(int(window_length), float(beta), sym=True)
    return weights / weights.sum()


@dataclass(frozen=True)
class KaiserSmoother:
    window_length: int = 101
    beta: float = 2.0

    def __post_init__(self):
        kaiser_weights(self.window_length, self.beta)

    @classmethod
    def from_attenuation(cls, window_length: int, attenuation_db: float) -> "KaiserSmoother":
        return cls(window_length=window_length, beta=beta_from_attenuation(attenuation_db))

    @property
    def weights(self) -> np.ndarray:
        return kaiser_weights(self.window_length, self.beta)

    def to_dict(self) -> dict:
        return {"window_length": self.window_length, "beta": self.beta}


def smooth_probabilities(probs: np.ndarray, smoother: KaiserSmoother) -> np.ndarray:
    """
    Weighted running average of every class column.

    At the edges the weights are renormalized over the taps that fall inside
    the track; rows are renormalized to sum to 1 afterwards.
    """
    probs = np.asarray(probs, dtype=np.float64)
    weights = smoother.weights
    total = correlate1d(probs, weights, axis=0, mode="constant", cval=0.0)
    coverage = correlate1d(np.ones(probs.shape[0]), weights, mode="constant", cval=0.0)
    smoothed = total / coverage[:, None]
    return smoothed / smoothed.sum(axis=1, keepdims=True)
