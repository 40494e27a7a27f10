"""
Preprocessing between raw recordings and model windows.

sensor-centric quaternions -> z-score normalization -> 6 s windows with a 4 s
core -> per-window target sequence.
"""

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np
from sklearn.preprocessing import StandardScaler

from logging_config import setup_logger
from src.data_transformation.dataset import (
    ChannelManifest,
    DimensionalityMismatchError,
    IMURecording,
    PrimitiveClass,
)


LOGGER = setup_logger()

MIN_STD = 1e-8
REFERENCE_POLICIES = ("first_frame", "identity")


class ZeroNormQuaternionError(ValueError):
    pass


# quaternions are (..., 4) arrays in w, x, y, z order
def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        LOGGER.error("Zero-norm quaternion in input.")
        raise ZeroNormQuaternionError("Zero-norm quaternion in input.")
    return q / norm


def sensor_centric_transform(
    recording: IMURecording,
    manifest: ChannelManifest,
    reference_policy: str = "first_frame",
) -> IMURecording:
    """
    Express each sensor's orientation relative to its calibration pose.

    For every quaternion group q'(t) = conj(q(ref)) * q(t), renormalized, with
    q(ref) the group's first frame. Other channels pass through unchanged.
    """
    if reference_policy not in REFERENCE_POLICIES:
        raise ValueError(
            f"Unknown reference policy '{reference_policy}', expected one of {REFERENCE_POLICIES}"
        )
    if recording.channel_count != manifest.channel_count:
        raise DimensionalityMismatchError(
            f"Recording '{recording.recording_id}' has {recording.channel_count} channels, "
            f"manifest has {manifest.channel_count}."
        )
    if reference_policy == "identity":
        return recording

    frames = np.array(recording.frames, dtype=np.float64)
    for _, column in manifest.quaternion_groups():
        block = quat_normalize(frames[:, column : column + 4])
        reference = block[0]
        frames[:, column : column + 4] = quat_normalize(
            quat_multiply(quat_conjugate(reference)[None, :], block)
        )
    return recording.with_frames(frames)


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    source_split: str = ""

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length.")
        if np.any(self.std <= 0):
            raise ValueError("Every channel std must be positive.")

    @property
    def channel_count(self) -> int:
        return int(self.mean.shape[0])

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "source_split": self.source_split,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "NormalizationStats":
        return cls(
            mean=np.asarray(raw["mean"], dtype=np.float64),
            std=np.asarray(raw["std"], dtype=np.float64),
            source_split=str(raw.get("source_split", "")),
        )


def fit_normalization(train_recordings, source_split: str = "") -> NormalizationStats:
    """
    Pool every frame of every training recording into per-channel mean/std.

    Channels with std below 1e-8 get std 1.
    """
    recordings = list(train_recordings)
    if not recordings:
        LOGGER.error("Cannot fit normalization on an empty recording list.")
        raise ValueError("Cannot fit normalization on an empty recording list.")

    LOGGER.info(f"data standardization fit over {len(recordings)} recordings")
    scaler = StandardScaler()
    scaler.fit(np.vstack([r.frames for r in recordings]))
    std = np.sqrt(scaler.var_)
    degenerate = std < MIN_STD
    if degenerate.any():
        LOGGER.warning(f"{int(degenerate.sum())} constant channels get std clamped to 1")
    std = np.where(degenerate, 1.0, std)
    return NormalizationStats(
        mean=scaler.mean_.astype(np.float64), std=std, source_split=source_split
    )


def normalize_frames(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.channel_count:
        LOGGER.error(
            f"Normalization stats cover {stats.channel_count} channels, frames have {frames.shape[-1]}"
        )
        raise DimensionalityMismatchError(
            f"Normalization stats cover {stats.channel_count} channels, "
            f"frames have {frames.shape[-1]}."
        )
    return (frames - stats.mean) / stats.std


def apply_normalization(recording: IMURecording, stats: NormalizationStats) -> IMURecording:
    return recording.with_frames(normalize_frames(recording.frames, stats))


def invert_normalization(recording: IMURecording, stats: NormalizationStats) -> IMURecording:
    return recording.with_frames(recording.frames * stats.std + stats.mean)


def _whole_frames(seconds: float, sample_rate_hz: float, name: str) -> int:
    frames = seconds * sample_rate_hz
    if not math.isclose(frames, round(frames), abs_tol=1e-9):
        raise ValueError(f"{name}={seconds}s is not a whole number of frames at {sample_rate_hz} Hz")
    return int(round(frames))


@dataclass(frozen=True)
class WindowSpec:
    window_s: float = 6.0
    core_s: float = 4.0
    train_slide_s: float = 0.5
    test_slide_s: float = 4.0
    sample_rate_hz: float = 100.0

    def __post_init__(self):
        if self.core_s <= 0 or self.core_s > self.window_s:
            raise ValueError(f"core_s must be in (0, window_s], got {self.core_s}")
        for name in ("window_s", "core_s", "train_slide_s", "test_slide_s"):
            if _whole_frames(getattr(self, name), self.sample_rate_hz, name) <= 0:
                raise ValueError(f"{name} must cover at least one frame")
        if (self.window_len - self.core_len) % 2:
            raise ValueError("window_s - core_s must split into two equal whole-frame flanks")
        if self.slide("test") != self.core_len:
            raise ValueError("test_slide_s must equal core_s so test cores tile the recording")

    @property
    def window_len(self) -> int:
        return _whole_frames(self.window_s, self.sample_rate_hz, "window_s")

    @property
    def core_len(self) -> int:
        return _whole_frames(self.core_s, self.sample_rate_hz, "core_s")

    @property
    def flank(self) -> int:
        return (self.window_len - self.core_len) // 2

    def slide(self, mode: str) -> int:
        if mode == "train":
            return _whole_frames(self.train_slide_s, self.sample_rate_hz, "train_slide_s")
        if mode == "test":
            return _whole_frames(self.test_slide_s, self.sample_rate_hz, "test_slide_s")
        raise ValueError(f"Window mode must be 'train' or 'test', got '{mode}'")


@dataclass(frozen=True, eq=False)
class Window:
    frames: np.ndarray
    core_start: int
    core_end: int
    recording_id: str
    start: int  # absolute frame of frames[0]; negative inside the leading pad

    @property
    def origin(self) -> tuple[str, int]:
        return (self.recording_id, self.start)

    @property
    def abs_core_start(self) -> int:
        return self.start + self.core_start

    @property
    def abs_core_end(self) -> int:
        return self.start + self.core_end


def core_starts(n_frames: int, spec: WindowSpec, mode: str) -> list[int]:
    """Absolute core start frames; test mode cores tile [0, n_frames)."""
    if n_frames < 1:
        raise ValueError("Recording must have at least one frame.")
    slide = spec.slide(mode)
    if mode == "test":
        count = math.ceil(n_frames / slide)
    else:
        count = 1 + math.ceil(max(n_frames - spec.core_len, 0) / slide)
    return [k * slide for k in range(count)]


def window_frames(frames: np.ndarray, core_start: int, spec: WindowSpec) -> np.ndarray:
    """Window around an absolute core start; out-of-range rows repeat the boundary frame."""
    indices = np.arange(core_start - spec.flank, core_start - spec.flank + spec.window_len)
    return frames[np.clip(indices, 0, frames.shape[0] - 1)]


def make_windows(recording: IMURecording, spec: WindowSpec, mode: str = "test") -> list[Window]:
    """
    Cut a recording into windows with a centered core.

    The recording is virtually padded by one flank at each end, so the first
    core starts at frame 0. Windows advance by the mode's slide; the last core is
    truncated at the recording end while the window keeps its full length.
    """
    n_frames = recording.n_frames
    windows = []
    for start in core_starts(n_frames, spec, mode):
        windows.append(
            Window(
                frames=window_frames(recording.frames, start, spec),
                core_start=spec.flank,
                core_end=spec.flank + min(spec.core_len, n_frames - start),
                recording_id=recording.recording_id,
                start=start - spec.flank,
            )
        )
    return windows


@dataclass(frozen=True)
class TargetSequence:
    tokens: tuple

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def codes(self) -> list[int]:
        return [int(t) for t in self.tokens]


def derive_target_sequence(
    segments,
    core_range: tuple[int, int],
    min_overlap_frames: int = 5,
    max_tokens: int = 16,
) -> TargetSequence:
    """
    Classes of the segments overlapping a core by at least min_overlap_frames.

    Args:
        segments: Sorted tiling of the recording.
        core_range (tuple[int, int]): Absolute [start, end) of the core; a Window's
            (abs_core_start, abs_core_end) works as well.
        min_overlap_frames (int): Overlap below this is ignored.
        max_tokens (int): Longer sequences are truncated with a warning.

    Returns:
        TargetSequence: Tokens in temporal order; when the threshold removes all of
        them, the class of the segment with the largest overlap.
    """
    if isinstance(core_range, Window):
        core_range = (core_range.abs_core_start, core_range.abs_core_end)
    core_start, core_end = core_range
    ends = [seg.end for seg in segments]
    position = bisect_right(ends, core_start)
    tokens = []
    best, best_overlap = None, -1
    while position < len(segments) and segments[position].start < core_end:
        seg = segments[position]
        overlap = min(seg.end, core_end) - max(seg.start, core_start)
        if overlap >= min_overlap_frames:
            tokens.append(PrimitiveClass(seg.primitive))
        if overlap > best_overlap:
            best, best_overlap = PrimitiveClass(seg.primitive), overlap
        position += 1

    if not tokens and best is not None:
        tokens = [best]
    if len(tokens) > max_tokens:
        LOGGER.warning(
            f"Core [{core_start}, {core_end}) holds {len(tokens)} primitives, truncated to {max_tokens}"
        )
        tokens = tokens[:max_tokens]
    return TargetSequence(tokens=tuple(tokens))


def window_targets(
    labeled,
    spec: WindowSpec,
    mode: str,
    min_overlap_frames: int = 5,
    max_tokens: int = 16,
):
    """(core start, core end, target) for every window of a labeled recording."""
    result = []
    for start, end in core_ranges(labeled.recording.n_frames, spec, mode):
        target = derive_target_sequence(
            labeled.segments, (start, end), min_overlap_frames, max_tokens
        )
        result.append((start, end, target))
    return result


def core_ranges(n_frames: int, spec: WindowSpec, mode: str = "test") -> list[tuple[int, int]]:
    """Absolute [start, end) of every core, in core start order."""
    return [
        (start, min(start + spec.core_len, n_frames))
        for start in core_starts(n_frames, spec, mode)
    ]
