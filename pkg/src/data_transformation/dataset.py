"""
Data model for labeled inertial recordings.

A recording is a uniformly sampled matrix of frames (one row per 10 ms at 100 Hz)
whose columns are described by a ChannelManifest. Ground truth is an ordered
tiling of primitive segments over the frame indices.
"""

from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from logging_config import setup_logger


LOGGER = setup_logger()

ACTIVITIES = (
    "shelf",
    "tabletop",
    "feeding",
    "drinking",
    "combing",
    "donning_glasses",
    "applying_deodorant",
    "face_washing",
    "tooth_brushing",
)


class DatasetError(ValueError):
    """Base class for rejected recordings, labels and manifests."""


class RecordingFormatError(DatasetError):
    pass


class DimensionalityMismatchError(DatasetError):
    pass


class SegmentTilingError(DatasetError):
    pass


class NonFiniteValueError(DatasetError):
    pass


class PrimitiveClass(IntEnum):
    REACH = 0
    REPOSITION = 1
    TRANSPORT = 2
    STABILIZE = 3
    IDLE = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "PrimitiveClass":
        try:
            return cls[label.strip().upper()]
        except KeyError:
            raise RecordingFormatError(f"Unknown primitive class '{label}'") from None


N_CLASSES = len(PrimitiveClass)
CLASS_LABELS = tuple(c.label for c in PrimitiveClass)


class QuantityKind(str, Enum):
    ACCELERATION = "acceleration"
    QUATERNION = "quaternion-component"
    JOINT_ANGLE = "joint-angle"


@dataclass(frozen=True)
class ChannelDescriptor:
    name: str
    sensor: str
    kind: QuantityKind
    unit: str
    component: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sensor": self.sensor,
            "kind": self.kind.value,
            "unit": self.unit,
            "component": self.component,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ChannelDescriptor":
        try:
            return cls(
                name=str(raw["name"]),
                sensor=str(raw["sensor"]),
                kind=QuantityKind(raw["kind"]),
                unit=str(raw.get("unit", "")),
                component=str(raw.get("component", "")),
            )
        except (KeyError, ValueError) as e:
            raise RecordingFormatError(f"Bad channel descriptor {raw}: {e}") from e


@dataclass(frozen=True)
class ChannelManifest:
    """
    Describes the columns of every frame.

    Quaternion channels are stored as contiguous w, x, y, z groups, one group
    per sensor. Everything downstream only relies on `channel_count` and
    `quaternion_groups()`, so the layout can change without touching the model.
    """

    channels: tuple

    def __post_init__(self):
        if not self.channels:
            raise DatasetError("Manifest must describe at least one channel.")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise DatasetError("Manifest channel names must be unique.")
        self._check_quaternion_groups()

    @property
    def channel_count(self) -> int:
        return len(self.channels)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.channels]

    def _check_quaternion_groups(self):
        idx = 0
        while idx < len(self.channels):
            channel = self.channels[idx]
            if channel.kind is not QuantityKind.QUATERNION:
                idx += 1
                continue
            group = self.channels[idx : idx + 4]
            if (
                len(group) != 4
                or any(c.kind is not QuantityKind.QUATERNION for c in group)
                or any(c.sensor != channel.sensor for c in group)
                or [c.component for c in group] != ["w", "x", "y", "z"]
            ):
                raise DatasetError(
                    f"Quaternion channels of sensor '{channel.sensor}' starting at "
                    f"column {idx} are not a contiguous w, x, y, z group."
                )
            idx += 4

    def quaternion_groups(self) -> list[tuple[str, int]]:
        """Return (sensor, first column) for every quaternion group."""
        return [
            (c.sensor, i)
            for i, c in enumerate(self.channels)
            if c.kind is QuantityKind.QUATERNION and c.component == "w"
        ]

    def to_dict(self) -> dict:
        return {
            "channel_count": self.channel_count,
            "channels": [c.to_dict() for c in self.channels],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ChannelManifest":
        channels = tuple(ChannelDescriptor.from_dict(c) for c in raw["channels"])
        declared = raw.get("channel_count", len(channels))
        if declared != len(channels):
            raise DatasetError(
                f"Manifest declares {declared} channels but lists {len(channels)}."
            )
        return cls(channels=channels)


@dataclass(frozen=True, eq=False)
class IMURecording:
    subject_id: str
    activity: str
    trial: int
    frames: np.ndarray
    sample_rate_hz: float = 100.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise RecordingFormatError(
                f"Recording '{self.recording_id}' needs a non-empty 2D frame matrix, "
                f"got shape {frames.shape}."
            )
        if not np.all(np.isfinite(frames)):
            row = int(np.argwhere(~np.isfinite(frames))[0][0])
            LOGGER.error(f"Non-finite value in recording '{self.recording_id}'")
            raise NonFiniteValueError(
                f"Recording '{self.recording_id}' has a non-finite value in frame {row}."
            )
        if self.sample_rate_hz <= 0:
            raise RecordingFormatError("sample_rate_hz must be positive.")
        frames = frames.copy() if frames is self.frames else frames
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def recording_id(self) -> str:
        return f"{self.subject_id}_{self.activity}_{self.trial}"

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def channel_count(self) -> int:
        return int(self.frames.shape[1])

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.sample_rate_hz

    def with_frames(self, frames: np.ndarray) -> "IMURecording":
        return IMURecording(
            subject_id=self.subject_id,
            activity=self.activity,
            trial=self.trial,
            frames=frames,
            sample_rate_hz=self.sample_rate_hz,
        )


@dataclass(frozen=True)
class PrimitiveSegment:
    primitive: PrimitiveClass
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


def validate_segments(segments, n_frames: int) -> None:
    """
    Check that segments are sorted, non-overlapping and tile [0, n_frames).

    Raises:
        SegmentTilingError: With a message naming the violated rule.
    """
    if not segments:
        raise SegmentTilingError("segments do not cover the recording: no segments")
    cursor = 0
    for seg in segments:
        if seg.start >= seg.end:
            raise SegmentTilingError(
                f"empty or inverted segment {seg.primitive.label} [{seg.start}, {seg.end})"
            )
        if seg.start < cursor:
            raise SegmentTilingError(
                f"overlapping segments at frame {seg.start} (previous segment ends at {cursor})"
            )
        if seg.start > cursor:
            raise SegmentTilingError(
                f"gap between segments: frames [{cursor}, {seg.start}) are unlabeled"
            )
        cursor = seg.end
    if cursor != n_frames:
        raise SegmentTilingError(
            f"segments do not cover the recording: tiling ends at {cursor}, "
            f"recording has {n_frames} frames"
        )


@dataclass(frozen=True, eq=False)
class LabeledRecording:
    recording: IMURecording
    segments: tuple

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        try:
            validate_segments(self.segments, self.recording.n_frames)
        except SegmentTilingError as e:
            LOGGER.error(f"Recording '{self.recording.recording_id}': {e}")
            raise

    @property
    def recording_id(self) -> str:
        return self.recording.recording_id

    def class_sequence(self) -> list[PrimitiveClass]:
        return [seg.primitive for seg in self.segments]

    def frame_labels(self) -> np.ndarray:
        labels = np.empty(self.recording.n_frames, dtype=np.int64)
        for seg in self.segments:
            labels[seg.start : seg.end] = int(seg.primitive)
        return labels

    def with_recording(self, recording: IMURecording) -> "LabeledRecording":
        return LabeledRecording(recording=recording, segments=self.segments)


@dataclass(frozen=True)
class SubjectInfo:
    subject_id: str
    paretic_side: str
    ue_fma_score: int

    def __post_init__(self):
        if self.paretic_side not in ("left", "right"):
            raise DatasetError(
                f"paretic_side must be 'left' or 'right', got '{self.paretic_side}'"
            )
        if not 0 <= int(self.ue_fma_score) <= 66:
            raise DatasetError(
                f"UE-FMA score {self.ue_fma_score} of '{self.subject_id}' is outside 0..66"
            )

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "paretic_side": self.paretic_side,
            "ue_fma_score": int(self.ue_fma_score),
        }


@dataclass(frozen=True)
class DatasetSplit:
    train_subjects: frozenset
    val_subjects: frozenset
    test_subjects: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        for name in ("train_subjects", "val_subjects", "test_subjects"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if (
            self.train_subjects & self.val_subjects
            or self.train_subjects & self.test_subjects
            or self.val_subjects & self.test_subjects
        ):
            raise DatasetError("Train, validation and test subjects must be disjoint.")

    def validate_against(self, known_subjects) -> None:
        unknown = (
            self.train_subjects | self.val_subjects | self.test_subjects
        ) - set(known_subjects)
        if unknown:
            raise DatasetError(f"Split lists unknown subjects: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "train_subjects": sorted(self.train_subjects),
            "val_subjects": sorted(self.val_subjects),
            "test_subjects": sorted(self.test_subjects),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetSplit":
        return cls(
            train_subjects=frozenset(raw["train_subjects"]),
            val_subjects=frozenset(raw["val_subjects"]),
            test_subjects=frozenset(raw.get("test_subjects", [])),
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    manifest: ChannelManifest
    recordings: tuple
    subjects: dict

    def __post_init__(self):
        object.__setattr__(
            self,
            "recordings",
            tuple(sorted(self.recordings, key=lambda r: r.recording_id)),
        )
        for labeled in self.recordings:
            if labeled.recording.channel_count != self.manifest.channel_count:
                raise DimensionalityMismatchError(
                    f"Recording '{labeled.recording_id}' has "
                    f"{labeled.recording.channel_count} channels, manifest has "
                    f"{self.manifest.channel_count}."
                )
            if labeled.recording.subject_id not in self.subjects:
                raise DatasetError(
                    f"Recording '{labeled.recording_id}' belongs to unknown subject "
                    f"'{labeled.recording.subject_id}'."
                )

    @property
    def subject_ids(self) -> list[str]:
        return sorted(self.subjects)

    def for_subjects(self, subject_ids) -> list[LabeledRecording]:
        wanted = set(subject_ids)
        return [r for r in self.recordings if r.recording.subject_id in wanted]
