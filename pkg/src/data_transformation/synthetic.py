"""
Desk-scale synthetic datasets with known ground truth, plus subject splits.

Every class emits its own noisy channel signature: a per-channel offset plus a
sinusoid of class-specific frequency. Quaternion groups rotate about a fixed
per-sensor axis by a class-specific angle signal, so they stay unit quaternions.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from logging_config import setup_logger
from src.data_transformation.dataset import (
    ACTIVITIES,
    CLASS_LABELS,
    N_CLASSES,
    ChannelManifest,
    Dataset,
    DatasetError,
    DatasetSplit,
    IMURecording,
    LabeledRecording,
    PrimitiveClass,
    PrimitiveSegment,
    QuantityKind,
    SubjectInfo,
)


LOGGER = setup_logger()

# shorter segments could fall under the target overlap threshold in both cores they touch
MIN_SEGMENT_FRAMES = 10

KIND_SCALE = {
    QuantityKind.ACCELERATION: 1.0,
    QuantityKind.JOINT_ANGLE: 30.0,
}


def _default_duration_ranges() -> dict:
    return {
        "reach": [0.6, 1.5],
        "reposition": [0.6, 1.5],
        "transport": [0.8, 2.0],
        "stabilize": [0.5, 1.5],
        "idle": [0.5, 2.5],
    }


@dataclass
class SynthesisSpec:
    n_subjects: int = 8
    trials_per_subject: int = 2
    duration_s: float = 60.0
    sample_rate_hz: float = 100.0
    noise_std: float = 0.1
    signature_amplitude: float = 0.5
    offset_scale: float = 1.0
    frequency_range_hz: list = field(default_factory=lambda: [0.3, 2.0])
    duration_ranges_s: dict = field(default_factory=_default_duration_ranges)
    activities: list = field(default_factory=lambda: list(ACTIVITIES))

    def validate(self) -> None:
        if self.n_subjects < 1 or self.trials_per_subject < 1:
            raise DatasetError("Synthesis needs at least one subject and one trial.")
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise DatasetError("Synthesis duration and sample rate must be positive.")
        if not self.activities:
            raise DatasetError("Synthesis needs at least one activity tag.")
        if set(self.duration_ranges_s) != set(CLASS_LABELS):
            raise DatasetError(
                f"duration_ranges_s must name exactly the classes {CLASS_LABELS}"
            )
        for label, (low, high) in self.duration_ranges_s.items():
            if low <= 0 or high < low:
                raise DatasetError(f"Bad duration range for '{label}': {low}..{high}")
            if round(low * self.sample_rate_hz) < MIN_SEGMENT_FRAMES:
                raise DatasetError(
                    f"Minimum duration of '{label}' is below {MIN_SEGMENT_FRAMES} frames."
                )

    def duration_ranges_frames(self) -> np.ndarray:
        ranges = np.zeros((N_CLASSES, 2), dtype=np.int64)
        for cls in PrimitiveClass:
            low, high = self.duration_ranges_s[cls.label]
            ranges[cls] = (
                round(low * self.sample_rate_hz),
                round(high * self.sample_rate_hz),
            )
        return ranges

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ClassSignatures:
    offsets: np.ndarray  # classes x channels
    frequencies: np.ndarray  # classes x channels
    axes: dict  # quaternion column -> unit rotation axis
    amplitude: float
    kind_scale: np.ndarray  # channels


def _as_seed_sequence(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)


def _seed_tree(seed: int, n_recordings: int):
    signature_seq, subject_seq, recording_seq = _as_seed_sequence(seed).spawn(3)
    per_recording = [child.spawn(2) for child in recording_seq.spawn(n_recordings)]
    return signature_seq, subject_seq, per_recording


def scheduler_rngs(seed: int, n_recordings: int) -> list[np.random.Generator]:
    """Generators the segment scheduler uses, one per recording, in generation order."""
    _, _, per_recording = _seed_tree(seed, n_recordings)
    return [np.random.default_rng(schedule) for schedule, _ in per_recording]


def make_signatures(
    spec: SynthesisSpec, manifest: ChannelManifest, rng: np.random.Generator
) -> ClassSignatures:
    n_channels = manifest.channel_count
    low, high = spec.frequency_range_hz
    offsets = rng.uniform(-spec.offset_scale, spec.offset_scale, (N_CLASSES, n_channels))
    frequencies = rng.uniform(low, high, (N_CLASSES, n_channels))
    axes = {}
    for _, column in manifest.quaternion_groups():
        axis = rng.normal(size=3)
        axes[column] = axis / np.linalg.norm(axis)
    kind_scale = np.array(
        [KIND_SCALE.get(c.kind, 1.0) for c in manifest.channels], dtype=np.float64
    )
    return ClassSignatures(
        offsets=offsets,
        frequencies=frequencies,
        axes=axes,
        amplitude=spec.signature_amplitude,
        kind_scale=kind_scale,
    )


def clean_signature(
    signatures: ClassSignatures,
    primitive: PrimitiveClass,
    n_frames: int,
    sample_rate_hz: float,
    noise: np.ndarray = None,
) -> np.ndarray:
    """
    Frames of one segment of `primitive`, time measured from the segment start.

    `noise` (frames x channels) is added before quaternion construction, so on
    quaternion columns it perturbs the rotation angle instead of the components.
    """
    tau = np.arange(n_frames, dtype=np.float64)[:, None] / sample_rate_hz
    values = signatures.offsets[primitive][None, :] + signatures.amplitude * np.sin(
        2.0 * math.pi * signatures.frequencies[primitive][None, :] * tau
    )
    if noise is not None:
        values = values + noise
    frames = values * signatures.kind_scale[None, :]
    for column, axis in signatures.axes.items():
        angle = values[:, column]
        frames[:, column] = np.cos(angle / 2.0)
        frames[:, column + 1 : column + 4] = np.sin(angle / 2.0)[:, None] * axis[None, :]
    return frames


def schedule_segments(
    rng: np.random.Generator, n_frames: int, duration_ranges: np.ndarray
) -> list[PrimitiveSegment]:
    """
    Draw a segment tiling of [0, n_frames).

    Adjacent segments never share a class, and a remainder shorter than
    MIN_SEGMENT_FRAMES is absorbed by the segment in front of it.
    """
    segments = []
    cursor = 0
    previous = None
    while cursor < n_frames:
        choices = [c for c in PrimitiveClass if c is not previous]
        primitive = choices[int(rng.integers(len(choices)))]
        low, high = duration_ranges[primitive]
        end = min(cursor + int(rng.integers(low, high + 1)), n_frames)
        if 0 < n_frames - end < MIN_SEGMENT_FRAMES:
            end = n_frames
        segments.append(PrimitiveSegment(primitive=primitive, start=cursor, end=end))
        cursor = end
        previous = primitive
    return segments


def _subject_ids(n_subjects: int) -> list[str]:
    width = max(2, len(str(n_subjects)))
    return [f"S{index + 1:0{width}d}" for index in range(n_subjects)]


def synthesize_dataset(
    spec: SynthesisSpec, manifest: ChannelManifest, seed: int
) -> Dataset:
    """
    Generate a dataset that is a pure function of (spec, manifest, seed).

    Parameters:
    - spec: SynthesisSpec - Sizes, signal shape and per-class duration ranges.
    - manifest: ChannelManifest - Channel layout of the generated frames.
    - seed: int - Any 64-bit integer.

    Returns:
    - Dataset - Recordings sorted by id with their SubjectInfo table.
    """
    spec.validate()
    n_recordings = spec.n_subjects * spec.trials_per_subject
    signature_seq, subject_seq, per_recording = _seed_tree(seed, n_recordings)
    signatures = make_signatures(spec, manifest, np.random.default_rng(signature_seq))
    subject_rng = np.random.default_rng(subject_seq)

    subjects = {}
    for subject_id in _subject_ids(spec.n_subjects):
        subjects[subject_id] = SubjectInfo(
            subject_id=subject_id,
            paretic_side=("left", "right")[int(subject_rng.integers(2))],
            ue_fma_score=int(subject_rng.integers(10, 67)),
        )

    n_frames = int(round(spec.duration_s * spec.sample_rate_hz))
    ranges = spec.duration_ranges_frames()
    recordings = []
    position = 0
    for subject_id in _subject_ids(spec.n_subjects):
        for trial in range(1, spec.trials_per_subject + 1):
            schedule_seq, noise_seq = per_recording[position]
            segments = schedule_segments(np.random.default_rng(schedule_seq), n_frames, ranges)
            noise_rng = np.random.default_rng(noise_seq)
            frames = np.empty((n_frames, manifest.channel_count), dtype=np.float64)
            for seg in segments:
                noise = None
                if spec.noise_std > 0:
                    noise = noise_rng.normal(
                        0.0, spec.noise_std, (seg.length, manifest.channel_count)
                    )
                frames[seg.start : seg.end] = clean_signature(
                    signatures, seg.primitive, seg.length, spec.sample_rate_hz, noise
                )
            recording = IMURecording(
                subject_id=subject_id,
                activity=spec.activities[position % len(spec.activities)],
                trial=trial,
                frames=frames,
                sample_rate_hz=spec.sample_rate_hz,
            )
            recordings.append(LabeledRecording(recording=recording, segments=segments))
            position += 1

    total_segments = sum(len(r.segments) for r in recordings)
    LOGGER.info(
        f"Synthesized {len(recordings)} recordings ({total_segments} segments) "
        f"for {spec.n_subjects} subjects with seed {seed}"
    )
    return Dataset(manifest=manifest, recordings=tuple(recordings), subjects=subjects)


def split_subjects(subjects, n_folds: int = 4, seed: int = 0, test_subjects=()):
    """
    Partition subjects into n_folds validation folds.

    Each subject is validated in exactly one fold and fold sizes differ by at
    most one (33 subjects, 4 folds -> 9, 8, 8, 8).
    """
    pool = sorted(set(subjects) - set(test_subjects))
    if n_folds < 2:
        raise DatasetError(f"n_folds must be at least 2, got {n_folds}")
    if len(pool) < n_folds:
        LOGGER.error(f"Too few subjects ({len(pool)}) for {n_folds} folds.")
        raise DatasetError(f"Too few subjects ({len(pool)}) for {n_folds} folds.")

    order = np.random.default_rng(_as_seed_sequence(seed)).permutation(len(pool))
    folds = np.array_split(np.array(pool)[order], n_folds)
    splits = []
    for fold in folds:
        val = frozenset(str(s) for s in fold)
        splits.append(
            DatasetSplit(
                train_subjects=frozenset(pool) - val,
                val_subjects=val,
                test_subjects=frozenset(test_subjects),
            )
        )
    LOGGER.info(f"Validation fold sizes: {[len(s.val_subjects) for s in splits]}")
    return splits


def hold_out_subjects(subjects, test_fraction: float, seed: int):
    """Pick a deterministic test subset; returns (remaining, held_out)."""
    pool = sorted(set(subjects))
    n_test = int(round(test_fraction * len(pool)))
    if test_fraction > 0:
        n_test = max(1, n_test)
    if n_test >= len(pool):
        raise DatasetError(
            f"test_fraction {test_fraction} leaves no training subjects out of {len(pool)}"
        )
    order = np.random.default_rng(_as_seed_sequence(seed).spawn(1)[0]).permutation(len(pool))
    held_out = sorted(pool[i] for i in order[:n_test])
    remaining = sorted(set(pool) - set(held_out))
    return remaining, held_out
