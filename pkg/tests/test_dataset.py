import json
import os

import numpy as np
import pytest

from src.data_transformation.data_manager import (
    DEFAULT_MANIFEST_PATH,
    data_manager,
    load_manifest,
    load_recording,
    save_recording,
)
from src.data_transformation.dataset import (
    CLASS_LABELS,
    DatasetSplit,
    DatasetError,
    DimensionalityMismatchError,
    IMURecording,
    NonFiniteValueError,
    PrimitiveClass,
    PrimitiveSegment,
    RecordingFormatError,
    SegmentTilingError,
    SubjectInfo,
    validate_segments,
)
from src.data_transformation.synthetic import (
    SynthesisSpec,
    clean_signature,
    hold_out_subjects,
    make_signatures,
    scheduler_rngs,
    schedule_segments,
    split_subjects,
    synthesize_dataset,
)
from tests.helpers import N_SMALL_CHANNELS, make_labeled, make_small_manifest


def write_frames(path, manifest, rows):
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(["t", *manifest.names]) + "\n")
        for index, row in enumerate(rows):
            f.write(",".join([f"{index / 100:.2f}", *row]) + "\n")


def write_labels(path, segments):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([{"class": c, "start": s, "end": e} for c, s, e in segments], f)


@pytest.fixture
def manifest():
    return make_small_manifest()


@pytest.fixture
def frame_rows():
    rng = np.random.default_rng(3)
    return [[f"{v:.9f}" for v in row] for row in rng.normal(size=(600, N_SMALL_CHANNELS))]


class TestPrimitiveClass:
    def test_five_stable_codes(self):
        assert [int(c) for c in PrimitiveClass] == [0, 1, 2, 3, 4]
        assert CLASS_LABELS == ("reach", "reposition", "transport", "stabilize", "idle")

    def test_from_label(self):
        assert PrimitiveClass.from_label("Transport") is PrimitiveClass.TRANSPORT
        with pytest.raises(RecordingFormatError):
            PrimitiveClass.from_label("grasp")


class TestManifest:
    def test_default_manifest_has_77_channels(self):
        manifest = load_manifest(DEFAULT_MANIFEST_PATH)
        assert manifest.channel_count == 77
        for _, column in manifest.quaternion_groups():
            assert [c.component for c in manifest.channels[column : column + 4]] == list("wxyz")

    def test_broken_quaternion_group(self, manifest):
        channels = list(manifest.channels)
        channels[1], channels[4] = channels[4], channels[1]
        with pytest.raises(DatasetError):
            type(manifest)(channels=tuple(channels))


class TestLoadRecording:
    def test_tiling_case(self, tmp_path, manifest, frame_rows):
        write_frames(tmp_path / "r.frames.csv", manifest, frame_rows)
        write_labels(
            tmp_path / "r.labels.json", [("idle", 0, 100), ("reach", 100, 300), ("idle", 300, 600)]
        )
        labeled = load_recording(
            str(tmp_path / "r.frames.csv"), str(tmp_path / "r.labels.json"), manifest
        )
        assert len(labeled.segments) == 3
        assert labeled.recording.n_frames == 600
        assert labeled.class_sequence() == [
            PrimitiveClass.IDLE,
            PrimitiveClass.REACH,
            PrimitiveClass.IDLE,
        ]

    def test_overlapping_segments(self, tmp_path, manifest, frame_rows):
        write_frames(tmp_path / "r.frames.csv", manifest, frame_rows)
        write_labels(tmp_path / "r.labels.json", [("reach", 0, 300), ("idle", 250, 600)])
        with pytest.raises(SegmentTilingError, match="overlapping segments"):
            load_recording(str(tmp_path / "r.frames.csv"), str(tmp_path / "r.labels.json"), manifest)

    def test_gap_and_short_cover(self):
        with pytest.raises(SegmentTilingError, match="gap between segments"):
            validate_segments(
                [PrimitiveSegment(PrimitiveClass.REACH, 0, 10), PrimitiveSegment(PrimitiveClass.IDLE, 12, 20)],
                20,
            )
        with pytest.raises(SegmentTilingError, match="segments do not cover"):
            validate_segments([PrimitiveSegment(PrimitiveClass.REACH, 0, 10)], 20)

    def test_short_row_is_dimensionality_mismatch(self, tmp_path, manifest, frame_rows):
        frame_rows[5] = frame_rows[5][:-1]
        write_frames(tmp_path / "r.frames.csv", manifest, frame_rows)
        write_labels(tmp_path / "r.labels.json", [("idle", 0, 600)])
        with pytest.raises(DimensionalityMismatchError, match="dimensionality mismatch"):
            load_recording(str(tmp_path / "r.frames.csv"), str(tmp_path / "r.labels.json"), manifest)

    def test_malformed_value(self, tmp_path, manifest, frame_rows):
        frame_rows[2][3] = "abc"
        write_frames(tmp_path / "r.frames.csv", manifest, frame_rows)
        write_labels(tmp_path / "r.labels.json", [("idle", 0, 600)])
        with pytest.raises(RecordingFormatError):
            load_recording(str(tmp_path / "r.frames.csv"), str(tmp_path / "r.labels.json"), manifest)

    def test_non_finite_value(self, tmp_path, manifest, frame_rows):
        frame_rows[7][0] = "nan"
        write_frames(tmp_path / "r.frames.csv", manifest, frame_rows)
        write_labels(tmp_path / "r.labels.json", [("idle", 0, 600)])
        with pytest.raises(NonFiniteValueError):
            load_recording(str(tmp_path / "r.frames.csv"), str(tmp_path / "r.labels.json"), manifest)

    @pytest.mark.parametrize("bounds", [(False, 600), (0, True), (0.0, 600), ("0", 600)])
    def test_non_integer_bounds(self, tmp_path, manifest, frame_rows, bounds):
        write_frames(tmp_path / "r.frames.csv", manifest, frame_rows)
        write_labels(tmp_path / "r.labels.json", [("idle", *bounds)])
        with pytest.raises(RecordingFormatError, match="Malformed label #0"):
            load_recording(str(tmp_path / "r.frames.csv"), str(tmp_path / "r.labels.json"), manifest)

    def test_missing_file(self, tmp_path, manifest):
        with pytest.raises(FileNotFoundError):
            load_recording(str(tmp_path / "a.csv"), str(tmp_path / "a.json"), manifest)

    def test_save_then_load_keeps_frames(self, tmp_path, manifest):
        labeled = make_labeled([(0, 50), (4, 70)], subject_id="S03", activity="feeding", trial=2)
        save_recording(labeled, manifest, str(tmp_path))
        stem = tmp_path / labeled.recording_id
        loaded = load_recording(f"{stem}.frames.csv", f"{stem}.labels.json", manifest)
        assert loaded.recording_id == "S03_feeding_2"
        assert loaded.segments == labeled.segments
        np.testing.assert_allclose(loaded.recording.frames, labeled.recording.frames, rtol=1e-12)


class TestTypes:
    def test_recording_rejects_non_finite(self):
        frames = np.ones((5, 3))
        frames[2, 1] = np.inf
        with pytest.raises(NonFiniteValueError):
            IMURecording(subject_id="S01", activity="shelf", trial=1, frames=frames)

    def test_subject_score_range(self):
        with pytest.raises(DatasetError):
            SubjectInfo(subject_id="S01", paretic_side="left", ue_fma_score=67)
        with pytest.raises(DatasetError):
            SubjectInfo(subject_id="S01", paretic_side="both", ue_fma_score=30)

    def test_split_sets_disjoint(self):
        with pytest.raises(DatasetError):
            DatasetSplit(train_subjects={"S01", "S02"}, val_subjects={"S02"})
        split = DatasetSplit(train_subjects={"S01"}, val_subjects={"S02"}, test_subjects={"S03"})
        assert DatasetSplit.from_dict(split.to_dict()) == split

    def test_frame_labels_follow_segments(self):
        labeled = make_labeled([(1, 3), (2, 2)])
        assert labeled.frame_labels().tolist() == [1, 1, 1, 2, 2]


class TestSynthesizeDataset:
    def test_deterministic(self, small_manifest, small_spec):
        first = synthesize_dataset(small_spec, small_manifest, seed=1)
        second = synthesize_dataset(small_spec, small_manifest, seed=1)
        assert [r.recording_id for r in first.recordings] == [r.recording_id for r in second.recordings]
        for a, b in zip(first.recordings, second.recordings):
            assert np.array_equal(a.recording.frames, b.recording.frames)
            assert a.segments == b.segments
        assert first.subjects == second.subjects

    def test_tiling_and_no_repeated_neighbours(self, small_dataset):
        for labeled in small_dataset.recordings:
            assert sum(s.length for s in labeled.segments) == labeled.recording.n_frames
            classes = labeled.class_sequence()
            assert all(a != b for a, b in zip(classes, classes[1:]))

    def test_zero_noise_frames_equal_clean_signature(self, small_manifest):
        spec = SynthesisSpec(n_subjects=1, trials_per_subject=1, duration_s=10.0, noise_std=0.0)
        dataset = synthesize_dataset(spec, small_manifest, seed=5)
        signature_seq = np.random.SeedSequence(5).spawn(3)[0]
        signatures = make_signatures(spec, small_manifest, np.random.default_rng(signature_seq))
        labeled = dataset.recordings[0]
        for seg in labeled.segments:
            expected = clean_signature(signatures, seg.primitive, seg.length, spec.sample_rate_hz)
            np.testing.assert_array_equal(labeled.recording.frames[seg.start : seg.end], expected)

    def test_segment_counts_match_scheduler_replay(self, small_manifest, small_spec, small_dataset):
        n_frames = int(round(small_spec.duration_s * small_spec.sample_rate_hz))
        replayed = np.zeros(len(PrimitiveClass), dtype=int)
        rngs = scheduler_rngs(7, small_spec.n_subjects * small_spec.trials_per_subject)
        for rng in rngs:
            for seg in schedule_segments(rng, n_frames, small_spec.duration_ranges_frames()):
                replayed[seg.primitive] += 1
        generated = np.zeros(len(PrimitiveClass), dtype=int)
        for labeled in small_dataset.recordings:
            for seg in labeled.segments:
                generated[seg.primitive] += 1
        assert generated.tolist() == replayed.tolist()

    def test_degenerate_spec(self, small_manifest):
        with pytest.raises(DatasetError):
            synthesize_dataset(SynthesisSpec(n_subjects=0), small_manifest, seed=0)
        with pytest.raises(DatasetError):
            synthesize_dataset(SynthesisSpec(duration_s=0.0), small_manifest, seed=0)

    def test_save_and_load_dataset(self, tmp_path, small_dataset):
        manager = data_manager(str(tmp_path / "dataset"))
        manager.save_dataset(small_dataset)
        assert os.path.exists(tmp_path / "dataset" / "subjects.json")
        loaded = data_manager(str(tmp_path / "dataset")).load_dataset()
        assert [r.recording_id for r in loaded.recordings] == [
            r.recording_id for r in small_dataset.recordings
        ]
        assert loaded.subjects == small_dataset.subjects


class TestSplitSubjects:
    def test_33_subjects_in_4_folds(self):
        subjects = [f"S{i:02d}" for i in range(33)]
        splits = split_subjects(subjects, n_folds=4, seed=0)
        assert sorted(len(s.val_subjects) for s in splits) == [8, 8, 8, 9]

    def test_singleton_folds(self):
        splits = split_subjects(["a", "b", "c", "d"], n_folds=4, seed=3)
        assert all(len(s.val_subjects) == 1 for s in splits)

    def test_partition(self):
        subjects = {f"S{i:02d}" for i in range(10)}
        splits = split_subjects(subjects, n_folds=3, seed=9)
        assert set().union(*(s.val_subjects for s in splits)) == subjects
        for split in splits:
            assert split.train_subjects | split.val_subjects == subjects
        assert sum(len(s.val_subjects) for s in splits) == len(subjects)

    def test_deterministic_given_seed(self):
        subjects = [f"S{i:02d}" for i in range(12)]
        assert split_subjects(subjects, 4, seed=5) == split_subjects(subjects, 4, seed=5)

    def test_too_few_subjects(self):
        with pytest.raises(DatasetError):
            split_subjects(["a", "b"], n_folds=4)

    def test_hold_out(self):
        subjects = [f"S{i:02d}" for i in range(8)]
        remaining, held_out = hold_out_subjects(subjects, 0.25, seed=0)
        assert len(held_out) == 2
        assert sorted(remaining + held_out) == subjects
        assert hold_out_subjects(subjects, 0.0, seed=0) == (subjects, [])
