import json
import os
import time

import numpy as np
import polars as pl

from logging_config import setup_logger
from src.data_transformation.dataset import (
    ChannelManifest,
    Dataset,
    DatasetError,
    DimensionalityMismatchError,
    IMURecording,
    LabeledRecording,
    NonFiniteValueError,
    PrimitiveClass,
    PrimitiveSegment,
    RecordingFormatError,
    SubjectInfo,
)


LOGGER = setup_logger()
DEFAULT_MANIFEST_PATH = os.path.abspath(
    os.path.join(
        os.path.dirname(os.path.realpath(__file__)),
        "..",
        "..",
        "DATA",
        "default_manifest.json",
    )
)


def load_manifest(path: str = DEFAULT_MANIFEST_PATH) -> ChannelManifest:
    path = os.path.abspath(path)
    if not os.path.exists(path):
        LOGGER.error(f"Manifest '{path}' does not exist.")
        raise FileNotFoundError(f"Manifest '{path}' does not exist.")
    with open(path, "r", encoding="utf-8") as manifest_file:
        try:
            raw = json.load(manifest_file)
        except json.JSONDecodeError as e:
            raise RecordingFormatError(f"Manifest '{path}' is not valid JSON: {e}") from e
    return ChannelManifest.from_dict(raw)


def save_manifest(manifest: ChannelManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as manifest_file:
        json.dump(manifest.to_dict(), manifest_file, indent=2)


def _read_frames(frames_path: str, manifest: ChannelManifest) -> np.ndarray:
    """
    Parse a frames CSV (`t,<channel names>`) into a frames x channels matrix.

    Raises:
        DimensionalityMismatchError: Header or a row does not carry manifest.channel_count values.
        RecordingFormatError: Malformed header, empty field or non-numeric value.
        NonFiniteValueError: NaN or infinite value.
    """
    try:
        raw = pl.read_csv(frames_path, infer_schema_length=0)
    except (pl.exceptions.PolarsError, UnicodeDecodeError) as e:
        LOGGER.error(f"Could not parse frames file '{frames_path}': {e}")
        raise RecordingFormatError(f"Could not parse frames file '{frames_path}': {e}") from e

    columns = raw.columns
    if not columns or columns[0] != "t":
        raise RecordingFormatError(
            f"Frames file '{frames_path}' must start with a 't' column, got {columns[:1]}"
        )
    if len(columns) - 1 != manifest.channel_count:
        LOGGER.error(f"dimensionality mismatch in '{frames_path}'")
        raise DimensionalityMismatchError(
            f"dimensionality mismatch: '{frames_path}' has {len(columns) - 1} channel "
            f"columns, manifest has {manifest.channel_count}"
        )
    if columns[1:] != manifest.names:
        raise RecordingFormatError(
            f"Frames header of '{frames_path}' does not match the manifest channel names."
        )
    if raw.height == 0:
        raise RecordingFormatError(f"Frames file '{frames_path}' has no rows.")

    missing = raw.drop("t").select(pl.all().is_null()).to_numpy()
    if missing.any():
        row = int(np.argwhere(missing.any(axis=1))[0][0])
        present = ~missing[row]
        n_values = int(present.sum())
        # short rows come back padded with trailing nulls
        if present[:n_values].all():
            LOGGER.error(f"dimensionality mismatch in '{frames_path}' row {row}")
            raise DimensionalityMismatchError(
                f"dimensionality mismatch: row {row} of '{frames_path}' has {n_values} "
                f"values, manifest has {manifest.channel_count}"
            )
        raise RecordingFormatError(f"Empty field in row {row} of '{frames_path}'")

    try:
        frames = raw.drop("t").select(pl.all().cast(pl.Float64, strict=True)).to_numpy()
    except pl.exceptions.PolarsError as e:
        LOGGER.error(f"Malformed value in '{frames_path}': {e}")
        raise RecordingFormatError(f"Malformed value in '{frames_path}': {e}") from e

    if not np.all(np.isfinite(frames)):
        row = int(np.argwhere(~np.isfinite(frames))[0][0])
        raise NonFiniteValueError(f"Non-finite value in row {row} of '{frames_path}'")
    return frames


def _read_segments(labels_path: str) -> list[PrimitiveSegment]:
    with open(labels_path, "r", encoding="utf-8") as labels_file:
        try:
            raw = json.load(labels_file)
        except json.JSONDecodeError as e:
            raise RecordingFormatError(f"Labels '{labels_path}' are not valid JSON: {e}") from e
    if not isinstance(raw, list):
        raise RecordingFormatError(f"Labels '{labels_path}' must be a JSON array.")
    segments = []
    for position, item in enumerate(raw):
        try:
            start, end = item["start"], item["end"]
            for bound in (start, end):
                if isinstance(bound, bool) or not isinstance(bound, int):
                    raise TypeError("start/end must be integers")
            segments.append(
                PrimitiveSegment(
                    primitive=PrimitiveClass.from_label(item["class"]),
                    start=start,
                    end=end,
                )
            )
        except (KeyError, TypeError, AttributeError) as e:
            raise RecordingFormatError(
                f"Malformed label #{position} in '{labels_path}': {item} ({e})"
            ) from e
    return segments


def meta_path_for(labels_path: str) -> str:
    if labels_path.endswith(".labels.json"):
        return labels_path[: -len(".labels.json")] + ".meta.json"
    return os.path.splitext(labels_path)[0] + ".meta.json"


def load_recording(
    frames_path: str,
    labels_path: str,
    manifest: ChannelManifest,
    meta_path: str = None,
) -> LabeledRecording:
    """
    Load and validate one labeled recording.

    Args:
        frames_path (str): CSV with header `t,<channel names>`.
        labels_path (str): JSON array of `{"class", "start", "end"}` objects.
        manifest (ChannelManifest): Expected channel layout.
        meta_path (str): Sibling JSON with subject/activity/trial; derived from labels_path when omitted.

    Returns:
        LabeledRecording: Recording with its segment tiling checked.
    """
    for path in (frames_path, labels_path):
        if not os.path.exists(path):
            LOGGER.error(f"Path '{path}' does not exist.")
            raise FileNotFoundError(f"Path '{path}' does not exist.")

    meta_path = meta_path or meta_path_for(labels_path)
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as meta_file:
            meta = json.load(meta_file)
    else:
        LOGGER.warning(f"No metadata next to '{labels_path}', using placeholders.")

    frames = _read_frames(frames_path, manifest)
    recording = IMURecording(
        subject_id=str(meta.get("subject_id", "unknown")),
        activity=str(meta.get("activity", "unknown")),
        trial=int(meta.get("trial", 0)),
        frames=frames,
        sample_rate_hz=float(meta.get("sample_rate_hz", 100.0)),
    )
    return LabeledRecording(recording=recording, segments=_read_segments(labels_path))


def save_recording(labeled: LabeledRecording, manifest: ChannelManifest, directory: str):
    recording = labeled.recording
    stem = os.path.join(directory, recording.recording_id)
    frame_table = {"t": np.arange(recording.n_frames) / recording.sample_rate_hz}
    for position, name in enumerate(manifest.names):
        frame_table[name] = recording.frames[:, position]
    pl.DataFrame(frame_table).write_csv(f"{stem}.frames.csv")

    with open(f"{stem}.labels.json", "w", encoding="utf-8") as labels_file:
        json.dump(
            [
                {"class": seg.primitive.label, "start": seg.start, "end": seg.end}
                for seg in labeled.segments
            ],
            labels_file,
            indent=1,
        )
    with open(f"{stem}.meta.json", "w", encoding="utf-8") as meta_file:
        json.dump(
            {
                "subject_id": recording.subject_id,
                "activity": recording.activity,
                "trial": recording.trial,
                "sample_rate_hz": recording.sample_rate_hz,
            },
            meta_file,
            indent=2,
        )


class data_manager:
    """
    Class to manage dataset directories.

    Layout: `manifest.json`, `subjects.json` and `recordings/<id>.{frames.csv,labels.json,meta.json}`.

    Attributes:
        data_path (str): Dataset root directory.
        dataset (Dataset): Loaded dataset, None until load_dataset() is called.
    """

    def __init__(self, data_path: str):
        """
        Initialize the manager with the dataset root.

        Args:
            data_path (str): Path to the dataset directory.
        """
        LOGGER.info(f"Data manager initialized, input path: '{data_path}'")

        self.data_path = os.path.abspath(data_path)
        self.dataset = None

    @property
    def recordings_dir(self) -> str:
        return os.path.join(self.data_path, "recordings")

    def load_dataset(self, manifest: ChannelManifest = None) -> Dataset:
        """
        Load every recording under the dataset root.

        Raises:
            FileNotFoundError: The root or subjects.json is missing.
        """
        LOGGER.info(f"Checking if '{self.data_path}' exists")
        if not os.path.isdir(self.data_path):
            LOGGER.error(f"Path '{self.data_path}' does not exist.")
            raise FileNotFoundError(f"Path '{self.data_path}' does not exist.")

        start_time = time.time()
        local_manifest = os.path.join(self.data_path, "manifest.json")
        if manifest is None:
            manifest = load_manifest(
                local_manifest if os.path.exists(local_manifest) else DEFAULT_MANIFEST_PATH
            )

        subjects_path = os.path.join(self.data_path, "subjects.json")
        if not os.path.exists(subjects_path):
            LOGGER.error(f"Path '{subjects_path}' does not exist.")
            raise FileNotFoundError(f"Path '{subjects_path}' does not exist.")
        with open(subjects_path, "r", encoding="utf-8") as subjects_file:
            subjects = {
                raw["subject_id"]: SubjectInfo(
                    subject_id=raw["subject_id"],
                    paretic_side=raw["paretic_side"],
                    ue_fma_score=int(raw["ue_fma_score"]),
                )
                for raw in json.load(subjects_file)
            }

        recordings = []
        if os.path.isdir(self.recordings_dir):
            for file_name in sorted(os.listdir(self.recordings_dir)):
                if not file_name.endswith(".frames.csv"):
                    continue
                stem = os.path.join(
                    self.recordings_dir, file_name[: -len(".frames.csv")]
                )
                recordings.append(
                    load_recording(f"{stem}.frames.csv", f"{stem}.labels.json", manifest)
                )

        try:
            self.dataset = Dataset(
                manifest=manifest, recordings=tuple(recordings), subjects=subjects
            )
        except DatasetError as e:
            LOGGER.error(f"Error while assembling dataset: {e}", exc_info=True)
            raise
        LOGGER.info(
            f"Dataset loaded: {len(recordings)} recordings, {len(subjects)} subjects. "
            f"Time taken:  {time.time() - start_time}"
        )
        return self.dataset

    def save_dataset(self, dataset: Dataset = None) -> None:
        dataset = dataset or self.dataset
        if dataset is None:
            LOGGER.error("No dataset to save.")
            raise ValueError("No dataset to save.")

        os.makedirs(self.recordings_dir, exist_ok=True)
        save_manifest(dataset.manifest, os.path.join(self.data_path, "manifest.json"))
        with open(
            os.path.join(self.data_path, "subjects.json"), "w", encoding="utf-8"
        ) as subjects_file:
            json.dump(
                [dataset.subjects[s].to_dict() for s in dataset.subject_ids],
                subjects_file,
                indent=2,
            )
        for labeled in dataset.recordings:
            save_recording(labeled, dataset.manifest, self.recordings_dir)
        self.dataset = dataset
        LOGGER.info(
            f"Saved {len(dataset.recordings)} recordings in to: '{self.data_path}'."
        )
