import functools
import json
import time
from dataclasses import dataclass, field
from typing import Optional

from tqdm import tqdm

from logging_config import setup_logger
from src.counting.decode_count import count, decode_window, stitch_windows
from src.data_transformation.preprocess import WindowSpec, make_windows

LOGGER = setup_logger()

STAGES = ("windowing", "decode", "stitch", "count")


def check_time(funcion):
    """
    Decorator function to measure the execution time of a function.

    Args:
        funcion (function): The function to be wrapped.

    Returns:
        function: The wrapped function, returning (result, seconds).
    """

    @functools.wraps(funcion)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        result = funcion(*args, **kwargs)
        return result, time.perf_counter() - start_time

    return wrapper


@check_time
def timed_windows(recording, window_spec):
    return make_windows(recording, window_spec, "test")


@check_time
def timed_decode(ensemble, windows):
    return [decode_window(ensemble, window) for window in windows]


@check_time
def timed_stitch(predictions):
    return stitch_windows(predictions)


@check_time
def timed_count(session, activity):
    return count(session, activity)


@dataclass
class BenchReport:
    n_recordings: int = 0
    n_windows: int = 0
    recording_seconds: float = 0.0
    stage_seconds: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    counts: dict = field(default_factory=dict)  # recording id -> label -> count

    @property
    def compute_seconds(self) -> float:
        return sum(self.stage_seconds.values())

    @property
    def recording_minutes(self) -> float:
        return self.recording_seconds / 60.0

    @property
    def seconds_per_minute(self) -> Optional[float]:
        if self.recording_seconds == 0:
            return None
        return self.compute_seconds / self.recording_minutes

    @property
    def speedup(self) -> Optional[float]:
        """Recording duration over compute time; above 1 is faster than real time."""
        if self.recording_seconds == 0 or self.compute_seconds == 0:
            return None
        return self.recording_seconds / self.compute_seconds

    def to_dict(self) -> dict:
        return {
            "n_recordings": self.n_recordings,
            "n_windows": self.n_windows,
            "recording_seconds": self.recording_seconds,
            "recording_minutes": self.recording_minutes,
            "compute_seconds": self.compute_seconds,
            "seconds_per_minute": self.seconds_per_minute,
            "speedup": self.speedup,
            "stage_seconds": self.stage_seconds,
            "counts": self.counts,
        }


def bench(recordings, ensemble, window_spec: WindowSpec = WindowSpec(), progress=True):
    """
    Time the windowing, decode, stitch and count path over preprocessed recordings.

    Parameters:
    - recordings: list of IMURecording
    - ensemble: EnsembleModel
    - window_spec: WindowSpec

    Returns:
    - BenchReport
    """
    report = BenchReport()
    for recording in tqdm(recordings, desc="bench", disable=not progress):
        windows, seconds = timed_windows(recording, window_spec)
        report.stage_seconds["windowing"] += seconds
        predictions, seconds = timed_decode(ensemble, windows)
        report.stage_seconds["decode"] += seconds
        session, seconds = timed_stitch(predictions)
        report.stage_seconds["stitch"] += seconds
        counts, seconds = timed_count(session, recording.activity)
        report.stage_seconds["count"] += seconds

        report.n_recordings += 1
        report.n_windows += len(windows)
        report.recording_seconds += recording.n_frames / recording.sample_rate_hz
        report.counts[recording.recording_id] = counts.to_dict()
    LOGGER.info(
        f"Benchmarked {report.n_recordings} recordings ({report.recording_minutes:.2f} min): "
        f"{report.seconds_per_minute} s of compute per minute of recording"
    )
    return report


def save_bench(report: BenchReport, file_path: str) -> None:
    with open(file_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
