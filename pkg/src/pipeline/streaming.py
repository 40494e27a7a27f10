"""
Real-time replay of a recording through the ensemble.

A producer thread releases frames on a clock scaled by `speed` into a bounded
buffer; the consumer assembles each test-mode window once its trailing flank
has arrived, decodes it, stitches incrementally and emits a count update.
Frames of the replayed recording are expected to be preprocessed already, as
they would be for batch prediction.
"""

import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from logging_config import setup_logger
from src.counting.decode_count import (
    IncrementalStitcher,
    PrimitiveCounts,
    SessionPrediction,
    count,
    decode_window,
)
from src.data_transformation.dataset import IMURecording, PrimitiveClass
from src.data_transformation.preprocess import Window, WindowSpec


LOGGER = setup_logger()

PADDING = "pad"
QUEUE_POLL_S = 0.05


class StreamMismatchError(ValueError):
    pass


class StreamOverrunError(RuntimeError):
    pass


@dataclass
class CountEvent:
    window: int
    recording_id: str
    core_start: int
    core_end: int
    tokens: tuple
    added: tuple
    counts: dict  # label -> running count
    timestamp_s: float  # seconds since the clock origin, monotonic
    lag_s: float
    compute_s: float

    def to_dict(self) -> dict:
        return {
            "event": "count_update",
            "window": self.window,
            "recording": self.recording_id,
            "core_start": self.core_start,
            "core_end": self.core_end,
            "tokens": [PrimitiveClass(t).label for t in self.tokens],
            "added": [PrimitiveClass(t).label for t in self.added],
            "counts": self.counts,
            "timestamp_s": self.timestamp_s,
            "lag_s": self.lag_s,
            "compute_s": self.compute_s,
        }


@dataclass
class StreamReport:
    recording_id: str
    speed: float
    flank_s: float
    session: SessionPrediction
    counts: PrimitiveCounts
    events: list = field(default_factory=list)

    @property
    def lags(self) -> list[float]:
        return [e.lag_s for e in self.events]

    @property
    def max_lag_s(self) -> Optional[float]:
        return max(self.lags) if self.events else None

    @property
    def max_compute_s(self) -> Optional[float]:
        return max(e.compute_s for e in self.events) if self.events else None

    def lag_report(self) -> dict:
        return {
            "recording": self.recording_id,
            "speed": None if math.isinf(self.speed) else self.speed,
            "flank_s": self.flank_s,
            "n_windows": len(self.events),
            "lags_s": self.lags,
            "max_lag_s": self.max_lag_s,
            "max_compute_s": self.max_compute_s,
            "causal_bound_applies": not math.isinf(self.speed),
            "counts": self.counts.to_dict(),
        }


class _FrameProducer(threading.Thread):
    """Releases frame i at (i + 1) / (fs * speed) seconds after start."""

    def __init__(self, frames, buffer: queue.Queue, sample_rate_hz: float, speed: float, flank: int):
        super().__init__(daemon=True)
        self.frames = frames
        self.buffer = buffer
        self.period = 0.0 if math.isinf(speed) else 1.0 / (sample_rate_hz * speed)
        self.flank = flank
        self.error = None
        self.started_at = None
        self._stop_event = threading.Event()

    def stop(self):
        self._stop_event.set()

    def _release(self, item, index: int) -> bool:
        if self.period == 0.0:
            while not self._stop_event.is_set():
                try:
                    self.buffer.put(item, timeout=QUEUE_POLL_S)
                    return True
                except queue.Full:
                    continue
            return False
        delay = self.started_at + (index + 1) * self.period - time.monotonic()
        if delay > 0 and self._stop_event.wait(delay):
            return False
        try:
            self.buffer.put_nowait(item)
        except queue.Full:
            self.error = StreamOverrunError(
                f"Frame buffer of {self.buffer.maxsize} frames full at frame {index}"
            )
            return False
        return True

    def run(self):
        self.started_at = time.monotonic()
        n_frames = len(self.frames)
        # trailing flank frames only carry time, the consumer never reads them
        for index in range(n_frames + self.flank):
            item = self.frames[index] if index < n_frames else PADDING
            if not self._release(item, index):
                return
        while not self._stop_event.is_set():
            try:
                self.buffer.put(None, timeout=QUEUE_POLL_S)
                return
            except queue.Full:
                continue


class FrameRing:
    """Fixed-capacity frame store; only the newest `capacity` frames stay readable."""

    def __init__(self, capacity: int, n_channels: int):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.count = 0
        self._frames = np.zeros((capacity, n_channels))

    def append(self, frame) -> None:
        self._frames[self.count % self.capacity] = frame
        self.count += 1

    def take(self, indices) -> np.ndarray:
        indices = np.asarray(indices)
        oldest = max(self.count - self.capacity, 0)
        if indices.size and (indices.min() < oldest or indices.max() >= self.count):
            raise IndexError(
                f"Frames {indices.min()}..{indices.max()} not held, ring has {oldest}..{self.count - 1}"
            )
        return self._frames[indices % self.capacity].copy()


def _assemble(ring: FrameRing, core_start: int, core_end: int, spec: WindowSpec, recording_id: str) -> Window:
    # identical to make_windows on the full recording once the window is complete
    indices = np.arange(core_start - spec.flank, core_start - spec.flank + spec.window_len)
    indices = np.clip(indices, 0, ring.count - 1)
    return Window(
        frames=ring.take(indices),
        core_start=spec.flank,
        core_end=spec.flank + (core_end - core_start),
        recording_id=recording_id,
        start=core_start - spec.flank,
    )


def stream_replay(
    recording: IMURecording,
    ensemble,
    window_spec: WindowSpec = WindowSpec(),
    speed: float = 1.0,
    buffer_frames: Optional[int] = None,
    on_event=None,
    clock_origin: Optional[float] = None,
) -> StreamReport:
    """
    Replay a recording on a real-time clock and count primitives as windows complete.

    Parameters:
    - recording: IMURecording - preprocessed frames to replay
    - ensemble: EnsembleModel - its input dimensionality must match the recording
    - window_spec: WindowSpec - test-mode windows are decoded
    - speed: float - clock multiplier; math.inf releases frames as fast as the
      consumer takes them
    - buffer_frames: int - bounded buffer size, default ten windows
    - on_event: callable - receives every CountEvent as it is emitted
    - clock_origin: float - time.monotonic() value event timestamps count from,
      default the start of this replay

    Returns:
    - StreamReport - events, per-window lag and the final counts
    """
    if not speed > 0:
        raise ValueError(f"speed must be positive, got {speed}")
    if recording.frames.shape[1] != ensemble.input_dim:
        LOGGER.error(
            f"Recording '{recording.recording_id}' has {recording.frames.shape[1]} channels, "
            f"ensemble expects {ensemble.input_dim}"
        )
        raise StreamMismatchError(
            f"Recording has {recording.frames.shape[1]} channels, ensemble expects {ensemble.input_dim}"
        )
    spec = window_spec
    fs = spec.sample_rate_hz
    unbounded = math.isinf(speed)
    buffer = queue.Queue(maxsize=buffer_frames or 10 * spec.window_len)
    producer = _FrameProducer(recording.frames, buffer, fs, speed, spec.flank)
    stitcher = IncrementalStitcher(recording.recording_id)
    running = {c.label: 0 for c in PrimitiveClass}
    events = []

    # the oldest frame a window reads lies at most window_len + core_len behind the newest
    ring = FrameRing(spec.window_len + spec.core_len, recording.frames.shape[1])
    received, n_real = 0, None
    core_start, window_index = 0, 0
    start_time = time.monotonic()
    origin = start_time if clock_origin is None else clock_origin
    producer.start()
    try:
        finished = False
        while not finished:
            try:
                item = buffer.get(timeout=QUEUE_POLL_S)
            except queue.Empty:
                if producer.error is not None:
                    raise producer.error
                if not producer.is_alive():
                    raise RuntimeError("Frame producer stopped before the end of the recording")
                continue
            if item is None:
                finished = True
                n_real = ring.count if n_real is None else n_real
            elif isinstance(item, str):
                n_real = ring.count if n_real is None else n_real
                received += 1
            else:
                ring.append(item)
                received += 1

            while n_real is None or core_start < n_real:
                known_end = math.inf if n_real is None else n_real
                core_end = min(core_start + spec.core_len, known_end)
                if not (finished or received >= core_end + spec.flank):
                    break
                ready_at = time.monotonic()
                window = _assemble(ring, core_start, core_end, spec, recording.recording_id)
                prediction = decode_window(ensemble, window)
                added = stitcher.push(prediction)
                for token in added:
                    running[PrimitiveClass(token).label] += 1
                emitted = time.monotonic()
                if unbounded:
                    lag = emitted - ready_at
                else:
                    lag = (emitted - producer.started_at) - core_end / (fs * speed)
                event = CountEvent(
                    window=window_index,
                    recording_id=recording.recording_id,
                    core_start=core_start,
                    core_end=int(core_end),
                    tokens=tuple(int(t) for t in prediction.tokens),
                    added=tuple(int(t) for t in added),
                    counts=dict(running),
                    timestamp_s=emitted - origin,
                    lag_s=lag,
                    compute_s=emitted - ready_at,
                )
                events.append(event)
                if on_event is not None:
                    on_event(event)
                LOGGER.debug(
                    f"Window {window_index} of '{recording.recording_id}' emitted, lag {lag:.3f} s"
                )
                window_index += 1
                core_start += spec.core_len

            if producer.error is not None:
                raise producer.error
    finally:
        producer.stop()
        producer.join()

    session = stitcher.session()
    report = StreamReport(
        recording_id=recording.recording_id,
        speed=speed,
        flank_s=spec.flank / fs,
        session=session,
        counts=count(session, recording.activity),
        events=events,
    )
    LOGGER.info(
        f"Streamed '{recording.recording_id}' in {len(events)} windows, max lag "
        f"{report.max_lag_s} s. Time taken: {time.monotonic() - start_time:.2f} s"
    )
    return report


def write_events(reports, file_path: str) -> None:
    """One JSON object per count update, in emission order."""
    with open(file_path, "w", encoding="utf-8") as f:
        for report in reports:
            for event in report.events:
                f.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")


def write_lag_report(reports, file_path: str) -> None:
    max_lags = [r.max_lag_s for r in reports if r.max_lag_s is not None]
    payload = {
        "recordings": [r.lag_report() for r in reports],
        "max_lag_s": max(max_lags) if max_lags else None,
    }
    with open(file_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
