"""
Ensemble greedy decoding, boundary-duplicate stitching and primitive tallies.

Test-mode window cores tile a recording, so a primitive crossing a core
boundary is predicted in both windows. Stitching merges the trailing token of
the running sequence with an identical leading token of the next window.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import polars as pl

from logging_config import setup_logger
from src.data_transformation.dataset import PrimitiveClass
from src.data_transformation.preprocess import Window
from src.model.config import EOS, SOS


LOGGER = setup_logger()


class StitchOrderError(ValueError):
    pass


@dataclass(frozen=True)
class WindowPrediction:
    tokens: tuple
    recording_id: str
    core_start: int  # absolute frame
    core_end: Optional[int] = None

    def __post_init__(self):
        tokens = tuple(PrimitiveClass(int(t)) for t in self.tokens)
        object.__setattr__(self, "tokens", tokens)

    @property
    def origin(self) -> tuple[str, int]:
        return (self.recording_id, self.core_start)

    def to_dict(self) -> dict:
        return {
            "core_start": self.core_start,
            "core_end": self.core_end,
            "tokens": [t.label for t in self.tokens],
        }

    @classmethod
    def from_dict(cls, raw: dict, recording_id: str) -> "WindowPrediction":
        return cls(
            tokens=tuple(PrimitiveClass.from_label(t) for t in raw["tokens"]),
            recording_id=recording_id,
            core_start=int(raw["core_start"]),
            core_end=raw.get("core_end"),
        )


@dataclass(frozen=True)
class SessionPrediction:
    recording_id: str
    tokens: tuple
    merges: int = 0

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class PrimitiveCounts:
    counts: dict = field(default_factory=lambda: {c: 0 for c in PrimitiveClass})
    activity: Optional[str] = None
    recording_id: Optional[str] = None

    def __getitem__(self, primitive) -> int:
        return self.counts[PrimitiveClass(primitive)]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {c.label: int(self.counts[c]) for c in PrimitiveClass}

    @classmethod
    def from_dict(cls, raw: dict, activity=None, recording_id=None) -> "PrimitiveCounts":
        counts = {c: int(raw.get(c.label, 0)) for c in PrimitiveClass}
        return cls(counts=counts, activity=activity, recording_id=recording_id)


def _pairwise_mean(distributions: list) -> np.ndarray:
    # pairwise sums keep the mean of n identical distributions exact for n a power of two
    level = list(distributions)
    while len(level) > 1:
        paired = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0] / len(distributions)


def decode_window(ensemble, window) -> WindowPrediction:
    """
    Greedy decoding with probability averaging and shared token feedback.

    Every member encodes the window with its own normalization. At each step
    the members' next-token distributions are averaged; the argmax (lowest
    code on ties, SOS excluded) is appended unless it is EOS, and fed back to
    all members.

    Args:
        ensemble: Anything with `members` (each offering `begin(frames)` and
            `step(state, prev_token)`) and `max_tokens`.
        window (Window | np.ndarray): Raw (unnormalized) window frames.

    Returns:
        WindowPrediction: Tokens for the window's core.
    """
    frames = window.frames if isinstance(window, Window) else np.asarray(window)
    members = list(ensemble.members)
    states = [member.begin(frames) for member in members]
    tokens = []
    prev = SOS
    while len(tokens) < ensemble.max_tokens:
        distributions = []
        for index, member in enumerate(members):
            probs, states[index] = member.step(states[index], prev)
            distributions.append(np.asarray(probs, dtype=np.float64))
        averaged = _pairwise_mean(distributions)
        averaged[SOS] = -1.0
        prev = int(np.argmax(averaged))
        if prev == EOS:
            break
        tokens.append(prev)

    if isinstance(window, Window):
        return WindowPrediction(
            tokens=tuple(tokens),
            recording_id=window.recording_id,
            core_start=window.abs_core_start,
            core_end=window.abs_core_end,
        )
    return WindowPrediction(tokens=tuple(tokens), recording_id="", core_start=0)


class IncrementalStitcher:
    """
    Left fold of window predictions with a one-token lookback.

    Used by batch stitching and by streaming replay so both produce the same
    sequence.
    """

    def __init__(self, recording_id: Optional[str] = None):
        self.recording_id = recording_id
        self.tokens = []
        self.merges = 0
        self._last_core_start = None

    def push(self, prediction: WindowPrediction) -> list:
        """Append one window's tokens, returns the tokens actually added."""
        if self.recording_id is None:
            self.recording_id = prediction.recording_id
        elif prediction.recording_id != self.recording_id:
            LOGGER.error(
                f"Window of '{prediction.recording_id}' pushed into stitcher of '{self.recording_id}'"
            )
            raise StitchOrderError(
                f"mixed-recording input: '{prediction.recording_id}' after '{self.recording_id}'"
            )
        if self._last_core_start is not None and prediction.core_start <= self._last_core_start:
            LOGGER.error(
                f"Core start {prediction.core_start} follows {self._last_core_start} "
                f"in '{self.recording_id}'"
            )
            raise StitchOrderError(
                f"unsorted input: core start {prediction.core_start} after {self._last_core_start}"
            )
        self._last_core_start = prediction.core_start

        added = list(prediction.tokens)
        if added and self.tokens and self.tokens[-1] == added[0]:
            added = added[1:]
            self.merges += 1
        self.tokens.extend(added)
        return added

    def session(self) -> SessionPrediction:
        return SessionPrediction(
            recording_id=self.recording_id or "",
            tokens=tuple(self.tokens),
            merges=self.merges,
        )


def stitch_windows(predictions) -> SessionPrediction:
    stitcher = IncrementalStitcher()
    for prediction in predictions:
        stitcher.push(prediction)
    return stitcher.session()


def count(session, activity: Optional[str] = None) -> PrimitiveCounts:
    tokens = session.tokens if isinstance(session, SessionPrediction) else session
    counts = {c: 0 for c in PrimitiveClass}
    for token in tokens:
        counts[PrimitiveClass(int(token))] += 1
    recording_id = session.recording_id if isinstance(session, SessionPrediction) else None
    return PrimitiveCounts(counts=counts, activity=activity, recording_id=recording_id)


@dataclass(frozen=True)
class CountingError:
    per_class: dict  # label -> signed percent or None
    percent_of_true: dict  # label -> 100 * predicted / true or None
    pooled: Optional[float]
    pooled_percent_of_true: Optional[float]

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "percent_of_true": self.percent_of_true,
            "pooled": self.pooled,
            "pooled_percent_of_true": self.pooled_percent_of_true,
        }


def _percent_error(true: int, predicted: int) -> Optional[float]:
    if true <= 0:
        return None
    return 100.0 * (true - predicted) / true


def counting_error(true_counts: PrimitiveCounts, predicted_counts: PrimitiveCounts) -> CountingError:
    """
    Signed counting error 100 * (true - predicted) / true per class and pooled.

    Positive values are undercounts. Classes with a true count of 0 are None.
    """
    per_class, percent_of_true = {}, {}
    for cls in PrimitiveClass:
        true, predicted = true_counts[cls], predicted_counts[cls]
        per_class[cls.label] = _percent_error(true, predicted)
        percent_of_true[cls.label] = 100.0 * predicted / true if true > 0 else None
    total_true, total_predicted = true_counts.total, predicted_counts.total
    return CountingError(
        per_class=per_class,
        percent_of_true=percent_of_true,
        pooled=_percent_error(total_true, total_predicted),
        pooled_percent_of_true=(
            100.0 * total_predicted / total_true if total_true > 0 else None
        ),
    )


def session_to_dict(session: SessionPrediction, windows=()) -> dict:
    return {
        "recording": session.recording_id,
        "sequence": [PrimitiveClass(int(t)).label for t in session.tokens],
        "counts": count(session).to_dict(),
        "merges": session.merges,
        "windows": [w.to_dict() for w in windows],
    }


def session_from_dict(raw: dict) -> tuple[SessionPrediction, list[WindowPrediction]]:
    recording_id = raw["recording"]
    windows = [WindowPrediction.from_dict(w, recording_id) for w in raw.get("windows", [])]
    session = SessionPrediction(
        recording_id=recording_id,
        tokens=tuple(PrimitiveClass.from_label(t) for t in raw["sequence"]),
        merges=int(raw.get("merges", 0)),
    )
    return session, windows


def save_predictions(sessions: dict, file_path: str) -> None:
    """sessions: recording id -> (SessionPrediction, list of WindowPrediction)."""
    payload = [session_to_dict(s, w) for _, (s, w) in sorted(sessions.items())]
    with open(file_path, "w") as f:
        json.dump(payload, f, indent=2)
    LOGGER.info(f"Saved {len(payload)} session predictions to '{file_path}'")


def load_predictions(file_path: str) -> dict:
    if not os.path.exists(file_path):
        LOGGER.error(f"Predictions file '{file_path}' not found")
        raise FileNotFoundError(f"Predictions file '{file_path}' not found")
    with open(file_path) as f:
        payload = json.load(f)
    result = {}
    for raw in payload:
        session, windows = session_from_dict(raw)
        result[session.recording_id] = (session, windows)
    return result


def counts_table(counts_by_recording: dict) -> pl.DataFrame:
    """One row per recording x class."""
    rows = []
    for recording_id in sorted(counts_by_recording):
        counts = counts_by_recording[recording_id]
        for label, value in counts.to_dict().items():
            rows.append(
                {
                    "recording": recording_id,
                    "activity": counts.activity,
                    "class": label,
                    "count": value,
                }
            )
    return pl.DataFrame(
        rows,
        schema={"recording": pl.Utf8, "activity": pl.Utf8, "class": pl.Utf8, "count": pl.Int64},
    )


def save_counts(counts_by_recording: dict, json_path: str, csv_path: str) -> None:
    payload = [
        {
            "recording": recording_id,
            "activity": counts.activity,
            "counts": counts.to_dict(),
            "total": counts.total,
        }
        for recording_id, counts in sorted(counts_by_recording.items())
    ]
    with open(json_path, "w") as f:
        json.dump(payload, f, indent=2)
    counts_table(counts_by_recording).write_csv(csv_path)
    LOGGER.info(f"Saved counts for {len(payload)} recordings to '{json_path}' and '{csv_path}'")


def load_counts(json_path: str) -> dict:
    with open(json_path) as f:
        payload = json.load(f)
    return {
        raw["recording"]: PrimitiveCounts.from_dict(
            raw["counts"], activity=raw.get("activity"), recording_id=raw["recording"]
        )
        for raw in payload
    }

