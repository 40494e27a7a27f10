"""
Pointwise baseline: per-frame class probabilities from context features,
Kaiser smoothing, and collapse into per-window primitive sequences that feed
the same stitch, count and eval path as the sequence model.
"""

import itertools
import json
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np
import polars as pl
from scipy.special import softmax
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from logging_config import setup_logger
from src.baseline.features import feature_matrix
from src.baseline.smoothing import KaiserSmoother, smooth_probabilities
from src.counting.decode_count import WindowPrediction
from src.data_transformation.dataset import CLASS_LABELS, N_CLASSES, PrimitiveClass
from src.evaluation.alignment import align
from src.evaluation.metrics import metrics, sum_tallies, tally
from src.model.training import TrainingDivergedError


LOGGER = setup_logger()

ROW_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class PointwiseTrack:
    probs: np.ndarray  # frames x 5
    recording_id: str = ""

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != N_CLASSES:
            raise ValueError(f"Pointwise track must be frames x {N_CLASSES}, got {probs.shape}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOLERANCE):
            raise ValueError("Every pointwise track row must be a probability vector.")
        object.__setattr__(self, "probs", probs)

    @property
    def n_frames(self) -> int:
        return int(self.probs.shape[0])


@dataclass(frozen=True, eq=False)
class PointwiseClassifier:
    """
    Linear softmax classifier over standardized features.

    Any object with `predict_proba(features) -> frames x 5` can stand in for it
    in predict_track.
    """

    classes: tuple  # class codes that own a row of coef
    coef: np.ndarray
    intercept: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    context_frames: int = 100

    @classmethod
    def from_weights(cls, coef, intercept, context_frames: int = 100) -> "PointwiseClassifier":
        coef = np.asarray(coef, dtype=np.float64)
        n_features = coef.shape[1]
        return cls(
            classes=tuple(range(N_CLASSES)),
            coef=coef,
            intercept=np.asarray(intercept, dtype=np.float64),
            feature_mean=np.zeros(n_features),
            feature_scale=np.ones(n_features),
            context_frames=context_frames,
        )

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        scaled = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_scale
        logits = scaled @ self.coef.T + self.intercept
        probs = np.zeros((scaled.shape[0], N_CLASSES))
        probs[:, list(self.classes)] = softmax(logits, axis=1)
        return probs

    def to_dict(self) -> dict:
        return {
            "classes": [CLASS_LABELS[c] for c in self.classes],
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "context_frames": self.context_frames,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PointwiseClassifier":
        return cls(
            classes=tuple(int(PrimitiveClass.from_label(c)) for c in raw["classes"]),
            coef=np.asarray(raw["coef"], dtype=np.float64),
            intercept=np.asarray(raw["intercept"], dtype=np.float64),
            feature_mean=np.asarray(raw["feature_mean"], dtype=np.float64),
            feature_scale=np.asarray(raw["feature_scale"], dtype=np.float64),
            context_frames=int(raw["context_frames"]),
        )


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = np.asarray(probs)[np.arange(len(labels)), np.asarray(labels)]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def training_frames(recordings, context_frames: int, stride: int):
    """Features and labels at every stride-th frame of every recording."""
    features, labels = [], []
    for labeled in recordings:
        points, values = feature_matrix(labeled.recording, context_frames, stride)
        features.append(values)
        labels.append(labeled.frame_labels()[points])
    return np.vstack(features), np.concatenate(labels)


def train_pointwise(
    recordings,
    context_frames: int = 100,
    stride: int = 10,
    C: float = 1.0,
    max_iter: int = 500,
    seed: int = 0,
) -> PointwiseClassifier:
    """
    Multinomial logistic regression on context features of labeled frames.

    Parameters:
    - recordings: list of LabeledRecording - sensor-centric training recordings
    - context_frames: int - feature context length
    - stride: int - every stride-th frame becomes a training sample
    - C: float - inverse L2 regularization strength
    - max_iter: int - solver iterations
    - seed: int - solver random state

    Returns:
    - PointwiseClassifier
    """
    start_time = time.time()
    features, labels = training_frames(recordings, context_frames, stride)
    scaler = StandardScaler().fit(features)
    scale = np.where(scaler.scale_ > 0, scaler.scale_, 1.0)
    present = np.unique(labels)
    missing = sorted(set(range(N_CLASSES)) - set(present.tolist()))
    if missing:
        LOGGER.warning(
            f"Classes {[CLASS_LABELS[c] for c in missing]} absent from baseline training data"
        )

    if present.size == 1:
        # a single class gets probability one everywhere
        coef = np.zeros((1, features.shape[1]))
        intercept = np.zeros(1)
    else:
        model = LogisticRegression(C=C, max_iter=max_iter, random_state=seed & 0xFFFFFFFF)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            model.fit((features - scaler.mean_) / scale, labels)
        if any(issubclass(w.category, ConvergenceWarning) for w in caught):
            LOGGER.warning(f"Baseline classifier did not converge in {max_iter} iterations")
        coef, intercept = model.coef_, model.intercept_
        if present.size == 2:
            # binary sklearn models keep one row; softmax over [0, z] equals the sigmoid of z
            coef = np.vstack([np.zeros_like(coef), coef])
            intercept = np.concatenate([[0.0], intercept])

    if not (np.all(np.isfinite(coef)) and np.all(np.isfinite(intercept))):
        LOGGER.error("Baseline classifier weights are not finite")
        raise TrainingDivergedError("Baseline classifier training produced non-finite weights")

    classifier = PointwiseClassifier(
        classes=tuple(int(c) for c in present),
        coef=np.asarray(coef, dtype=np.float64),
        intercept=np.asarray(intercept, dtype=np.float64),
        feature_mean=scaler.mean_.astype(np.float64),
        feature_scale=scale.astype(np.float64),
        context_frames=context_frames,
    )
    accuracy = float(np.mean(np.argmax(classifier.predict_proba(features), axis=1) == labels))
    LOGGER.info(
        f"Baseline classifier trained on {len(labels)} frames, training accuracy "
        f"{accuracy:.4f}. Time taken: {time.time() - start_time:.2f} s"
    )
    return classifier


def predict_track(classifier, recording, recording_id: str = "") -> PointwiseTrack:
    context_frames = getattr(classifier, "context_frames", 100)
    _, features = feature_matrix(recording, context_frames, 1)
    probs = classifier.predict_proba(features)
    return PointwiseTrack(probs=probs, recording_id=recording_id)


def smooth(track: PointwiseTrack, smoother: KaiserSmoother) -> PointwiseTrack:
    return PointwiseTrack(
        probs=smooth_probabilities(track.probs, smoother), recording_id=track.recording_id
    )


def collapse(track, core_ranges) -> list[tuple]:
    """Per-frame argmax, then run-length collapse inside each [start, end) core."""
    probs = track.probs if isinstance(track, PointwiseTrack) else np.asarray(track)
    labels = np.argmax(probs, axis=1)
    sequences = []
    for start, end in core_ranges:
        sequences.append(
            tuple(PrimitiveClass(int(k)) for k, _ in itertools.groupby(labels[start:end]))
        )
    return sequences


def window_predictions(track: PointwiseTrack, core_ranges) -> list[WindowPrediction]:
    return [
        WindowPrediction(
            tokens=tokens, recording_id=track.recording_id, core_start=start, core_end=end
        )
        for (start, end), tokens in zip(core_ranges, collapse(track, core_ranges))
    ]


def select_smoother(
    tracks,
    window_lengths=(25, 51, 101, 201),
    betas=(0.0, 2.0, 5.0, 8.0),
) -> tuple[KaiserSmoother, pl.DataFrame]:
    """
    Grid search of window length x beta by validation F1.

    Parameters:
    - tracks: list of (PointwiseTrack, core ranges, target token sequences) of
      validation recordings
    - window_lengths: odd lengths to try
    - betas: shape parameters to try

    Returns:
    - (KaiserSmoother, pl.DataFrame) - the best smoother (first in grid order on
      ties) and one row per grid point
    """
    rows, best, best_f1 = [], None, None
    for window_length, beta in itertools.product(window_lengths, betas):
        smoother = KaiserSmoother(window_length=int(window_length), beta=float(beta))
        tallies = []
        for track, core_ranges, targets in tracks:
            predicted = collapse(smooth(track, smoother), core_ranges)
            tallies.extend(tally(align(gt, pred)) for gt, pred in zip(targets, predicted))
        scores = metrics(sum_tallies(tallies))
        rows.append(
            {
                "window_length": int(window_length),
                "beta": float(beta),
                "f1": scores.f1,
                "sensitivity": scores.sensitivity,
                "fdr": scores.fdr,
            }
        )
        if scores.f1 is not None and (best_f1 is None or scores.f1 > best_f1):
            best, best_f1 = smoother, scores.f1
    if best is None:
        best = KaiserSmoother(window_length=int(window_lengths[0]), beta=float(betas[0]))
    LOGGER.info(f"Selected Kaiser smoother {best.to_dict()} with validation F1 {best_f1}")
    table = pl.DataFrame(
        rows,
        schema={
            "window_length": pl.Int64,
            "beta": pl.Float64,
            "f1": pl.Float64,
            "sensitivity": pl.Float64,
            "fdr": pl.Float64,
        },
    )
    return best, table


def save_track(track: PointwiseTrack, file_path: str) -> None:
    table = pl.DataFrame({"frame": np.arange(track.n_frames)}).with_columns(
        [pl.Series(label, track.probs[:, i]) for i, label in enumerate(CLASS_LABELS)]
    )
    table.write_csv(file_path)


def load_track(file_path: str, recording_id: str = "") -> PointwiseTrack:
    table = pl.read_csv(file_path)
    missing = [c for c in ("frame", *CLASS_LABELS) if c not in table.columns]
    if missing:
        raise ValueError(f"Track file '{file_path}' lacks columns {missing}")
    probs = table.select(list(CLASS_LABELS)).to_numpy().astype(np.float64)
    return PointwiseTrack(probs=probs, recording_id=recording_id)


def save_baseline(classifier: PointwiseClassifier, smoother: KaiserSmoother, file_path: str):
    payload = {"classifier": classifier.to_dict(), "smoother": smoother.to_dict()}
    with open(file_path, "w") as f:
        json.dump(payload, f, indent=2)
    LOGGER.info(f"Saved baseline classifier and smoother to '{file_path}'")


def load_baseline(file_path: str) -> tuple[PointwiseClassifier, KaiserSmoother]:
    if not os.path.exists(file_path):
        LOGGER.error(f"Baseline file '{file_path}' not found")
        raise FileNotFoundError(f"Baseline file '{file_path}' not found")
    with open(file_path) as f:
        payload = json.load(f)
    return (
        PointwiseClassifier.from_dict(payload["classifier"]),
        KaiserSmoother(**payload["smoother"]),
    )
