"""
Assembly of the evaluation report from predictions and labeled recordings.
"""

import json
import platform
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import polars as pl
import scipy
import sklearn
import torch

from logging_config import setup_logger
from src.counting.decode_count import PrimitiveCounts, count, counting_error
from src.data_transformation.dataset import PrimitiveClass
from src.data_transformation.preprocess import derive_target_sequence
from src.evaluation.metrics import (
    GROUP_BY,
    aggregate,
    confusion_matrix,
    error_frequencies,
    impairment_table,
    make_record,
    mean_and_sd,
    mean_window_aer,
    metrics,
    sum_tallies,
)


LOGGER = setup_logger()

ALL_ACTIVITIES = "all"
TIMING_KEYS = ("timing",)


class MissingPredictionError(ValueError):
    pass


def true_counts(labeled) -> PrimitiveCounts:
    """Ground-truth counts: one per labeled segment."""
    result = count(labeled.class_sequence(), labeled.recording.activity)
    return PrimitiveCounts(
        counts=result.counts,
        activity=labeled.recording.activity,
        recording_id=labeled.recording_id,
    )


def _prediction_for(predictions: dict, labeled):
    if labeled.recording_id not in predictions:
        LOGGER.error(f"No prediction for recording '{labeled.recording_id}'")
        raise MissingPredictionError(f"No prediction for recording '{labeled.recording_id}'")
    return predictions[labeled.recording_id]


def window_records(
    recordings, predictions: dict, min_overlap_frames: int = 5, max_tokens: int = 16
) -> list:
    """Every predicted window aligned against the target derived for its core."""
    records = []
    for labeled in recordings:
        _, windows = _prediction_for(predictions, labeled)
        for window in windows:
            target = derive_target_sequence(
                labeled.segments,
                (window.core_start, window.core_end),
                min_overlap_frames,
                max_tokens,
            )
            records.append(
                make_record(
                    target.tokens,
                    window.tokens,
                    labeled.recording.subject_id,
                    labeled.recording.activity,
                    labeled.recording_id,
                )
            )
    return records


def session_records(recordings, predictions: dict) -> list:
    """Stitched session sequences aligned against each recording's segment sequence."""
    return [
        make_record(
            labeled.class_sequence(),
            _prediction_for(predictions, labeled)[0].tokens,
            labeled.recording.subject_id,
            labeled.recording.activity,
            labeled.recording_id,
        )
        for labeled in recordings
    ]


def count_summary(recordings, predicted: dict) -> pl.DataFrame:
    """
    Percent-of-true counts and counting errors per activity and class.

    Counts are summed per subject first; mean and sample SD are taken across
    subjects. The activity `all` pools every activity.
    """
    per_subject = {}
    for labeled in recordings:
        predicted_counts = predicted[labeled.recording_id]
        truth = true_counts(labeled)
        for activity in (labeled.recording.activity, ALL_ACTIVITIES):
            key = (activity, labeled.recording.subject_id)
            true_acc, pred_acc = per_subject.setdefault(key, ({}, {}))
            for cls in PrimitiveClass:
                true_acc[cls] = true_acc.get(cls, 0) + truth[cls]
                pred_acc[cls] = pred_acc.get(cls, 0) + predicted_counts[cls]

    rows = []
    activities = sorted({a for a, _ in per_subject} - {ALL_ACTIVITIES}) + [ALL_ACTIVITIES]
    for activity in activities:
        errors = [
            counting_error(PrimitiveCounts(counts=t), PrimitiveCounts(counts=p))
            for (a, _), (t, p) in sorted(per_subject.items())
            if a == activity
        ]
        for label in [c.label for c in PrimitiveClass] + ["pooled"]:
            if label == "pooled":
                percents = [e.pooled_percent_of_true for e in errors]
                signed = [e.pooled for e in errors]
            else:
                percents = [e.percent_of_true[label] for e in errors]
                signed = [e.per_class[label] for e in errors]
            percent_mean, percent_sd = mean_and_sd(percents)
            error_mean, error_sd = mean_and_sd(signed)
            rows.append(
                {
                    "activity": activity,
                    "primitive_class": label,
                    "n_subjects": sum(p is not None for p in percents),
                    "percent_of_true_mean": percent_mean,
                    "percent_of_true_sd": percent_sd,
                    "counting_error_mean": error_mean,
                    "counting_error_sd": error_sd,
                }
            )
    return pl.DataFrame(
        rows,
        schema={
            "activity": pl.Utf8,
            "primitive_class": pl.Utf8,
            "n_subjects": pl.Int64,
            "percent_of_true_mean": pl.Float64,
            "percent_of_true_sd": pl.Float64,
            "counting_error_mean": pl.Float64,
            "counting_error_sd": pl.Float64,
        },
    )


@dataclass
class Evaluation:
    """Everything eval derives for one predictor (the ensemble or the baseline)."""

    source: str
    window_records: list
    session_records: list
    counts: dict  # recording id -> PrimitiveCounts
    window_tables: dict = field(default_factory=dict)
    session_tables: dict = field(default_factory=dict)

    def metrics_table(self) -> pl.DataFrame:
        frames = []
        for level, tables in (("window", self.window_tables), ("session", self.session_tables)):
            for table in tables.values():
                frames.append(
                    table.with_columns(
                        pl.lit(self.source).alias("source"), pl.lit(level).alias("level")
                    )
                )
        return pl.concat(frames).select(["source", "level", *frames[0].columns[:-2]])


def evaluate(
    source: str,
    recordings,
    predictions: dict,
    min_overlap_frames: int = 5,
    max_tokens: int = 16,
) -> Evaluation:
    """
    Align window and session predictions of `recordings` and aggregate them.

    Parameters:
    - source: str - name of the predictor in the report
    - recordings: list of LabeledRecording - evaluated recordings
    - predictions: dict - recording id -> (SessionPrediction, list of WindowPrediction)
    - min_overlap_frames, max_tokens: int - window target derivation

    Returns:
    - Evaluation
    """
    recordings = list(recordings)
    windows = window_records(recordings, predictions, min_overlap_frames, max_tokens)
    sessions = session_records(recordings, predictions)
    result = Evaluation(
        source=source,
        window_records=windows,
        session_records=sessions,
        counts={
            r.recording_id: count(predictions[r.recording_id][0], r.recording.activity)
            for r in recordings
        },
    )
    for group_by in GROUP_BY:
        result.window_tables[group_by] = aggregate(windows, group_by)
        result.session_tables[group_by] = aggregate(sessions, group_by)
    return result


def _overall(table: pl.DataFrame) -> dict:
    return table.row(0, named=True)


def evaluation_section(evaluation: Evaluation, recordings, subjects: dict) -> dict:
    recordings = list(recordings)
    window_tallies = sum_tallies(r.tallies for r in evaluation.window_records)
    impairment, correlations = impairment_table(evaluation.window_records, subjects)
    per_recording_errors = {
        r.recording_id: counting_error(true_counts(r), evaluation.counts[r.recording_id]).to_dict()
        for r in recordings
    }
    return {
        "window": {
            "metrics": {g: t.to_dicts() for g, t in evaluation.window_tables.items()},
            "pooled": metrics(window_tallies).to_dict(),
            "mean_window_aer": mean_window_aer(evaluation.window_records),
            "n_windows": len(evaluation.window_records),
        },
        "session": {
            "metrics": {g: t.to_dicts() for g, t in evaluation.session_tables.items()},
            "pooled": _overall(evaluation.session_tables["overall"]),
        },
        "confusion_matrix": confusion_matrix(window_tallies).to_dict(),
        "error_frequencies": error_frequencies(evaluation.window_records).to_dicts(),
        "impairment": {"subjects": impairment.to_dicts(), "spearman": correlations},
        "counting": {
            "per_recording": per_recording_errors,
            "summary": count_summary(recordings, evaluation.counts).to_dicts(),
        },
    }


def versions() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "polars": pl.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "torch": torch.__version__,
    }


def build_report(
    config_hash: str,
    seed: int,
    test_subjects,
    recordings,
    subjects: dict,
    model: Evaluation,
    baseline: Optional[Evaluation] = None,
    timing: Optional[dict] = None,
) -> dict:
    recordings = list(recordings)
    report = {
        "config_hash": config_hash,
        "seed": seed,
        "test_subjects": sorted(test_subjects),
        "n_recordings": len(recordings),
        "model": evaluation_section(model, recordings, subjects),
        "baseline": None,
        "timing": timing or {},
        "versions": versions(),
    }
    if baseline is not None:
        report["baseline"] = evaluation_section(baseline, recordings, subjects)
        model_f1 = report["model"]["window"]["pooled"]["f1"]
        baseline_f1 = report["baseline"]["window"]["pooled"]["f1"]
        report["comparison"] = {"model_f1": model_f1, "baseline_f1": baseline_f1}
    return report


def without_timing(report: dict) -> dict:
    """The reproducible part of a report."""
    return {k: v for k, v in report.items() if k not in TIMING_KEYS}


def save_report(report: dict, file_path: str) -> None:
    with open(file_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    LOGGER.info(f"Saved evaluation report to '{file_path}'")
