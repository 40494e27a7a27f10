"""
The pipeline commands. Each reads a RunConfig and writes its artefacts under
the configured output directory.
"""

import glob
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor

import polars as pl
from tqdm import tqdm

from logging_config import setup_logger
from src.baseline.pointwise import (
    load_baseline,
    predict_track,
    save_baseline,
    save_track,
    select_smoother,
    smooth,
    train_pointwise,
    window_predictions,
)
from src.baseline.smoothing import KaiserSmoother
from src.check_pipeline_performance import bench as bench_recordings
from src.check_pipeline_performance import save_bench
from src.counting.decode_count import (
    count,
    decode_window,
    load_predictions,
    save_counts,
    save_predictions,
    stitch_windows,
)
from src.data_transformation.data_manager import data_manager, load_manifest
from src.data_transformation.dataset import DatasetSplit
from src.data_transformation.preprocess import (
    core_ranges,
    derive_target_sequence,
    make_windows,
    sensor_centric_transform,
)
from src.data_transformation.synthetic import hold_out_subjects, synthesize_dataset
from src.evaluation.report import build_report, evaluate, save_report, true_counts
from src.model.ensemble import load_ensemble, save_ensemble
from src.model.training import train_ensemble
from src.pipeline.run_config import ConfigError, RunConfig, config_hash, worker_count
from src.pipeline.streaming import stream_replay, write_events, write_lag_report
from src.visualisation.plotly_raport import ReportFigures


LOGGER = setup_logger()

SPLIT_FILE = "split.json"
TIMING_FILE = "timing.json"
PREDICTIONS_FILE = "predictions.json"
BASELINE_PREDICTIONS_FILE = "baseline_predictions.json"
BASELINE_FILE = "baseline.json"


def _output_path(config: RunConfig, *parts) -> str:
    return os.path.join(config.output_dir, *parts)


def record_timing(config: RunConfig, stage: str, seconds: float) -> None:
    path = _output_path(config, TIMING_FILE)
    timing = {}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            timing = json.load(f)
    timing[stage] = seconds
    with open(path, "w", encoding="utf-8") as f:
        json.dump(timing, f, indent=2, sort_keys=True)


def read_timing(config: RunConfig) -> dict:
    path = _output_path(config, TIMING_FILE)
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_checked_manifest(config: RunConfig):
    manifest = load_manifest(config.paths.manifest)
    if manifest.channel_count != config.model.input_dim:
        raise ConfigError(
            f"model.input_dim is {config.model.input_dim} but the manifest has "
            f"{manifest.channel_count} channels"
        )
    return manifest


def load_prepared_dataset(config: RunConfig):
    """The dataset with every recording in sensor-centric form."""
    manifest = load_checked_manifest(config)
    dataset = data_manager(config.data_root).load_dataset(manifest)
    recordings = [
        labeled.with_recording(
            sensor_centric_transform(labeled.recording, manifest, config.window.reference_policy)
        )
        for labeled in dataset.recordings
    ]
    return dataset, recordings


def load_split(config: RunConfig):
    """(test subjects, fold splits) written by train."""
    path = _output_path(config, SPLIT_FILE)
    if not os.path.exists(path):
        LOGGER.error(f"Split file '{path}' not found, run train first")
        raise FileNotFoundError(f"Split file '{path}' not found, run train first")
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    return raw["test_subjects"], [DatasetSplit.from_dict(s) for s in raw["folds"]]


def evaluation_recordings(config: RunConfig, recordings):
    """Recordings of the held-out subjects; all recordings when none are held out."""
    test_subjects, _ = load_split(config)
    if not test_subjects:
        LOGGER.warning("No held-out test subjects, evaluating on every recording")
        return list(recordings), []
    wanted = set(test_subjects)
    return [r for r in recordings if r.recording.subject_id in wanted], test_subjects


def synth(config: RunConfig, args) -> None:
    manifest = load_checked_manifest(config)
    dataset = synthesize_dataset(config.synth, manifest, config.seed)
    data_manager(config.data_root).save_dataset(dataset)


def _train_baseline(config: RunConfig, recordings, split: DatasetSplit):
    train = [r for r in recordings if r.recording.subject_id in split.train_subjects]
    val = [r for r in recordings if r.recording.subject_id in split.val_subjects]
    section = config.baseline
    classifier = train_pointwise(
        train,
        context_frames=section.context_frames,
        stride=section.feature_stride,
        C=section.C,
        max_iter=section.max_iter,
        seed=config.seed,
    )
    smoother_config = config.smoother
    if smoother_config.select:
        spec = config.window_spec()
        tracks = []
        for labeled in val:
            ranges = core_ranges(labeled.recording.n_frames, spec, "test")
            targets = [
                derive_target_sequence(
                    labeled.segments,
                    core,
                    config.window.min_overlap_frames,
                    config.window.max_tokens,
                ).tokens
                for core in ranges
            ]
            tracks.append(
                (predict_track(classifier, labeled.recording, labeled.recording_id), ranges, targets)
            )
        smoother, table = select_smoother(
            tracks, smoother_config.window_lengths, smoother_config.betas
        )
        table.write_csv(_output_path(config, "smoother_selection.csv"))
    elif smoother_config.attenuation_db is not None:
        smoother = KaiserSmoother.from_attenuation(
            smoother_config.window_length, smoother_config.attenuation_db
        )
    else:
        smoother = KaiserSmoother(smoother_config.window_length, smoother_config.beta)
    save_baseline(classifier, smoother, _output_path(config, BASELINE_FILE))


def train(config: RunConfig, args) -> None:
    start_time = time.time()
    dataset, recordings = load_prepared_dataset(config)
    remaining, held_out = hold_out_subjects(dataset.subject_ids, config.test_fraction, config.seed)
    LOGGER.info(f"Held-out test subjects: {held_out}")
    pool = [r for r in recordings if r.recording.subject_id in set(remaining)]

    ensemble, logs, splits = train_ensemble(
        pool,
        remaining,
        config.model_config(),
        config.train,
        window_spec=config.window_spec(),
        min_overlap_frames=config.window.min_overlap_frames,
        n_folds=config.n_folds,
        seed=config.seed,
        test_subjects=held_out,
        workers=worker_count(),
    )
    for stale in glob.glob(_output_path(config, "model.*.bin")):
        os.remove(stale)
    save_ensemble(ensemble, config.output_dir)
    with open(_output_path(config, "training_log.json"), "w", encoding="utf-8") as f:
        json.dump([log.to_dict() for log in logs], f, indent=2)
    with open(_output_path(config, SPLIT_FILE), "w", encoding="utf-8") as f:
        json.dump(
            {"test_subjects": list(held_out), "folds": [s.to_dict() for s in splits]},
            f,
            indent=2,
        )

    if config.baseline.enabled:
        _train_baseline(config, pool, splits[0])
    record_timing(config, "train", time.time() - start_time)


def _predict_recording(ensemble, labeled, spec):
    windows = [decode_window(ensemble, w) for w in make_windows(labeled.recording, spec, "test")]
    return labeled.recording_id, (stitch_windows(windows), windows)


def predict(config: RunConfig, args) -> None:
    start_time = time.time()
    _, recordings = load_prepared_dataset(config)
    recordings, _ = evaluation_recordings(config, recordings)
    ensemble = load_ensemble(config.output_dir)
    spec = config.window_spec()

    workers = worker_count()
    if workers > 1 and len(recordings) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                tqdm(
                    pool.map(lambda r: _predict_recording(ensemble, r, spec), recordings),
                    total=len(recordings),
                    desc="predict",
                )
            )
    else:
        results = [
            _predict_recording(ensemble, r, spec) for r in tqdm(recordings, desc="predict")
        ]
    save_predictions(dict(results), _output_path(config, PREDICTIONS_FILE))

    baseline_path = _output_path(config, BASELINE_FILE)
    if config.baseline.enabled and os.path.exists(baseline_path):
        classifier, smoother = load_baseline(baseline_path)
        os.makedirs(_output_path(config, "tracks"), exist_ok=True)
        sessions = {}
        for labeled in tqdm(recordings, desc="baseline"):
            track = smooth(
                predict_track(classifier, labeled.recording, labeled.recording_id), smoother
            )
            save_track(track, _output_path(config, "tracks", f"{labeled.recording_id}.csv"))
            windows = window_predictions(
                track, core_ranges(labeled.recording.n_frames, spec, "test")
            )
            sessions[labeled.recording_id] = (stitch_windows(windows), windows)
        save_predictions(sessions, _output_path(config, BASELINE_PREDICTIONS_FILE))
    record_timing(config, "predict", time.time() - start_time)


def _count_sessions(predictions: dict, activities: dict) -> dict:
    return {
        recording_id: count(session, activities.get(recording_id))
        for recording_id, (session, _) in predictions.items()
    }


def count_command(config: RunConfig, args) -> None:
    start_time = time.time()
    dataset = data_manager(config.data_root).load_dataset(load_checked_manifest(config))
    activities = {r.recording_id: r.recording.activity for r in dataset.recordings}
    predictions = load_predictions(_output_path(config, PREDICTIONS_FILE))
    save_counts(
        _count_sessions(predictions, activities),
        _output_path(config, "counts.json"),
        _output_path(config, "counts.csv"),
    )
    baseline_path = _output_path(config, BASELINE_PREDICTIONS_FILE)
    if os.path.exists(baseline_path):
        save_counts(
            _count_sessions(load_predictions(baseline_path), activities),
            _output_path(config, "baseline_counts.json"),
            _output_path(config, "baseline_counts.csv"),
        )
    record_timing(config, "count", time.time() - start_time)


def _totals(counts_by_recording: dict) -> dict:
    totals = {}
    for counts in counts_by_recording.values():
        for label, value in counts.to_dict().items():
            totals[label] = totals.get(label, 0) + value
    return totals


def eval_command(config: RunConfig, args) -> None:
    start_time = time.time()
    dataset, recordings = load_prepared_dataset(config)
    recordings, test_subjects = evaluation_recordings(config, recordings)
    min_overlap, max_tokens = config.window.min_overlap_frames, config.window.max_tokens

    model = evaluate(
        "model",
        recordings,
        load_predictions(_output_path(config, PREDICTIONS_FILE)),
        min_overlap,
        max_tokens,
    )
    baseline = None
    baseline_path = _output_path(config, BASELINE_PREDICTIONS_FILE)
    if os.path.exists(baseline_path):
        baseline = evaluate(
            "baseline", recordings, load_predictions(baseline_path), min_overlap, max_tokens
        )

    timing = read_timing(config)
    timing["eval"] = time.time() - start_time
    report = build_report(
        config_hash(config),
        config.seed,
        test_subjects,
        recordings,
        dataset.subjects,
        model,
        baseline,
        timing,
    )
    save_report(report, _output_path(config, "report.json"))

    tables = [model.metrics_table()]
    if baseline is not None:
        tables.append(baseline.metrics_table())
    pl.concat(tables).write_csv(_output_path(config, "metrics.csv"))

    predicted_totals = {"model": _totals(model.counts)}
    if baseline is not None:
        predicted_totals["baseline"] = _totals(baseline.counts)
    ReportFigures(
        report, _totals({r.recording_id: true_counts(r) for r in recordings}), predicted_totals
    ).write_html(_output_path(config, "report.html"))
    record_timing(config, "eval", timing["eval"])


def bench(config: RunConfig, args) -> None:
    _, recordings = load_prepared_dataset(config)
    ensemble = load_ensemble(config.output_dir)
    report = bench_recordings(
        [r.recording for r in recordings], ensemble, config.window_spec()
    )
    save_bench(report, _output_path(config, "bench.json"))


def stream(config: RunConfig, args) -> None:
    speed = float(args.speed)
    if math.isnan(speed) or speed <= 0:
        raise ConfigError(f"--speed must be positive, got {speed}")
    _, recordings = load_prepared_dataset(config)
    recordings, _ = evaluation_recordings(config, recordings)
    ensemble = load_ensemble(config.output_dir)
    spec = config.window_spec()

    origin = time.monotonic()
    reports = [
        stream_replay(labeled.recording, ensemble, spec, speed=speed, clock_origin=origin)
        for labeled in recordings
    ]
    write_events(reports, _output_path(config, "stream_events.jsonl"))
    write_lag_report(reports, _output_path(config, "stream_lag.json"))


COMMANDS = {
    "synth": synth,
    "train": train,
    "predict": predict,
    "count": count_command,
    "eval": eval_command,
    "bench": bench,
    "stream": stream,
}
