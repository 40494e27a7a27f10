"""
Training of single fold models and of the fold ensemble.

A member is fitted on the training subjects of its fold: normalization stats
come from those recordings only, Adam minimizes the sequence
loss over train-mode windows, and after each epoch the validation subjects are
decoded greedily to compute the validation AER. The parameters of the best-AER
epoch are kept.
"""

import copy
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from tqdm import tqdm

from logging_config import setup_logger
from src.data_transformation.dataset import DatasetError, DatasetSplit
from src.data_transformation.preprocess import (
    WindowSpec,
    fit_normalization,
    normalize_frames,
    window_frames,
    window_targets,
)
from src.data_transformation.synthetic import split_subjects
from src.evaluation.alignment import align
from src.evaluation.metrics import Metrics, metrics, sum_tallies, tally
from src.model.config import ModelConfig, TrainConfig
from src.model.ensemble import EnsembleMember, EnsembleModel
from src.model.seq2seq import Seq2SeqModel


LOGGER = setup_logger()


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class WindowExample:
    """A window addressed by recording and core start; frames are gathered per batch."""

    recording_index: int
    core_start: int
    target: tuple


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_aer: Optional[float]
    val_sensitivity: Optional[float]
    val_fdr: Optional[float]
    improved: bool

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "val_aer": self.val_aer,
            "val_sensitivity": self.val_sensitivity,
            "val_fdr": self.val_fdr,
            "improved": self.improved,
        }


@dataclass
class TrainingLog:
    fold: int
    seed: int
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_aer: Optional[float] = None
    stopped_early: bool = False
    seconds: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        raw = {
            "fold": self.fold,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_val_aer": self.best_val_aer,
            "stopped_early": self.stopped_early,
            "epochs": [e.to_dict() for e in self.epochs],
        }
        if include_timing:
            raw["seconds"] = self.seconds
        return raw


class EarlyStopping:
    """Tracks the lowest monitored value; stops after `patience` epochs without a new one."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best = None
        self.epochs_since_best = 0

    def update(self, value: Optional[float]) -> bool:
        if value is not None and (self.best is None or value < self.best):
            self.best = value
            self.epochs_since_best = 0
            return True
        self.epochs_since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_best >= self.patience


def build_optimizer(model: torch.nn.Module, train_config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        betas=train_config.betas,
        eps=train_config.epsilon,
    )


def member_seed(seed: int, fold: int) -> int:
    """Independent seed of fold `fold`, derived from the run seed."""
    sequence = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return int(sequence.spawn(fold + 1)[fold].generate_state(1, dtype=np.uint32)[0])


def _normalized_frames(recordings, stats) -> list[np.ndarray]:
    return [normalize_frames(r.recording.frames, stats) for r in recordings]


def build_examples(
    recordings,
    window_spec: WindowSpec,
    mode: str,
    min_overlap_frames: int,
    max_tokens: int,
) -> list[WindowExample]:
    examples = []
    for index, labeled in enumerate(recordings):
        for start, _, target in window_targets(
            labeled, window_spec, mode, min_overlap_frames, max_tokens
        ):
            examples.append(WindowExample(index, start, tuple(target.codes())))
    return examples


def gather_batch(frames_list, examples, window_spec: WindowSpec) -> np.ndarray:
    return np.stack(
        [
            window_frames(frames_list[e.recording_index], e.core_start, window_spec)
            for e in examples
        ]
    )


def score_windows(
    model: Seq2SeqModel,
    frames_list,
    examples,
    window_spec: WindowSpec,
    batch_size: int = 64,
) -> Metrics:
    """Pooled metrics of single-model greedy decoding against the window targets."""
    model.eval()
    tallies = []
    for offset in range(0, len(examples), batch_size):
        batch = examples[offset : offset + batch_size]
        decoded = model.greedy_decode(gather_batch(frames_list, batch, window_spec))
        tallies.extend(tally(align(e.target, pred)) for e, pred in zip(batch, decoded))
    return metrics(sum_tallies(tallies))


def score_member(
    member: EnsembleMember,
    recordings,
    window_spec: WindowSpec,
    mode: str = "test",
    min_overlap_frames: int = 5,
) -> Metrics:
    examples = build_examples(
        recordings, window_spec, mode, min_overlap_frames, member.config.max_tokens
    )
    return score_windows(
        member.model, _normalized_frames(recordings, member.stats), examples, window_spec
    )


def train_epoch(
    model: Seq2SeqModel,
    optimizer: torch.optim.Optimizer,
    frames_list,
    examples,
    window_spec: WindowSpec,
    batch_size: int,
    rng: np.random.Generator,
    fold: int = 0,
    epoch: int = 1,
) -> float:
    """One shuffled pass over the examples; returns the mean per-window loss."""
    model.train()
    order = rng.permutation(len(examples))
    total_loss, total_windows = 0.0, 0
    for offset in range(0, len(order), batch_size):
        batch = [examples[i] for i in order[offset : offset + batch_size]]
        frames = torch.from_numpy(gather_batch(frames_list, batch, window_spec))
        loss = model.sequence_loss(frames, [e.target for e in batch])
        if not torch.isfinite(loss):
            LOGGER.error(f"Fold {fold}: non-finite loss in epoch {epoch}")
            raise TrainingDivergedError(
                f"Training of fold {fold} diverged in epoch {epoch}: loss is {loss.item()}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total_loss += loss.item() * len(batch)
        total_windows += len(batch)
    return total_loss / max(total_windows, 1)


def train_member(
    split: DatasetSplit,
    recordings,
    model_config: ModelConfig,
    train_config: TrainConfig,
    window_spec: WindowSpec = WindowSpec(),
    min_overlap_frames: int = 5,
    fold: int = 0,
    progress: bool = True,
) -> tuple[EnsembleMember, TrainingLog]:
    """
    Fit one member on a fold.

    Parameters:
    - split: DatasetSplit - train and validation subjects of the fold
    - recordings: list of LabeledRecording - already sensor-centric, not normalized
    - model_config: ModelConfig
    - train_config: TrainConfig - its seed drives initialization and shuffling
    - window_spec: WindowSpec
    - min_overlap_frames: int - target threshold
    - fold: int - index stored with the member
    - progress: bool - show a tqdm bar over epochs

    Returns:
    - (EnsembleMember, TrainingLog)
    """
    start_time = time.time()
    train = [r for r in recordings if r.recording.subject_id in split.train_subjects]
    val = [r for r in recordings if r.recording.subject_id in split.val_subjects]
    if not train or not val:
        LOGGER.error(f"Fold {fold} has {len(train)} train and {len(val)} validation recordings")
        raise DatasetError(f"Fold {fold} needs training and validation recordings.")

    stats = fit_normalization([r.recording for r in train], source_split=f"fold-{fold}")
    train_frames = _normalized_frames(train, stats)
    val_frames = _normalized_frames(val, stats)
    max_tokens = model_config.max_tokens
    train_examples = build_examples(
        train, window_spec, "train", min_overlap_frames, max_tokens
    )
    val_examples = build_examples(val, window_spec, "test", min_overlap_frames, max_tokens)
    LOGGER.info(
        f"Fold {fold}: {len(train_examples)} training windows from {len(train)} recordings, "
        f"{len(val_examples)} validation windows from {len(val)} recordings"
    )

    model = Seq2SeqModel(model_config, seed=train_config.seed)
    optimizer = build_optimizer(model, train_config)
    shuffle_seed = np.random.SeedSequence(train_config.seed & 0xFFFFFFFFFFFFFFFF).spawn(1)[0]
    rng = np.random.default_rng(shuffle_seed)
    stopper = EarlyStopping(train_config.early_stop_patience)
    log = TrainingLog(fold=fold, seed=train_config.seed)
    best_state = copy.deepcopy(model.state_dict())

    epochs = tqdm(
        range(1, train_config.max_epochs + 1), desc=f"fold {fold}", disable=not progress
    )
    for epoch in epochs:
        loss = train_epoch(
            model,
            optimizer,
            train_frames,
            train_examples,
            window_spec,
            train_config.batch_size,
            rng,
            fold=fold,
            epoch=epoch,
        )
        scores = score_windows(model, val_frames, val_examples, window_spec)
        improved = stopper.update(scores.aer)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
            log.best_epoch, log.best_val_aer = epoch, scores.aer
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                loss=loss,
                val_aer=scores.aer,
                val_sensitivity=scores.sensitivity,
                val_fdr=scores.fdr,
                improved=improved,
            )
        )
        epochs.set_postfix(loss=log.epochs[-1].loss, val_aer=scores.aer)
        LOGGER.debug(
            f"Fold {fold} epoch {epoch}: loss {log.epochs[-1].loss:.6f}, val AER {scores.aer}"
        )
        if stopper.should_stop:
            log.stopped_early = epoch < train_config.max_epochs
            break

    model.load_state_dict(best_state)
    model.eval()
    log.seconds = time.time() - start_time
    LOGGER.info(
        f"Fold {fold} training completed at epoch {log.epochs[-1].epoch}, best epoch "
        f"{log.best_epoch} with val AER {log.best_val_aer}. Time taken: {log.seconds:.2f} s"
    )
    return EnsembleMember(model=model, stats=stats, fold=fold), log


def fold_splits(subjects, n_folds: int, seed: int, test_subjects=()) -> list[DatasetSplit]:
    """n_folds splits; a single fold takes the first of a two-way split."""
    return split_subjects(subjects, max(n_folds, 2), seed, test_subjects)[:n_folds]


def train_ensemble(
    recordings,
    subjects,
    model_config: ModelConfig,
    train_config: TrainConfig,
    window_spec: WindowSpec = WindowSpec(),
    min_overlap_frames: int = 5,
    n_folds: int = 4,
    seed: int = 0,
    test_subjects=(),
    workers: int = 1,
    progress: bool = True,
) -> tuple[EnsembleModel, list[TrainingLog], list[DatasetSplit]]:
    """
    One member per fold, trained independently.

    With workers > 1 members train concurrently; the result does not depend on
    the schedule since every member has its own seed, model and optimizer.
    """
    if n_folds < 1:
        raise ValueError(f"n_folds must be at least 1, got {n_folds}")
    splits = fold_splits(subjects, n_folds, seed, test_subjects)

    def run(fold: int):
        config = replace(train_config, seed=member_seed(seed, fold))
        return train_member(
            splits[fold],
            recordings,
            model_config,
            config,
            window_spec=window_spec,
            min_overlap_frames=min_overlap_frames,
            fold=fold,
            progress=progress,
        )

    start_time = time.time()
    if workers > 1 and n_folds > 1:
        with ThreadPoolExecutor(max_workers=min(workers, n_folds)) as pool:
            results = list(pool.map(run, range(n_folds)))
    else:
        results = [run(fold) for fold in range(n_folds)]

    LOGGER.info(
        f"Ensemble of {n_folds} members trained. Time taken: {time.time() - start_time:.2f} s"
    )
    members = [member for member, _ in results]
    logs = [log for _, log in results]
    return EnsembleModel(members), logs, splits
