"""
Outcome tallies and the metrics derived from them.

Every alignment op lands in exactly one bucket: a match is a TP, a deletion or
the ground-truth side of a substitution (swap-out) is a FN, an insertion or the
predicted side of a substitution (swap-in) is a FP. Values with a zero
denominator are None.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import polars as pl
from scipy import stats

from logging_config import setup_logger
from src.data_transformation.dataset import CLASS_LABELS, N_CLASSES, PrimitiveClass
from src.evaluation.alignment import OpKind, align


LOGGER = setup_logger()

GROUP_BY = ("primitive_class", "activity", "subject", "overall")
OUTCOMES = ("deletion", "swap_out", "insertion", "swap_in")

METRICS_SCHEMA = {
    "group_by": pl.Utf8,
    "group": pl.Utf8,
    "n_subjects": pl.Int64,
    "n_records": pl.Int64,
    "tp": pl.Int64,
    "fn": pl.Int64,
    "fp": pl.Int64,
    "deletion": pl.Int64,
    "swap_out": pl.Int64,
    "insertion": pl.Int64,
    "swap_in": pl.Int64,
    "sensitivity": pl.Float64,
    "fdr": pl.Float64,
    "f1": pl.Float64,
    "aer": pl.Float64,
    "sensitivity_mean": pl.Float64,
    "sensitivity_sd": pl.Float64,
    "fdr_mean": pl.Float64,
    "fdr_sd": pl.Float64,
    "f1_mean": pl.Float64,
    "f1_sd": pl.Float64,
}


class EmptyGroupError(ValueError):
    pass


def _zeros() -> np.ndarray:
    return np.zeros(N_CLASSES, dtype=np.int64)


@dataclass(eq=False)
class OutcomeTallies:
    tp: np.ndarray = field(default_factory=_zeros)
    deletion: np.ndarray = field(default_factory=_zeros)
    swap_out: np.ndarray = field(default_factory=_zeros)
    insertion: np.ndarray = field(default_factory=_zeros)
    swap_in: np.ndarray = field(default_factory=_zeros)
    # rows ground truth, columns prediction
    substitutions: np.ndarray = field(
        default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    )

    @property
    def fn(self) -> np.ndarray:
        return self.deletion + self.swap_out

    @property
    def fp(self) -> np.ndarray:
        return self.insertion + self.swap_in

    @property
    def gt_count(self) -> np.ndarray:
        return self.tp + self.fn

    @property
    def pred_count(self) -> np.ndarray:
        return self.tp + self.fp

    @property
    def distance(self) -> int:
        return int(self.deletion.sum() + self.insertion.sum() + self.substitutions.sum())

    def __add__(self, other: "OutcomeTallies") -> "OutcomeTallies":
        return OutcomeTallies(
            tp=self.tp + other.tp,
            deletion=self.deletion + other.deletion,
            swap_out=self.swap_out + other.swap_out,
            insertion=self.insertion + other.insertion,
            swap_in=self.swap_in + other.swap_in,
            substitutions=self.substitutions + other.substitutions,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, OutcomeTallies):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("tp", *OUTCOMES, "substitutions")
        )

    def for_class(self, primitive) -> "OutcomeTallies":
        """Tallies restricted to one class; substitutions keep only that class's row."""
        cls = int(PrimitiveClass(primitive))
        keep = np.zeros(N_CLASSES, dtype=np.int64)
        keep[cls] = 1
        substitutions = np.zeros_like(self.substitutions)
        substitutions[cls] = self.substitutions[cls]
        return OutcomeTallies(
            tp=self.tp * keep,
            deletion=self.deletion * keep,
            swap_out=self.swap_out * keep,
            insertion=self.insertion * keep,
            swap_in=self.swap_in * keep,
            substitutions=substitutions,
        )

    def to_dict(self) -> dict:
        raw = {
            name: dict(zip(CLASS_LABELS, getattr(self, name).tolist()))
            for name in ("tp", *OUTCOMES)
        }
        raw["substitutions"] = self.substitutions.tolist()
        return raw


def sum_tallies(tallies) -> OutcomeTallies:
    total = OutcomeTallies()
    for item in tallies:
        total = total + item
    return total


def tally(alignment) -> OutcomeTallies:
    result = OutcomeTallies()
    for op in alignment:
        if op.kind is OpKind.MATCH:
            result.tp[op.gt] += 1
        elif op.kind is OpKind.DELETION:
            result.deletion[op.gt] += 1
        elif op.kind is OpKind.INSERTION:
            result.insertion[op.pred] += 1
        else:
            result.swap_out[op.gt] += 1
            result.swap_in[op.pred] += 1
            result.substitutions[op.gt, op.pred] += 1
    return result


@dataclass(frozen=True)
class Metrics:
    sensitivity: Optional[float]
    fdr: Optional[float]
    f1: Optional[float]
    aer: Optional[float]
    tp: int
    fn: int
    fp: int

    def to_dict(self) -> dict:
        return {
            "sensitivity": self.sensitivity,
            "fdr": self.fdr,
            "f1": self.f1,
            "aer": self.aer,
            "tp": self.tp,
            "fn": self.fn,
            "fp": self.fp,
        }


def _ratio(numerator, denominator) -> Optional[float]:
    return float(numerator) / float(denominator) if denominator else None


def metrics(tallies_or_gt, pred_sequence=None, with_aer: bool = True) -> Metrics:
    """
    Sensitivity, FDR, F1 and AER.

    Args:
        tallies_or_gt (OutcomeTallies | sequence): Pooled tallies, or a ground-truth
            sequence when `pred_sequence` is given.
        pred_sequence (sequence, optional): Predicted sequence to align against.
        with_aer (bool): Per-class metrics pass False; their AER has no meaning.

    Returns:
        Metrics: Undefined values (zero denominators, empty ground truth) are None.
    """
    if pred_sequence is not None:
        tallies = tally(align(tallies_or_gt, pred_sequence))
    else:
        tallies = tallies_or_gt
    tp = int(tallies.tp.sum())
    fn = int(tallies.fn.sum())
    fp = int(tallies.fp.sum())
    return Metrics(
        sensitivity=_ratio(tp, tp + fn),
        fdr=_ratio(fp, tp + fp),
        f1=_ratio(2 * tp, 2 * tp + fn + fp),
        aer=_ratio(tallies.distance, tp + fn) if with_aer else None,
        tp=tp,
        fn=fn,
        fp=fp,
    )


def f1_from_rates(sensitivity: float, fdr: float) -> float:
    """Harmonic mean of sensitivity and precision (1 - FDR)."""
    precision = 1.0 - fdr
    if sensitivity + precision == 0:
        return 0.0
    return 2.0 * sensitivity * precision / (sensitivity + precision)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    matrix: np.ndarray  # rows with no ground truth are NaN
    deletion_fraction: np.ndarray
    gt_count: np.ndarray

    @property
    def defined_rows(self) -> np.ndarray:
        return self.gt_count > 0

    def to_dict(self) -> dict:
        rows = {}
        for cls in PrimitiveClass:
            if not self.defined_rows[cls]:
                rows[cls.label] = None
                continue
            rows[cls.label] = {
                "predicted": dict(zip(CLASS_LABELS, self.matrix[cls].tolist())),
                "deletion": float(self.deletion_fraction[cls]),
                "gt_count": int(self.gt_count[cls]),
            }
        return {"classes": list(CLASS_LABELS), "rows": rows}


def confusion_matrix(tallies: OutcomeTallies) -> ConfusionMatrix:
    """Diagonal is per-class sensitivity; off-diagonal swaps, both over the row's gt count."""
    gt_count = tallies.gt_count
    counts = tallies.substitutions.astype(np.float64)
    counts[np.diag_indices(N_CLASSES)] = tallies.tp
    matrix = np.full((N_CLASSES, N_CLASSES), np.nan)
    deletion_fraction = np.full(N_CLASSES, np.nan)
    defined = gt_count > 0
    matrix[defined] = counts[defined] / gt_count[defined, None]
    deletion_fraction[defined] = tallies.deletion[defined] / gt_count[defined]
    undefined = [CLASS_LABELS[i] for i in np.flatnonzero(~defined)]
    if undefined:
        LOGGER.warning(f"Confusion matrix rows undefined, no ground truth for {undefined}")
    return ConfusionMatrix(
        matrix=matrix, deletion_fraction=deletion_fraction, gt_count=gt_count.copy()
    )


@dataclass(frozen=True, eq=False)
class AlignmentRecord:
    """Tallies of one aligned window (or session) with its grouping labels."""

    subject_id: str
    activity: str
    recording_id: str
    tallies: OutcomeTallies
    aer: Optional[float] = None


def make_record(gt_sequence, pred_sequence, subject_id, activity, recording_id):
    tallies = tally(align(gt_sequence, pred_sequence))
    return AlignmentRecord(
        subject_id=subject_id,
        activity=activity,
        recording_id=recording_id,
        tallies=tallies,
        aer=metrics(tallies).aer,
    )


def mean_and_sd(values) -> tuple[Optional[float], Optional[float]]:
    """Mean and sample SD of the defined values; SD needs at least two."""
    defined = np.array([v for v in values if v is not None], dtype=np.float64)
    if defined.size == 0:
        return None, None
    sd = float(np.std(defined, ddof=1)) if defined.size > 1 else None
    return float(defined.mean()), sd


def mean_window_aer(records) -> Optional[float]:
    return mean_and_sd([r.aer for r in records])[0]


def _group_key(record: AlignmentRecord, group_by: str) -> str:
    if group_by == "activity":
        return record.activity
    if group_by == "subject":
        return record.subject_id
    return "overall"


def _row(group_by, group, tallies, per_subject, n_records, with_aer=True) -> dict:
    pooled = metrics(tallies, with_aer=with_aer)
    row = {
        "group_by": group_by,
        "group": group,
        "n_subjects": len(per_subject),
        "n_records": n_records,
        "tp": pooled.tp,
        "fn": pooled.fn,
        "fp": pooled.fp,
        "deletion": int(tallies.deletion.sum()),
        "swap_out": int(tallies.swap_out.sum()),
        "insertion": int(tallies.insertion.sum()),
        "swap_in": int(tallies.swap_in.sum()),
        "sensitivity": pooled.sensitivity,
        "fdr": pooled.fdr,
        "f1": pooled.f1,
        "aer": pooled.aer,
    }
    subject_metrics = [metrics(t, with_aer=False) for t in per_subject.values()]
    for name in ("sensitivity", "fdr", "f1"):
        if group_by == "subject":
            mean, sd = None, None
        else:
            mean, sd = mean_and_sd([getattr(m, name) for m in subject_metrics])
        row[f"{name}_mean"] = mean
        row[f"{name}_sd"] = sd
    return row


def aggregate(records, group_by: str = "overall") -> pl.DataFrame:
    """
    Micro-aggregate alignment records into a metrics table.

    Tallies are summed inside each group before any metric is computed. Unless
    the grouping is by subject, the per-subject mean and sample SD of
    sensitivity, FDR and F1 inside the group are reported next to the pooled
    values.

    Parameters:
    - records: iterable of AlignmentRecord
    - group_by: str - one of primitive_class, activity, subject, overall

    Returns:
    - pl.DataFrame - one row per group, columns as in METRICS_SCHEMA
    """
    if group_by not in GROUP_BY:
        raise ValueError(f"group_by must be one of {GROUP_BY}, got '{group_by}'")
    records = list(records)
    if not records:
        LOGGER.error(f"Cannot aggregate by {group_by}: no alignment records")
        raise EmptyGroupError(f"Cannot aggregate by {group_by}: no alignment records")

    rows = []
    if group_by == "primitive_class":
        per_subject = {}
        for record in records:
            per_subject.setdefault(record.subject_id, []).append(record.tallies)
        per_subject = {s: sum_tallies(t) for s, t in per_subject.items()}
        total = sum_tallies(per_subject.values())
        for cls in PrimitiveClass:
            class_subjects = {s: t.for_class(cls) for s, t in per_subject.items()}
            rows.append(
                _row(
                    group_by,
                    cls.label,
                    total.for_class(cls),
                    class_subjects,
                    len(records),
                    with_aer=False,
                )
            )
    else:
        groups = {}
        for record in records:
            groups.setdefault(_group_key(record, group_by), []).append(record)
        for group in sorted(groups):
            members = groups[group]
            per_subject = {}
            for record in members:
                per_subject.setdefault(record.subject_id, []).append(record.tallies)
            per_subject = {s: sum_tallies(t) for s, t in per_subject.items()}
            rows.append(
                _row(
                    group_by,
                    group,
                    sum_tallies(r.tallies for r in members),
                    per_subject,
                    len(members),
                )
            )
    return pl.DataFrame(rows, schema=METRICS_SCHEMA)


def spearman_rho(xs, ys) -> Optional[float]:
    """Pearson correlation of mid-ranks; None when either rank vector is constant."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("spearman_rho needs two equally long sequences of at least 2 values")
    if np.ptp(stats.rankdata(xs)) == 0 or np.ptp(stats.rankdata(ys)) == 0:
        return None
    return float(stats.spearmanr(xs, ys)[0])


def _by_subject(records) -> dict:
    per_subject = {}
    for record in records:
        per_subject.setdefault(record.subject_id, []).append(record.tallies)
    return {s: sum_tallies(t) for s, t in sorted(per_subject.items())}


def error_frequencies(records) -> pl.DataFrame:
    """
    Outcome counts per class normalized to each subject's ground-truth count of
    that class, summarized as mean and sample SD across subjects.
    """
    per_subject = _by_subject(records)
    if not per_subject:
        raise EmptyGroupError("No alignment records for error frequencies")
    rows = []
    for cls in PrimitiveClass:
        for outcome in OUTCOMES:
            values = []
            for tallies in per_subject.values():
                # swap-in is attributed to the predicted class, the rest to ground truth
                values.append(_ratio(getattr(tallies, outcome)[cls], tallies.gt_count[cls]))
            mean, sd = mean_and_sd(values)
            rows.append(
                {
                    "primitive_class": cls.label,
                    "outcome": outcome,
                    "n_subjects": sum(v is not None for v in values),
                    "mean": mean,
                    "sd": sd,
                }
            )
    return pl.DataFrame(
        rows,
        schema={
            "primitive_class": pl.Utf8,
            "outcome": pl.Utf8,
            "n_subjects": pl.Int64,
            "mean": pl.Float64,
            "sd": pl.Float64,
        },
    )


def impairment_table(records, subjects: dict) -> tuple[pl.DataFrame, dict]:
    """
    Per-subject pooled sensitivity and FDR next to UE-FMA scores, and their
    Spearman correlations.

    Returns:
    - (pl.DataFrame, dict) - the table and {"sensitivity": rho, "fdr": rho}
    """
    per_subject = _by_subject(records)
    rows = []
    for subject_id, tallies in per_subject.items():
        info = subjects[subject_id]
        pooled = metrics(tallies, with_aer=False)
        rows.append(
            {
                "subject_id": subject_id,
                "ue_fma_score": int(info.ue_fma_score),
                "paretic_side": info.paretic_side,
                "sensitivity": pooled.sensitivity,
                "fdr": pooled.fdr,
            }
        )
    table = pl.DataFrame(
        rows,
        schema={
            "subject_id": pl.Utf8,
            "ue_fma_score": pl.Int64,
            "paretic_side": pl.Utf8,
            "sensitivity": pl.Float64,
            "fdr": pl.Float64,
        },
    )
    correlations = {}
    for name in ("sensitivity", "fdr"):
        defined = table.filter(pl.col(name).is_not_null())
        if defined.height < 2:
            correlations[name] = None
            continue
        correlations[name] = spearman_rho(
            defined["ue_fma_score"].to_numpy(), defined[name].to_numpy()
        )
    return table, correlations
