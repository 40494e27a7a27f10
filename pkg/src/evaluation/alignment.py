"""
Levenshtein alignment between ground-truth and predicted primitive sequences.

Unit costs for substitution, deletion and insertion; matches are free. The
backtrace prefers match > substitution > deletion > insertion, so each pair of
sequences has exactly one canonical alignment.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from src.data_transformation.dataset import PrimitiveClass


class OpKind(str, Enum):
    MATCH = "match"
    SUBSTITUTION = "substitution"
    DELETION = "deletion"
    INSERTION = "insertion"


@dataclass(frozen=True)
class AlignmentOp:
    kind: OpKind
    gt: Optional[PrimitiveClass] = None
    pred: Optional[PrimitiveClass] = None

    def __str__(self) -> str:
        if self.kind is OpKind.MATCH:
            return f"match({self.gt.label})"
        if self.kind is OpKind.SUBSTITUTION:
            return f"substitution({self.gt.label}->{self.pred.label})"
        if self.kind is OpKind.DELETION:
            return f"deletion({self.gt.label})"
        return f"insertion({self.pred.label})"


def _as_codes(sequence) -> list[int]:
    codes = [int(token) for token in sequence]
    for code in codes:
        PrimitiveClass(code)
    return codes


def _cost_table(gt: list, pred: list) -> list[list[int]]:
    rows, cols = len(gt) + 1, len(pred) + 1
    table = [[0] * cols for _ in range(rows)]
    for i in range(rows):
        table[i][0] = i
    for j in range(cols):
        table[0][j] = j
    for i in range(1, rows):
        previous, current = table[i - 1], table[i]
        token = gt[i - 1]
        for j in range(1, cols):
            diagonal = previous[j - 1] + (0 if token == pred[j - 1] else 1)
            current[j] = min(diagonal, previous[j] + 1, current[j - 1] + 1)
    return table


def levenshtein_distance(gt_sequence, pred_sequence) -> int:
    gt, pred = _as_codes(gt_sequence), _as_codes(pred_sequence)
    return _cost_table(gt, pred)[len(gt)][len(pred)]


def align(gt_sequence, pred_sequence) -> list[AlignmentOp]:
    gt, pred = _as_codes(gt_sequence), _as_codes(pred_sequence)
    table = _cost_table(gt, pred)

    ops = []
    i, j = len(gt), len(pred)
    while i > 0 or j > 0:
        cost = table[i][j]
        if i > 0 and j > 0 and gt[i - 1] == pred[j - 1] and table[i - 1][j - 1] == cost:
            ops.append(
                AlignmentOp(OpKind.MATCH, PrimitiveClass(gt[i - 1]), PrimitiveClass(pred[j - 1]))
            )
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and gt[i - 1] != pred[j - 1] and table[i - 1][j - 1] + 1 == cost:
            ops.append(
                AlignmentOp(
                    OpKind.SUBSTITUTION, PrimitiveClass(gt[i - 1]), PrimitiveClass(pred[j - 1])
                )
            )
            i, j = i - 1, j - 1
        elif i > 0 and table[i - 1][j] + 1 == cost:
            ops.append(AlignmentOp(OpKind.DELETION, gt=PrimitiveClass(gt[i - 1])))
            i -= 1
        else:
            ops.append(AlignmentOp(OpKind.INSERTION, pred=PrimitiveClass(pred[j - 1])))
            j -= 1
    ops.reverse()
    return ops


def alignment_cost(alignment) -> int:
    return sum(1 for op in alignment if op.kind is not OpKind.MATCH)


def project(alignment) -> tuple[list[PrimitiveClass], list[PrimitiveClass]]:
    """Read back (ground truth, prediction) from the alignment slots."""
    gt = [op.gt for op in alignment if op.gt is not None]
    pred = [op.pred for op in alignment if op.pred is not None]
    return gt, pred
