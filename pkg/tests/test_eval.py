import itertools
import math
from functools import lru_cache

import Levenshtein
import numpy as np
import pytest

from src.counting.decode_count import WindowPrediction, stitch_windows
from src.data_transformation.dataset import PrimitiveClass, SubjectInfo
from src.data_transformation.preprocess import WindowSpec, window_targets
from src.evaluation.alignment import (
    AlignmentOp,
    OpKind,
    align,
    alignment_cost,
    levenshtein_distance,
    project,
)
from src.evaluation.metrics import (
    EmptyGroupError,
    OutcomeTallies,
    aggregate,
    confusion_matrix,
    error_frequencies,
    f1_from_rates,
    impairment_table,
    make_record,
    metrics,
    spearman_rho,
    sum_tallies,
    tally,
)
from src.evaluation.report import (
    build_report,
    count_summary,
    evaluate,
    true_counts,
    without_timing,
)

R, RP, T, S, I = (PrimitiveClass(c) for c in range(5))


def brute_distance(gt, pred):
    @lru_cache(maxsize=None)
    def best(i, j):
        if i == len(gt):
            return len(pred) - j
        if j == len(pred):
            return len(gt) - i
        return min(
            best(i + 1, j + 1) + (gt[i] != pred[j]),
            best(i + 1, j) + 1,
            best(i, j + 1) + 1,
        )

    return best(0, 0)


def random_sequence(rng, max_len=12):
    return [PrimitiveClass(int(c)) for c in rng.integers(0, 5, size=rng.integers(0, max_len + 1))]


class TestAlign:
    def test_identity(self):
        ops = align([R, I], [R, I])
        assert [op.kind for op in ops] == [OpKind.MATCH, OpKind.MATCH]
        assert alignment_cost(ops) == 0

    def test_single_insertion(self):
        assert align([], [R]) == [AlignmentOp(OpKind.INSERTION, pred=R)]

    def test_canonical_backtrace(self):
        ops = align([R, T, S, I], [R, I, S])
        assert [str(op) for op in ops] == [
            "match(reach)",
            "substitution(transport->idle)",
            "match(stabilize)",
            "deletion(idle)",
        ]
        assert alignment_cost(ops) == 2

    def test_exhaustive_short_sequences(self):
        sequences = [list(s) for n in range(4) for s in itertools.product(range(5), repeat=n)]
        for gt in sequences:
            for pred in sequences:
                ops = align(gt, pred)
                assert alignment_cost(ops) == brute_distance(tuple(gt), tuple(pred))

    @pytest.mark.slow
    def test_sampled_pairs_up_to_length_five(self):
        sequences = [s for n in range(6) for s in itertools.product(range(5), repeat=n)]
        rng = np.random.default_rng(4)
        for gt_index, pred_index in rng.integers(0, len(sequences), size=(100_000, 2)):
            gt, pred = sequences[gt_index], sequences[pred_index]
            assert alignment_cost(align(gt, pred)) == brute_distance(gt, pred)

    @pytest.mark.parametrize("n_pairs, max_len", [(2000, 16), pytest.param(10_000, 40, marks=pytest.mark.slow)])
    def test_random_pairs_against_levenshtein_package(self, n_pairs, max_len):
        rng = np.random.default_rng(0)
        for _ in range(n_pairs):
            gt, pred = random_sequence(rng, max_len), random_sequence(rng, max_len)
            expected = Levenshtein.distance(
                "".join(str(int(c)) for c in gt), "".join(str(int(c)) for c in pred)
            )
            ops = align(gt, pred)
            assert alignment_cost(ops) == expected == levenshtein_distance(gt, pred)
            assert project(ops) == (gt, pred)

    def test_repeated_calls_are_identical(self):
        assert align([R, T, R, S], [T, R, S, S]) == align([R, T, R, S], [T, R, S, S])

    def test_rejects_non_class_tokens(self):
        with pytest.raises(ValueError):
            align([5], [R])


class TestTally:
    def test_four_outcomes(self):
        ops = [
            AlignmentOp(OpKind.MATCH, T, T),
            AlignmentOp(OpKind.DELETION, gt=S),
            AlignmentOp(OpKind.SUBSTITUTION, R, I),
            AlignmentOp(OpKind.INSERTION, pred=R),
        ]
        tallies = tally(ops)
        assert (tallies.tp.sum(), tallies.fn.sum(), tallies.fp.sum()) == (1, 2, 2)
        assert tallies.swap_out[R] == 1 and tallies.swap_in[I] == 1
        assert tallies.deletion[S] == 1 and tallies.insertion[R] == 1
        assert tallies.substitutions[R, I] == 1

    def test_all_matches(self):
        tallies = tally(align([R, T, S], [R, T, S]))
        assert (tallies.tp.sum(), tallies.fn.sum(), tallies.fp.sum()) == (3, 0, 0)

    @pytest.mark.parametrize("n_pairs, max_len", [(2000, 12), pytest.param(10_000, 40, marks=pytest.mark.slow)])
    def test_random_pair_invariants(self, n_pairs, max_len):
        rng = np.random.default_rng(1)
        for _ in range(n_pairs):
            gt, pred = random_sequence(rng, max_len), random_sequence(rng, max_len)
            tallies = tally(align(gt, pred))
            assert tallies.tp.sum() + tallies.fn.sum() == len(gt)
            assert tallies.tp.sum() + tallies.fp.sum() == len(pred)
            assert tallies.swap_out.sum() == tallies.swap_in.sum() == tallies.substitutions.sum()
            assert np.array_equal(
                tallies.gt_count, np.bincount([int(c) for c in gt], minlength=5)
            )


class TestMetrics:
    def test_f1_from_reported_rates(self):
        assert f1_from_rates(0.767, 0.166) == pytest.approx(0.799, abs=5e-4)

    def test_f1_is_harmonic_mean(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            result = metrics(random_sequence(rng), random_sequence(rng))
            if result.tp == 0:
                continue
            assert result.f1 == pytest.approx(
                f1_from_rates(result.sensitivity, result.fdr), abs=1e-12
            )

    def test_aer_values(self):
        assert metrics([R, T, S, I], [R, T, R, I]).aer == pytest.approx(0.25)
        assert metrics([R], [R, I, I]).aer == pytest.approx(2.0)
        assert metrics([R, T], [R, T]).aer == 0.0
        assert metrics([R, T], [T, R]).aer > 0

    def test_undefined_values(self):
        empty = metrics([], [])
        assert empty.sensitivity is None and empty.fdr is None and empty.aer is None
        nothing_predicted = metrics([R], [])
        assert nothing_predicted.sensitivity == 0.0
        assert nothing_predicted.fdr is None
        assert nothing_predicted.f1 == 0.0


class TestConfusionMatrix:
    def test_perfect_predictions(self):
        tallies = tally(align([R, RP, T, S, I], [R, RP, T, S, I]))
        np.testing.assert_array_equal(confusion_matrix(tallies).matrix, np.eye(5))

    def test_deleted_class(self):
        tallies = tally(align([R, T, S], [R, S]))
        result = confusion_matrix(tallies)
        np.testing.assert_array_equal(result.matrix[T], np.zeros(5))
        assert result.deletion_fraction[T] == 1.0
        assert not result.defined_rows[I]
        assert result.to_dict()["rows"]["idle"] is None

    def test_rows_plus_deletions_sum_to_one(self):
        rng = np.random.default_rng(3)
        tallies = sum_tallies(
            tally(align(random_sequence(rng), random_sequence(rng))) for _ in range(300)
        )
        result = confusion_matrix(tallies)
        defined = result.defined_rows
        np.testing.assert_allclose(
            result.matrix[defined].sum(axis=1) + result.deletion_fraction[defined], 1.0, atol=1e-12
        )
        assert np.all((result.matrix[defined] >= 0) & (result.matrix[defined] <= 1))


def two_subject_records():
    return [
        make_record([R, T], [R], "S01", "shelf", "S01_shelf_1"),
        make_record([R, T, S, I], [R, T, S], "S02", "feeding", "S02_feeding_1"),
    ]


class TestAggregate:
    def test_micro_and_subject_mean(self):
        row = aggregate(two_subject_records(), "overall").row(0, named=True)
        assert row["sensitivity"] == pytest.approx(4 / 6)
        assert row["sensitivity_mean"] == pytest.approx(0.625)
        assert row["n_subjects"] == 2
        assert (row["tp"], row["fn"], row["fp"]) == (4, 2, 0)

    def test_single_group_equals_pooled(self):
        records = [make_record([R, T], [R, S], "S01", "shelf", "a"), make_record([I], [I, I], "S01", "shelf", "a")]
        row = aggregate(records, "activity").row(0, named=True)
        pooled = metrics(sum_tallies(r.tallies for r in records))
        assert row["group"] == "shelf"
        assert (row["sensitivity"], row["fdr"], row["aer"]) == (pooled.sensitivity, pooled.fdr, pooled.aer)

    def test_activity_partition_recompute(self):
        rng = np.random.default_rng(4)
        records = [
            make_record(random_sequence(rng), random_sequence(rng), f"S{k % 3}", ("shelf", "feeding")[k % 2], f"r{k}")
            for k in range(40)
        ]
        table = aggregate(records, "activity")
        for activity in ("feeding", "shelf"):
            subset = [r for r in records if r.activity == activity]
            expected = metrics(sum_tallies(r.tallies for r in subset))
            row = table.filter(table["group"] == activity).row(0, named=True)
            assert row["tp"] == expected.tp
            assert row["sensitivity"] == pytest.approx(expected.sensitivity)
            assert row["n_records"] == len(subset)

    def test_primitive_class_rows(self):
        table = aggregate(two_subject_records(), "primitive_class")
        assert table["group"].to_list() == ["reach", "reposition", "transport", "stabilize", "idle"]
        transport = table.filter(table["group"] == "transport").row(0, named=True)
        assert (transport["tp"], transport["fn"]) == (1, 1)
        assert transport["aer"] is None
        assert table.filter(table["group"] == "reposition")["sensitivity"].to_list() == [None]

    def test_subject_rows(self):
        table = aggregate(two_subject_records(), "subject")
        assert table["group"].to_list() == ["S01", "S02"]
        assert table["sensitivity"].to_list() == pytest.approx([0.5, 0.75])

    def test_errors(self):
        with pytest.raises(EmptyGroupError):
            aggregate([], "overall")
        with pytest.raises(ValueError):
            aggregate(two_subject_records(), "trial")


def rank_pearson(xs, ys):
    def ranks(values):
        order = sorted(range(len(values)), key=lambda i: values[i])
        result = [0.0] * len(values)
        position = 0
        while position < len(order):
            end = position
            while end + 1 < len(order) and values[order[end + 1]] == values[order[position]]:
                end += 1
            for k in range(position, end + 1):
                result[order[k]] = (position + end) / 2 + 1
            position = end + 1
        return result

    rx, ry = ranks(xs), ranks(ys)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    return cov / math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))


class TestSpearman:
    def test_monotone(self):
        assert spearman_rho([1, 2, 3, 4], [0.1, 0.2, 0.5, 0.9]) == pytest.approx(1.0)
        assert spearman_rho([1, 2, 3, 4], [0.9, 0.5, 0.2, 0.1]) == pytest.approx(-1.0)

    def test_ties_against_hand_ranks(self):
        xs = [20, 35, 35, 50, 62, 62]
        ys = [0.61, 0.70, 0.58, 0.70, 0.81, 0.77]
        assert spearman_rho(xs, ys) == pytest.approx(rank_pearson(xs, ys), abs=1e-12)

    def test_constant_ranks_are_undefined(self):
        assert spearman_rho([1, 2, 3], [0.5, 0.5, 0.5]) is None
        with pytest.raises(ValueError):
            spearman_rho([1], [2])


class TestSubjectTables:
    def test_error_frequencies(self):
        table = error_frequencies(two_subject_records())
        transport_deletions = table.filter(
            (table["primitive_class"] == "transport") & (table["outcome"] == "deletion")
        ).row(0, named=True)
        assert transport_deletions["mean"] == pytest.approx(0.5)
        assert transport_deletions["n_subjects"] == 2

    def test_impairment(self):
        subjects = {
            "S01": SubjectInfo("S01", "left", 20),
            "S02": SubjectInfo("S02", "right", 50),
        }
        table, correlations = impairment_table(two_subject_records(), subjects)
        assert table["sensitivity"].to_list() == pytest.approx([0.5, 0.75])
        assert correlations["sensitivity"] == pytest.approx(1.0)
        assert correlations["fdr"] is None


def ground_truth_predictions(recordings):
    predictions = {}
    for labeled in recordings:
        windows = [
            WindowPrediction(target.tokens, labeled.recording_id, start, end)
            for start, end, target in window_targets(labeled, WindowSpec(), "test")
        ]
        predictions[labeled.recording_id] = (stitch_windows(windows), windows)
    return predictions


class TestReport:
    def test_perfect_predictions(self, small_dataset):
        recordings = list(small_dataset.recordings)
        evaluation = evaluate("model", recordings, ground_truth_predictions(recordings))
        overall = evaluation.window_tables["overall"].row(0, named=True)
        assert overall["sensitivity"] == 1.0 and overall["fdr"] == 0.0 and overall["aer"] == 0.0
        session = evaluation.session_tables["overall"].row(0, named=True)
        assert session["aer"] == 0.0
        for labeled in recordings:
            assert evaluation.counts[labeled.recording_id].to_dict() == true_counts(labeled).to_dict()

        summary = count_summary(recordings, evaluation.counts)
        pooled = summary.filter((summary["activity"] == "all") & (summary["primitive_class"] == "pooled"))
        assert pooled["percent_of_true_mean"].to_list() == [100.0]
        assert pooled["counting_error_mean"].to_list() == [0.0]

        table = evaluation.metrics_table()
        assert table.columns[:2] == ["source", "level"]
        assert set(table["level"].to_list()) == {"window", "session"}

    def test_report_sections(self, small_dataset):
        recordings = list(small_dataset.recordings)
        predictions = ground_truth_predictions(recordings)
        evaluation = evaluate("model", recordings, predictions)
        baseline = evaluate("baseline", recordings, predictions)
        report = build_report(
            "abc", 7, ["S02"], recordings, small_dataset.subjects, evaluation, baseline, {"train": 1.5}
        )
        assert report["comparison"] == {"model_f1": 1.0, "baseline_f1": 1.0}
        assert report["model"]["window"]["n_windows"] == sum(len(w) for _, w in predictions.values())
        assert report["test_subjects"] == ["S02"]
        assert "timing" not in without_timing(report)
        assert without_timing(report)["config_hash"] == "abc"
