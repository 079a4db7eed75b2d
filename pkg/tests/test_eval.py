"""Exact-rational metrics checked against two published confusion matrices.

ISI_TEST is the 4000-image benchmark result (3991 correct); OWN_TEST is the
1000-image second corpus (988 correct). Both matrices are typed in verbatim
so every derived number here is an independent oracle.
"""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densefold import eval as ev
from densefold.errors import InputError

ISI_TEST = np.array([
    [398, 0, 0, 1, 0, 0, 0, 1, 0, 0],
    [0, 397, 1, 0, 0, 0, 0, 0, 0, 2],
    [0, 0, 399, 0, 0, 1, 0, 0, 0, 0],
    [0, 0, 0, 400, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 400, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 398, 1, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 400, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 400, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 400, 0],
    [0, 0, 0, 0, 0, 1, 0, 0, 0, 399],
])

OWN_TEST = np.array([
    [100, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 100, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 100, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 98, 0, 0, 1, 0, 1, 0],
    [0, 0, 0, 0, 100, 0, 0, 0, 0, 0],
    [1, 0, 0, 0, 0, 95, 3, 1, 0, 0],
    [0, 0, 0, 0, 0, 0, 100, 0, 0, 0],
    [0, 0, 1, 1, 0, 0, 0, 98, 0, 0],
    [0, 0, 1, 0, 0, 0, 1, 0, 98, 0],
    [0, 1, 0, 0, 0, 0, 0, 0, 0, 99],
])

FIVE_RUNS = [99.75, 99.73, 99.75, 99.78, 99.75]


def labels_from_confusion(conf):
    """Expand a confusion matrix back into aligned label arrays."""
    actual, predicted = [], []
    for i in range(conf.shape[0]):
        for j in range(conf.shape[1]):
            actual.extend([i] * int(conf[i, j]))
            predicted.extend([j] * int(conf[i, j]))
    return np.array(actual), np.array(predicted)


class TestConfusionMatrix:
    def test_perfect_predictions_are_diagonal(self):
        y = np.arange(10).repeat(3)
        conf = ev.confusion_matrix(y, y)
        assert np.array_equal(conf, np.diag(np.bincount(y, minlength=10)))

    def test_rows_are_actual_columns_predicted(self):
        conf = ev.confusion_matrix([2], [7])
        assert conf[2, 7] == 1 and conf.sum() == 1

    def test_round_trips_through_labels(self):
        actual, predicted = labels_from_confusion(ISI_TEST)
        assert np.array_equal(ev.confusion_matrix(actual, predicted), ISI_TEST)

    def test_out_of_range_rejected(self):
        with pytest.raises(InputError):
            ev.confusion_matrix([10], [0])
        with pytest.raises(InputError):
            ev.confusion_matrix([0], [-1])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            ev.confusion_matrix([0, 1], [0])


class TestBenchmarkOracle:
    def test_total_and_errors(self):
        assert int(ISI_TEST.sum()) == 4000
        assert int(np.trace(ISI_TEST)) == 3991
        assert int(ISI_TEST.sum() - np.trace(ISI_TEST)) == 9

    def test_overall_accuracy_is_exact_fraction(self):
        acc = ev.overall_accuracy(ISI_TEST)
        assert acc == Fraction(3991, 4000)
        assert float(acc) * 100 == 99.775

    def test_micro_f1_equals_reported_f1(self):
        f1 = ev.micro_f1(ISI_TEST)
        assert f1 == Fraction(3991, 4000)
        assert round(float(f1), 5) == 0.99775

    def test_class_zero_accuracy(self):
        per = ev.per_class_accuracy(ISI_TEST)
        assert per[0] == Fraction(398, 400)
        assert float(per[0]) * 100 == 99.50

    def test_per_class_accuracy_row(self):
        reported = [99.50, 99.25, 99.75, 100.0, 100.0, 99.50, 100.0, 100.0, 100.0, 99.75]
        per = ev.per_class_accuracy(ISI_TEST)
        for frac, pct in zip(per, reported):
            assert float(frac) * 100 == pct

    def test_misclassified_records(self):
        actual, predicted = labels_from_confusion(ISI_TEST)
        records = ev.misclassified(actual, predicted)
        assert len(records) == 9
        pairs = sorted((a, p) for _, a, p in records)
        assert pairs == [(0, 3), (0, 7), (1, 2), (1, 9), (1, 9), (2, 5), (5, 4), (5, 6), (9, 5)]

    def test_second_corpus_accuracy(self):
        acc = ev.overall_accuracy(OWN_TEST)
        assert acc == Fraction(988, 1000)
        assert float(acc) * 100 == 98.80


class TestF1:
    def test_micro_equals_accuracy_on_oracles(self):
        for conf in (ISI_TEST, OWN_TEST):
            assert ev.micro_f1(conf) == ev.overall_accuracy(conf)

    def test_macro_matches_independent_recompute(self):
        conf = ISI_TEST
        f1s = []
        for i in range(10):
            tp = conf[i, i]
            fp = conf[:, i].sum() - tp
            fn = conf[i, :].sum() - tp
            f1s.append(2 * tp / (2 * tp + fp + fn))
        assert abs(float(ev.macro_f1(conf)) - np.mean(f1s)) < 1e-6

    def test_per_class_f1_perfect_class(self):
        f1 = ev.per_class_f1(ISI_TEST)
        assert f1[8] == Fraction(1)  # no errors in or out of class 8

    def test_absent_class_scores_zero(self):
        conf = np.zeros((10, 10), dtype=np.int64)
        conf[0, 0] = 5
        per = ev.per_class_f1(conf)
        assert per[0] == Fraction(1)
        assert per[3] == Fraction(0)

    @given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=300))
    @settings(max_examples=40, deadline=None)
    def test_micro_f1_is_accuracy(self, seed, n):
        rng = np.random.default_rng(seed)
        actual = rng.integers(0, 10, size=n)
        predicted = rng.integers(0, 10, size=n)
        conf = ev.confusion_matrix(actual, predicted)
        assert ev.micro_f1(conf) == ev.overall_accuracy(conf)
        assert ev.overall_accuracy(conf) == Fraction(int((actual == predicted).sum()), n)


class TestRunStatistics:
    def test_five_run_mean(self):
        assert abs(ev.run_mean(FIVE_RUNS) - 99.752) < 1e-9

    def test_five_run_population_stddev(self):
        sd = ev.run_stddev(FIVE_RUNS)
        assert abs(sd - 0.016) < 1e-9  # exact population sigma of the five runs
        assert abs(sd - 0.0163) <= 0.0005

    def test_constant_runs_have_zero_spread(self):
        assert ev.run_stddev([99.75] * 5) == 0.0

    def test_translation_invariance(self):
        vals = np.array(FIVE_RUNS)
        assert abs(ev.run_stddev(vals) - ev.run_stddev(vals + 100.0)) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            ev.run_mean([])
        with pytest.raises(InputError):
            ev.run_stddev([])


class TestMetricProperties:
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        actual = rng.integers(0, 10, size=200)
        predicted = rng.integers(0, 10, size=200)
        order = rng.permutation(200)
        a = ev.confusion_matrix(actual, predicted)
        b = ev.confusion_matrix(actual[order], predicted[order])
        assert np.array_equal(a, b)

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_diagonal_plus_misclassified_is_total(self, seed):
        rng = np.random.default_rng(seed)
        actual = rng.integers(0, 10, size=150)
        predicted = rng.integers(0, 10, size=150)
        conf = ev.confusion_matrix(actual, predicted)
        records = ev.misclassified(actual, predicted)
        assert int(np.trace(conf)) + len(records) == 150

    def test_misclassified_uses_refs(self):
        records = ev.misclassified([1, 2], [1, 3], refs=["a.pgm", "b.pgm"])
        assert records == [("b.pgm", 2, 3)]

    def test_misclassified_validates_refs_length(self):
        with pytest.raises(InputError):
            ev.misclassified([1], [1], refs=["a", "b"])


class TestEmission:
    def test_confusion_csv_shape(self):
        text = ev.confusion_csv(ISI_TEST)
        lines = text.strip().split("\n")
        assert lines[0] == "actual," + ",".join(f"pred_{j}" for j in range(10))
        assert len(lines) == 11
        assert lines[1].startswith("0,398,0,0,1,")

    def test_summary_kv_fields(self):
        text = ev.summary_kv(ISI_TEST)
        kv = dict(line.split("=", 1) for line in text.strip().split("\n"))
        assert kv["samples"] == "4000"
        assert kv["misclassified"] == "9"
        assert kv["overall_accuracy_exact"] == "3991/4000"
        assert float(kv["overall_accuracy"]) == 3991 / 4000
        assert float(kv["micro_f1"]) == 3991 / 4000
        assert kv["class_3_accuracy"] == "1.0"

    def test_misclassified_csv(self):
        text = ev.misclassified_csv([("x.pgm", 0, 3), (17, 5, 6)])
        assert text == "ref,actual,predicted\nx.pgm,0,3\n17,5,6\n"

    def test_format_report_mentions_key_numbers(self):
        text = ev.format_report(ISI_TEST, title="benchmark")
        assert "== benchmark ==" in text
        assert "99.7750%" in text
        assert "(3991/4000)" in text
        assert "misclassified:    9" in text

    def test_format_comparison_rows(self):
        text = ev.format_comparison()
        assert "99.58%" in text and "99.78%" in text
        with_run = ev.format_comparison(98.80)
        assert "this run" in with_run and "98.80%" in with_run

    def test_comparison_baseline_constants(self):
        assert ev.BASELINE_ACCURACY_PCT == 99.58
        assert ev.REPORTED_ACCURACY_PCT == 99.78
        # the headline claim: 47.62% error reduction from 0.42% to 0.22%
        reduction = (100 - 99.58 - (100 - 99.78)) / (100 - 99.58) * 100
        assert abs(reduction - 47.62) < 0.01
