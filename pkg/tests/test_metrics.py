import csv
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import precision_recall_fscore_support

from unifiedfl.exceptions import ContractViolation
from unifiedfl.metrics import accuracy, aggregate_folds, confusion_matrix, precision_recall_f1, write_report

DATA = os.path.join(os.path.dirname(__file__), "data", "reference_fold_rows.csv")

# Rows whose quoted SD disagrees with the sample SD of their own fold columns:
# the first four match the population SD instead, the last three match neither.
INCONSISTENT_SD = {
    ("BreastMNIST", "CNN_b", "Prec"),
    ("BreastMNIST", "CNN_c", "Rec"),
    ("BreastMNIST", "MLP_b", "Rec"),
    ("BreastMNIST", "MLP_c", "Rec"),
    ("BreastMNIST", "MLP_c", "F1"),
    ("BreastMNIST", "MLP_f", "F1"),
    ("PathMNIST", "CNN_a", "Prec"),
}


def reference_rows():
    with open(DATA, newline="") as fh:
        return list(csv.DictReader(fh))


labels_preds = st.integers(2, 5).flatmap(
    lambda C: st.tuples(st.just(C), st.lists(st.tuples(st.integers(0, C - 1), st.integers(0, C - 1)),
                                             min_size=1, max_size=40)))


class TestConfusion:
    def test_counts(self):
        cm = confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
        np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 1]])
        assert cm.sum() == 4

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            confusion_matrix([0, 1], [0])


class TestScores:
    def test_perfect(self):
        assert precision_recall_f1([0, 1, 2], [0, 1, 2]) == (1.0, 1.0, 1.0)

    def test_binary_hand_counts(self):
        # TP=2 FP=1 FN=1 TN=6 for class 1
        labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
        preds = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0]
        cm = confusion_matrix(labels, preds, 2)
        tp, fp, fn = cm[1, 1], cm[0, 1], cm[1, 0]
        assert (tp, fp, fn, cm[0, 0]) == (2, 1, 1, 6)
        p1, r1 = tp / (tp + fp), tp / (tp + fn)
        assert p1 == pytest.approx(2 / 3) and r1 == pytest.approx(2 / 3)
        assert 2 * p1 * r1 / (p1 + r1) == pytest.approx(2 / 3)
        p, r, f, _ = precision_recall_fscore_support(labels, preds, average=None)
        assert (p[1], r[1], f[1]) == pytest.approx((2 / 3, 2 / 3, 2 / 3))
        assert precision_recall_f1(preds, labels)[0] == pytest.approx(np.mean(p))

    @given(labels_preds)
    def test_micro_f1_is_accuracy(self, case):
        _, pairs = case
        y, p = zip(*pairs)
        assert precision_recall_f1(p, y, "micro")[2] == pytest.approx(accuracy(p, y), abs=1e-12)

    @given(labels_preds)
    def test_macro_matches_sklearn(self, case):
        C, pairs = case
        y, p = zip(*pairs)
        present = sorted(set(y) | set(p))
        ref = precision_recall_fscore_support(y, p, labels=present, average=None, zero_division=0)
        got = precision_recall_f1(p, y, "macro")
        np.testing.assert_allclose(got, [ref[0].mean(), ref[1].mean(), ref[2].mean()], atol=1e-12)
        assert all(0 <= v <= 1 for v in got)

    @settings(max_examples=50)
    @given(labels_preds, st.randoms())
    def test_macro_invariant_under_relabeling(self, case, rnd):
        C, pairs = case
        y, p = np.array(pairs).T
        perm = list(range(C))
        rnd.shuffle(perm)
        perm = np.array(perm)
        a = precision_recall_f1(p, y)
        b = precision_recall_f1(perm[p], perm[y])
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_unknown_averaging(self):
        with pytest.raises(ContractViolation):
            precision_recall_f1([0], [0], "weighted")


class TestFolds:
    def test_quoted_row(self):
        e = aggregate_folds([0.710, 0.702, 0.723]).to_dict()[""]["value"]
        assert (e["mean"], e["sd"]) == (0.712, 0.011)

    def test_identical(self):
        s = aggregate_folds([0.5, 0.5, 0.5])
        assert s.entries[("", "value")]["sd"] == 0

    def test_two_folds(self):
        e = aggregate_folds([0.0, 1.0]).entries[("", "value")]
        assert e["mean"] == 0.5
        assert e["sd"] == pytest.approx(np.sqrt(0.5))

    def test_needs_two_folds(self):
        with pytest.raises(ContractViolation):
            aggregate_folds([0.3])

    def test_reference_rows(self):
        rows = reference_rows()
        assert len(rows) == 90
        mismatched = set()
        for r in rows:
            folds = [float(r[k]) for k in ("fold1", "fold2", "fold3")]
            e = aggregate_folds({(r["model"], r["measure"]): folds}).to_dict()[r["model"]][r["measure"]]
            assert e["mean"] == pytest.approx(float(r["mean"]), abs=1e-9)
            if abs(e["sd"] - float(r["sd"])) > 1e-9:
                mismatched.add((r["dataset"], r["model"], r["measure"]))
        assert mismatched == INCONSISTENT_SD

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=10))
    def test_summary_invariants(self, vals):
        e = aggregate_folds(vals).entries[("", "value")]
        assert e["sd"] >= 0
        assert min(vals) - 1e-12 <= e["mean"] <= max(vals) + 1e-12


def history(mode, fold, models):
    return {"mode": mode, "fold": fold,
            "models": [(m, {"precision": 0.5 + 0.01 * i + 0.001 * fold, "recall": 0.4, "f1": 0.45})
                       for i, m in enumerate(models)]}


class TestReport:
    def test_single_row(self, tmp_path):
        csv_path, _ = write_report([history("dynamic", 0, ["MLP_a"])], tmp_path)
        with open(csv_path) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "mode,model,fold,precision,recall,f1"
        assert len(lines) == 2

    def test_thirty_rows_per_mode(self, tmp_path):
        models = [f"m{i}" for i in range(10)]
        hs = [history(mode, f, models) for mode in ("dynamic", "static_cluster") for f in range(3)]
        csv_path, json_path = write_report(hs, tmp_path)
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        for mode in ("dynamic", "static_cluster"):
            assert sum(r["mode"] == mode for r in rows) == 30
        summary = json.load(open(json_path))
        entry = summary["dynamic"]["m3"]["precision"]
        assert entry["folds"] == [0.53, 0.531, 0.532]
        assert entry["mean"] == 0.531 and entry["sd"] == 0.001

    def test_byte_identical_reemission(self, tmp_path):
        hs = [history("isolated", f, ["a", "b"]) for f in range(3)]
        a = write_report(hs, tmp_path / "a")
        b = write_report(hs, tmp_path / "b")
        for x, y in zip(a, b):
            assert open(x, "rb").read() == open(y, "rb").read()

    def test_empty(self, tmp_path):
        with pytest.raises(ContractViolation):
            write_report([], tmp_path)
