import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from humangeo import evaluation as E
from humangeo.errors import UsageError

from oracles import tally_confusion

NAMES = [f"c{i}" for i in range(4)]


def test_confusion_examples():
    y = np.array([0, 1, 2, 3, 1])
    assert np.array_equal(E.confusion(y, y, 4), np.diag([1, 2, 1, 1]))
    cm = E.confusion(np.zeros(5, int), y, 4)
    assert cm[:, 1:].sum() == 0 and cm[:, 0].sum() == 5
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 7, 500), rng.integers(0, 7, 500)
    assert np.array_equal(E.confusion(p, t, 7), tally_confusion(p, t, 7))


def test_confusion_errors():
    with pytest.raises(UsageError, match="outside"):
        E.confusion([0, 4], [0, 1], 4)
    with pytest.raises(UsageError, match="outside"):
        E.confusion([0, 1], [-1, 1], 4)
    with pytest.raises(UsageError):
        E.confusion([0], [0, 1], 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 9), st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), max_size=60))
def test_confusion_total_and_rows(k, pairs):
    pairs = [(p % k, t % k) for p, t in pairs]
    p = [a for a, _ in pairs]
    t = [b for _, b in pairs]
    cm = E.confusion(p, t, k)
    assert cm.sum() == len(pairs)
    assert np.array_equal(cm.sum(axis=1), np.bincount(np.array(t, dtype=int), minlength=k))
    assert (cm >= 0).all()


def test_mca_examples():
    assert E.mean_class_accuracy(np.diag([3, 5, 1])) == 1.0
    # class 0: 10/10, class 1: 1/2
    cm = np.array([[10, 0], [1, 1]])
    assert E.mean_class_accuracy(cm) == pytest.approx(0.75)
    with pytest.raises(UsageError):
        E.mean_class_accuracy(np.zeros((3, 3), int))


def test_mca_excludes_empty_classes():
    cm = np.array([[2, 0, 0], [0, 0, 0], [1, 0, 1]])
    assert E.mean_class_accuracy(cm) == pytest.approx(0.75)
    r = E.EvalReport("m", "image_based", "d", ["a", "b", "c"], cm)
    assert r.empty_classes == ["b"]
    assert math.isnan(r.per_class[1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(0, 5), st.integers(2, 5))
def test_mca_invariant_to_class_duplication(seed, k, cls, times):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, k, 80)
    p = rng.integers(0, k, 80)
    cls %= k
    sel = t == cls
    t2 = np.concatenate([t] + [t[sel]] * (times - 1))
    p2 = np.concatenate([p] + [p[sel]] * (times - 1))
    if not (t == cls).any():
        return
    assert E.mean_class_accuracy(E.confusion(p2, t2, k)) == pytest.approx(E.mean_class_accuracy(E.confusion(p, t, k)))


def test_uniform_random_mca_near_chance():
    k, n, trials = 12, 1200, 30
    rng = np.random.default_rng(1)
    vals = []
    for _ in range(trials):
        t = np.repeat(np.arange(k), n // k)
        vals.append(E.mean_class_accuracy(E.confusion(rng.integers(0, k, n), t, k)))
    # each recall is Binomial(100, 1/12) / 100; mCA averages 12 of them
    sigma = math.sqrt((1 / k) * (1 - 1 / k) / (n // k) / k) / math.sqrt(trials)
    assert abs(np.mean(vals) - 1 / k) <= 3 * sigma


def _report(method, pooling, preds, labels=(0, 1, 2, 3)):
    return E.evaluate(list(preds), list(labels), NAMES, method, pooling, "synthetic")


def test_compare():
    a = _report("finetuned", "image_based", [0, 1, 2, 3])
    b = _report("finetuned", "human_based", [0, 1, 2, 0])
    assert E.compare([a, a])[0]["delta_pp"] == 0.0
    rows = E.compare([a, b])
    assert len(rows) == 1
    # sorted by pooling: human_based first
    assert rows[0]["pooling_a"] == "human_based"
    assert rows[0]["delta_pp"] == pytest.approx(-25.0)
    with pytest.raises(UsageError):
        E.compare([a])
    c = E.evaluate([0, 1], [0, 1], ["x", "y"], "m", "image_based", "d")
    with pytest.raises(UsageError, match="class set"):
        E.compare([a, c])


def test_write_report(tmp_path):
    r = _report("pretrained_svm", "image_based", [0, 1, 1, 3])
    E.write_report(r, tmp_path)
    rows = list(csv.reader(open(tmp_path / "confusion.csv")))
    assert rows[0] == ["true\\pred"] + NAMES
    assert rows[3] == ["c2", "0", "1", "0", "0"]
    summary = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert summary[0]["mca"] == "0.750000" and summary[0]["n_test"] == "4"
    per = list(csv.DictReader(open(tmp_path / "per_class.csv")))
    assert [p["accuracy"] for p in per] == ["1.000000", "1.000000", "0.000000", "1.000000"]
    E.write_comparison(E.compare([r, r]), tmp_path / "cmp.csv")
    assert "0.0000" in (tmp_path / "cmp.csv").read_text()
