import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weakloc.errors import DataError
from weakloc.evaluation import (build_report, confusion_counts, confusion_matrix, evaluate,
                                per_class_accuracy, precision_recall, read_report, write_report)
from weakloc.model import BackboneConfig, build_network
from weakloc.synth import synth_generate
from weakloc.geometry import preprocess

A, B = 0, 1


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1])
    acc, mean = per_class_accuracy(labels, labels, 3)
    assert list(acc) == [1, 1, 1] and mean == 1.0
    norm, empty = confusion_matrix(labels, labels, 3)
    assert np.array_equal(norm, np.eye(3)) and not empty.any()


def test_hand_enumerated_accuracy():
    acc, mean = per_class_accuracy([A, B, B, B], [A, A, B, B], 2)
    assert list(acc) == [0.75, 0.75] and mean == 0.75


def test_recall_mode():
    rec, mean = per_class_accuracy([A, B, B, B], [A, A, B, B], 3, mode="recall")
    assert rec[0] == 0.5 and rec[1] == 1.0 and np.isnan(rec[2])
    assert mean == 0.75


def test_all_wrong_row():
    norm, empty = confusion_matrix([B, B], [A, A], 2)
    assert list(norm[A]) == [0, 1]
    assert list(norm[B]) == [0, 0] and list(empty) == [False, True]


def test_empty_input():
    with pytest.raises(DataError):
        per_class_accuracy([], [], 3)
    with pytest.raises(ValueError):
        per_class_accuracy([0, 1], [0], 3)


def test_counting_oracle(rng):
    for n in (1, 7, 200, 500):
        C = int(rng.integers(2, 8))
        labels = rng.integers(0, C, n)
        preds = rng.integers(0, C, n)
        tally = [[0] * C for _ in range(C)]
        for t, p in zip(labels, preds):
            tally[t][p] += 1
        counts = confusion_counts(preds, labels, C)
        assert counts.tolist() == tally
        norm, empty = confusion_matrix(preds, labels, C)
        for i in range(C):
            s = sum(tally[i])
            assert empty[i] == (s == 0)
            if s:
                assert abs(norm[i].sum() - 1) <= 1e-9
                assert norm[i].tolist() == [v / s for v in tally[i]]
        acc, _ = per_class_accuracy(preds, labels, C)
        for c in range(C):
            agree = sum((p == c) == (t == c) for p, t in zip(preds, labels))
            assert acc[c] == agree / n
            # diagonal is the true-positive count behind the accuracy
            assert counts[c, c] == sum((p == c) and (t == c) for p, t in zip(preds, labels))


# -- precision / recall ----------------------------------------------------------------

def sweep_oracle(scores, positive):
    out = []
    for thr in sorted(set(scores), reverse=True):
        picked = [p for s, p in zip(scores, positive) if s >= thr]
        tp = sum(picked)
        out.append((thr, tp / len(picked), tp / sum(positive)))
    return out


def test_six_sample_hand_case():
    scores = [0.9, 0.8, 0.8, 0.4, 0.3, 0.1]
    labels = [A, B, A, A, B, B]
    curve = precision_recall(scores, labels, A)
    expected = [(0.9, 1, 1 / 3), (0.8, 2 / 3, 2 / 3), (0.4, 3 / 4, 1), (0.3, 3 / 5, 1), (0.1, 1 / 2, 1)]
    np.testing.assert_allclose(curve, expected, rtol=0, atol=1e-15)
    assert [tuple(r) for r in curve] == sweep_oracle(scores, [l == A for l in labels])


def test_separated_scores_reach_corner():
    curve = precision_recall([0.9, 0.8, 0.2, 0.1], [A, A, B, B], A)
    assert any(p == 1 and r == 1 for _, p, r in curve)


def test_equal_scores_single_point():
    curve = precision_recall([0.5] * 4, [A, B, B, B], A)
    assert curve.tolist() == [[0.5, 0.25, 1.0]]


def test_absent_class():
    with pytest.raises(DataError):
        precision_recall([0.1, 0.2], [A, A], B)


def test_two_column_scores_select_class():
    probs = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert precision_recall(probs, [A, B], B).tolist() == [[0.8, 1.0, 1.0], [0.1, 0.5, 1.0]]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.booleans()), min_size=1, max_size=500))
def test_pr_matches_sweep(pairs):
    scores = [s / 10 for s, _ in pairs]
    positive = [p for _, p in pairs]
    if not any(positive):
        return
    curve = precision_recall(scores, [0 if p else 1 for p in positive], 0)
    assert [tuple(r) for r in curve] == sweep_oracle(scores, positive)
    assert np.all(np.diff(curve[:, 2]) >= 0)


# -- reports ---------------------------------------------------------------------------

def random_report(rng, C=4, n=60):
    labels = rng.integers(0, C - 1, n)  # last class never labelled
    probs = rng.random((n, C))
    preds = probs.argmax(1)
    ious = rng.random(n // 2)
    return build_report(preds, labels, probs, [f"c{i}" for i in range(C)], ious, labels[: n // 2], 3)


def assert_reports_equal(a, b):
    for name in a.__dataclass_fields__:
        x, y = getattr(a, name), getattr(b, name)
        if name == "confusion":
            assert np.array_equal(x, y)
        elif name == "pr_curves":
            assert x.keys() == y.keys()
            assert all(np.array_equal(x[k], y[k]) for k in x)
        elif isinstance(x, dict):
            assert x.keys() == y.keys()
            for k in x:
                assert x[k] == y[k] or (np.isnan(x[k]) and np.isnan(y[k])), (name, k)
        else:
            assert x == y, name


def test_report_round_trip(rng, tmp_path):
    rep = random_report(rng)
    rep.latency_ms = {"median": 3.25, "p95": 4.5, "mean": 3.4, "n": 10}
    assert rep.confusion_empty_rows == ["c3"]
    assert "c3" not in rep.pr_curves
    write_report(rep, tmp_path)
    assert_reports_equal(rep, read_report(tmp_path))


def test_report_ratios_in_range(rng):
    rep = random_report(rng)
    vals = list(rep.per_class_accuracy.values()) + [rep.mean_accuracy, rep.mean_iou, rep.top1_accuracy]
    assert all(0 <= v <= 1 for v in vals)


@pytest.fixture(scope="module")
def small_test_frames():
    _, frames = synth_generate(2, 14, seed=3)
    return [preprocess(f) for f in frames]


def test_untrained_network_near_chance(small_test_frames, tmp_path):
    from weakloc.data import DEFAULT_CLASSES

    net = build_network(BackboneConfig(), len(DEFAULT_CLASSES), seed=0)
    rep, examples = evaluate(net, small_test_frames, DEFAULT_CLASSES, latency_frames=3, overlays=1)
    assert rep.n_samples == 28 and rep.iou_frames > 0
    assert rep.latency_ms["n"] == 3
    # chance for the class-balanced score is 1/C
    assert rep.mean_recall <= 1 / len(DEFAULT_CLASSES) + 0.1
    write_report(rep, tmp_path, examples)
    assert (tmp_path / "overlays" / "sheet.png").exists()
    assert_reports_equal(rep, read_report(tmp_path))


def test_evaluate_without_frames():
    with pytest.raises(DataError):
        evaluate(build_network(BackboneConfig(), 3), [], ["a", "b", "c"])
