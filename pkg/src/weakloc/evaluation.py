"""Detection and localisation metrics, reports and overlays."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .boxes import BoundingBox, iou
from .errors import DataError
from .localisation import localise_batch

ACCURACY_MODES = ("one_vs_rest", "recall")


def _check_pair(preds, labels):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("predictions and labels must be equal-length 1D sequences")
    if preds.size == 0:
        raise DataError("no samples to evaluate")
    return preds, labels


def per_class_accuracy(preds, labels, num_classes: int, mode: str = "one_vs_rest"):
    """Per-class scores and their unweighted mean.

    ``one_vs_rest``: fraction of samples where "predicted c" agrees with
    "labelled c". ``recall``: fraction of class-c samples predicted as c
    (NaN for classes without samples, skipped by the mean).
    """
    preds, labels = _check_pair(preds, labels)
    scores = np.empty(num_classes)
    for c in range(num_classes):
        if mode == "one_vs_rest":
            scores[c] = np.mean((preds == c) == (labels == c))
        elif mode == "recall":
            support = labels == c
            scores[c] = np.mean(preds[support] == c) if support.any() else np.nan
        else:
            raise ValueError(f"unknown accuracy mode {mode!r}")
    return scores, float(np.nanmean(scores))


def confusion_counts(preds, labels, num_classes: int) -> np.ndarray:
    preds, labels = _check_pair(preds, labels)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts


def confusion_matrix(preds, labels, num_classes: int):
    """Row-normalised confusion matrix and a mask of rows with no support.

    Row ``i`` is the distribution of predictions over true-class-``i``
    samples; rows without samples stay zero and are flagged.
    """
    counts = confusion_counts(preds, labels, num_classes)
    support = counts.sum(1)
    empty = support == 0
    norm = counts / np.where(empty, 1, support)[:, None]
    return norm, empty


def precision_recall(scores, labels, cls: int):
    """Precision/recall at every distinct score, highest threshold first.

    A sample is a predicted positive when its score is ``>=`` the threshold.
    Returns an ``(n, 3)`` array of ``(threshold, precision, recall)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        scores = scores[:, cls]
    labels = np.asarray(labels)
    positive = labels == cls
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise DataError(f"class {cls} has no samples; recall is undefined")
    order = np.argsort(-scores, kind="stable")
    s, pos = scores[order], positive[order]
    tp = np.cumsum(pos)
    k = np.arange(1, len(s) + 1)
    # keep the last index of each run of equal scores
    last = np.r_[s[1:] != s[:-1], True]
    tp, k, thr = tp[last], k[last], s[last]
    return np.stack([thr, tp / k, tp / n_pos], axis=1)


@dataclass
class EvalReport:
    classes: list
    per_class_accuracy: dict
    mean_accuracy: float
    per_class_recall: dict
    mean_recall: float
    top1_accuracy: float
    confusion: np.ndarray
    confusion_empty_rows: list
    pr_curves: dict
    mean_iou: float
    per_class_iou: dict
    iou_frames: int
    degenerate_boxes: int
    n_samples: int
    accuracy_mode: str = "one_vs_rest"
    latency_ms: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "mean_recall": self.mean_recall,
            "top1_accuracy": self.top1_accuracy,
            "mean_iou": self.mean_iou,
            "n_samples": self.n_samples,
        }


def build_report(preds, labels, probs, classes: Sequence[str], ious=None, iou_labels=None,
                 degenerate: int = 0, accuracy_mode: str = "one_vs_rest") -> EvalReport:
    """Assemble a report from raw predictions; ``probs`` are sigmoid scores."""
    C = len(classes)
    preds, labels = _check_pair(preds, labels)
    acc, _ = per_class_accuracy(preds, labels, C, "one_vs_rest")
    rec, mean_rec = per_class_accuracy(preds, labels, C, "recall")
    mean_acc = float(np.mean(acc)) if accuracy_mode == "one_vs_rest" else mean_rec
    conf, empty = confusion_matrix(preds, labels, C)
    curves = {}
    for c, name in enumerate(classes):
        if (labels == c).any():
            curves[name] = precision_recall(probs, labels, c)
    ious = np.asarray(ious if ious is not None else [], dtype=np.float64)
    iou_labels = np.asarray(iou_labels if iou_labels is not None else [], dtype=np.int64)
    per_iou = {}
    for c, name in enumerate(classes):
        sel = iou_labels == c
        if sel.any():
            per_iou[name] = float(ious[sel].mean())
    return EvalReport(
        classes=list(classes),
        per_class_accuracy={n: float(a) for n, a in zip(classes, acc)},
        mean_accuracy=mean_acc,
        per_class_recall={n: float(r) for n, r in zip(classes, rec)},
        mean_recall=float(mean_rec),
        top1_accuracy=float(np.mean(preds == labels)),
        confusion=conf,
        confusion_empty_rows=[classes[i] for i in np.flatnonzero(empty)],
        pr_curves=curves,
        mean_iou=float(ious.mean()) if ious.size else float("nan"),
        per_class_iou=per_iou,
        iou_frames=int(ious.size),
        degenerate_boxes=int(degenerate),
        n_samples=int(preds.size),
        accuracy_mode=accuracy_mode,
    )


def measure_latency(network, frames, repeats: int = 1) -> dict:
    """Single-frame forward time in milliseconds (median, p95, mean)."""
    from .model import forward

    network.eval()
    if not frames:
        return {}
    forward(network, frames[0])  # warm-up
    times = []
    for f in frames:
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward(network, f)
            times.append((time.perf_counter() - t0) * 1000.0)
    times = np.asarray(times)
    return {"median": float(np.median(times)), "p95": float(np.percentile(times, 95)),
            "mean": float(times.mean()), "n": int(times.size)}


def evaluate(network, frames, classes: Sequence[str], batch_size: int = 64, rule: str = "literal",
             accuracy_mode: str = "one_vs_rest", latency_frames: int = 50, overlays: int = 0):
    """Run the network over preprocessed frames and score everything.

    Returns ``(report, examples)``; ``examples`` holds up to ``overlays``
    ``(frame, proposal, predicted_box, predicted_label)`` tuples per class.
    """
    if network is None:
        raise DataError("no network to evaluate")
    frames = list(frames)
    if not frames:
        raise DataError("no frames to evaluate")
    name_to_idx = {n: i for i, n in enumerate(classes)}
    labels = np.array([name_to_idx[f.label] for f in frames])
    preds, probs, ious, iou_labels = [], [], [], []
    degenerate = 0
    examples, per_class_seen = [], {}
    for start in range(0, len(frames), batch_size):
        chunk = frames[start:start + batch_size]
        for f, loc in zip(chunk, localise_batch(network, chunk, rule)):
            preds.append(loc.label)
            probs.append(1.0 / (1.0 + np.exp(-loc.scores.astype(np.float64))))
            degenerate += int(loc.degenerate)
            if f.gt_box is not None:
                ious.append(iou(loc.box, f.gt_box))
                iou_labels.append(name_to_idx[f.label])
            if per_class_seen.get(f.label, 0) < overlays:
                per_class_seen[f.label] = per_class_seen.get(f.label, 0) + 1
                examples.append((f, loc.proposal, loc.box, classes[loc.label]))
    report = build_report(np.array(preds), labels, np.array(probs), classes, ious, iou_labels,
                          degenerate, accuracy_mode)
    if latency_frames:
        report.latency_ms = measure_latency(network, frames[:latency_frames])
    return report, examples


# -- persistence -----------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def write_report(report: EvalReport, out_dir, examples=()) -> Path:
    """Write report.csv, confusion.csv, pr_<class>.csv, latency.csv, overlays/."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "class", "value"])
        w.writerow(["accuracy_mode", "", report.accuracy_mode])
        for k, v in report.summary().items():
            w.writerow([k, "", _fmt(v) if k != "n_samples" else v])
        w.writerow(["iou_frames", "", report.iou_frames])
        w.writerow(["degenerate_boxes", "", report.degenerate_boxes])
        for c in report.classes:
            w.writerow(["accuracy", c, _fmt(report.per_class_accuracy[c])])
        for c in report.classes:
            w.writerow(["recall", c, _fmt(report.per_class_recall[c])])
        for c, v in report.per_class_iou.items():
            w.writerow(["iou", c, _fmt(v)])
        for c in report.confusion_empty_rows:
            w.writerow(["confusion_empty_row", c, ""])
    with (out / "confusion.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + report.classes)
        for c, row in zip(report.classes, report.confusion):
            w.writerow([c] + [_fmt(v) for v in row])
    for c, curve in report.pr_curves.items():
        with (out / f"pr_{c}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "precision", "recall"])
            for row in curve:
                w.writerow([_fmt(v) for v in row])
    if report.latency_ms:
        with (out / "latency.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["statistic", "value_ms"])
            for k, v in report.latency_ms.items():
                w.writerow([k, v if k == "n" else _fmt(v)])
    if examples:
        from .overlay import write_overlays

        write_overlays(out / "overlays", examples)
    return out


def read_report(out_dir) -> EvalReport:
    out = Path(out_dir)
    scalars, acc, rec, per_iou, empty = {}, {}, {}, {}, []
    with (out / "report.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            m, c, v = row["metric"], row["class"], row["value"]
            if m == "accuracy":
                acc[c] = float(v)
            elif m == "recall":
                rec[c] = float(v)
            elif m == "iou":
                per_iou[c] = float(v)
            elif m == "confusion_empty_row":
                empty.append(c)
            else:
                scalars[m] = v
    with (out / "confusion.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    classes = rows[0][1:]
    confusion = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    curves = {}
    for c in classes:
        p = out / f"pr_{c}.csv"
        if p.exists():
            curves[c] = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
    latency = {}
    if (out / "latency.csv").exists():
        with (out / "latency.csv").open(newline="") as fh:
            for row in csv.DictReader(fh):
                latency[row["statistic"]] = int(row["value_ms"]) if row["statistic"] == "n" \
                    else float(row["value_ms"])
    return EvalReport(
        classes=classes,
        per_class_accuracy=acc,
        mean_accuracy=float(scalars["mean_accuracy"]),
        per_class_recall=rec,
        mean_recall=float(scalars["mean_recall"]),
        top1_accuracy=float(scalars["top1_accuracy"]),
        confusion=confusion,
        confusion_empty_rows=empty,
        pr_curves=curves,
        mean_iou=float(scalars["mean_iou"]),
        per_class_iou=per_iou,
        iou_frames=int(scalars["iou_frames"]),
        degenerate_boxes=int(scalars["degenerate_boxes"]),
        n_samples=int(scalars["n_samples"]),
        accuracy_mode=scalars["accuracy_mode"],
        latency_ms=latency,
    )
