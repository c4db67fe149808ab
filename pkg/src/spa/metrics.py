"""Frame-wise phase recognition metrics and their aggregation across videos.

F1 protocol: per-phase F1 from the frame confusion matrix, macro-averaged
over the phases that occur in the video's ground truth; videos are then
summarized by mean and population standard deviation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import LengthMismatch, OutOfRangeLabel
from .task_graph import run_lengths, segment_count

F1_PROTOCOL = ("frame-wise per-phase F1, macro-averaged over phases present in each video's "
               "ground truth, then mean and std across videos")


@dataclass
class Metrics:
    per_phase_f1: list
    macro_f1: float
    accuracy: float
    segment_count: int
    edit_distance_segments: int

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(pred, gt, k: int) -> np.ndarray:
    """``cm[i, j]`` counts frames with ground truth ``i`` predicted as ``j``."""
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (gt, pred), 1)
    return cm


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def evaluate(pred, gt, k: int) -> Metrics:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"prediction has {pred.size} frames, ground truth {gt.size}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise OutOfRangeLabel(f"{name} labels must lie in [0, {k})")
    cm = confusion_matrix(pred, gt, k)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    denom = support + predicted
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(k), where=denom > 0)
    present = support > 0
    macro = float(f1[present].mean()) if present.any() else 0.0
    acc = float(tp.sum() / gt.size) if gt.size else 0.0
    edit = levenshtein([s[0] for s in run_lengths(pred)], [s[0] for s in run_lengths(gt)])
    return Metrics([float(x) for x in f1], macro, acc, segment_count(pred), edit)


def aggregate(metrics: list) -> dict:
    """Mean and std of every scalar metric over a list of per-video results."""
    rows = [m.to_dict() if isinstance(m, Metrics) else dict(m) for m in metrics]
    out = {"n": len(rows), "f1_protocol": F1_PROTOCOL}
    for key in ("macro_f1", "accuracy", "segment_count", "edit_distance_segments"):
        vals = np.array(sorted(float(r[key]) for r in rows))
        out[key] = {"mean": float(np.mean(vals)) if vals.size else float("nan"),
                    "std": float(np.std(vals)) if vals.size else float("nan")}
    return out


def format_table(rows: dict) -> str:
    """Plain-text table of ``{row_name: aggregate}`` with F1 and accuracy in percent."""
    lines = [f"{'setting':<24}{'macro F1 (%)':>18}{'accuracy (%)':>18}{'segments':>12}"]
    for name, agg in rows.items():
        f1, acc, seg = agg["macro_f1"], agg["accuracy"], agg["segment_count"]
        lines.append(f"{name:<24}{100 * f1['mean']:>10.2f} ± {100 * f1['std']:<5.2f}"
                     f"{100 * acc['mean']:>10.2f} ± {100 * acc['std']:<5.2f}{seg['mean']:>12.1f}")
    return "\n".join(lines)
