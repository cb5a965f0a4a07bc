"""Detection matching, precision/recall/F1, average precision, and PR curves."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .core import Box, iou

SCHEMA_VERSION = 1


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap50: float
    pr_points: List[Tuple[float, float]] = field(default_factory=list)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "TP": self.tp, "FP": self.fp, "FN": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "ap50": self.ap50,
            "pr_points": [[r, p] for r, p in self.pr_points],
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "MetricsReport":
        payload = json.loads(Path(path).read_text())
        return cls(tp=payload["TP"], fp=payload["FP"], fn=payload["FN"],
                   precision=payload["precision"], recall=payload["recall"],
                   f1=payload["f1"], ap50=payload["ap50"],
                   pr_points=[(r, p) for r, p in payload["pr_points"]])


def match_detections(dets: Sequence[Tuple[Box, float]], gts: Sequence[Box],
                     iou_thr: float = 0.5) -> Tuple[int, int, int, List[bool]]:
    """Greedy one-to-one matching of score-ranked detections to truths.

    Each detection (descending score, ties by input order) matches the
    highest-IoU still-unmatched truth at or above the threshold; the rest are
    false positives and unmatched truths are false negatives. Returns
    (TP, FP, FN, per-detection hit flags in the input order).
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    taken = [False] * len(gts)
    flags = [False] * len(dets)
    for i in order:
        box = dets[i][0]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            value = iou(box, gt)
            if value > best_iou:
                best_iou, best_j = value, j
        if best_j >= 0 and best_iou >= iou_thr:
            taken[best_j] = True
            flags[i] = True
    tp = sum(flags)
    return tp, len(dets) - tp, len(gts) - tp, flags


def precision_recall_f1(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    """Standard ratios with 0/0 defined as 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2.0 * precision * recall / (precision + recall)) if precision + recall else 0.0
    return precision, recall, f1


def _ranked_flags(per_image: Sequence[Tuple[Sequence[Tuple[Box, float]], Sequence[Box]]],
                  iou_thr: float) -> Tuple[List[Tuple[float, bool]], int]:
    """Flatten to (score, is_tp) entries ranked by score plus total truth count."""
    entries: List[Tuple[float, bool]] = []
    total_gt = 0
    for dets, gts in per_image:
        total_gt += len(gts)
        _, _, _, flags = match_detections(dets, gts, iou_thr=iou_thr)
        entries.extend((score, flag) for (_, score), flag in zip(dets, flags))
    entries.sort(key=lambda e: -e[0])
    return entries, total_gt


def pr_curve(per_image, iou_thr: float = 0.5) -> List[Tuple[float, float]]:
    """(recall, precision) points swept over every distinct detection-score cut.

    Detections tied on score enter together, exactly as a score threshold
    would admit them.
    """
    entries, total_gt = _ranked_flags(per_image, iou_thr)
    if total_gt == 0:
        raise ValueError("no ground-truth boxes; PR curve undefined")
    points: List[Tuple[float, float]] = []
    tp = 0
    for rank, (score, flag) in enumerate(entries, start=1):
        tp += int(flag)
        is_group_end = rank == len(entries) or entries[rank][0] != score
        if is_group_end:
            points.append((tp / total_gt, tp / rank))
    return points


def ap_from_points(points: Sequence[Tuple[float, float]]) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    if not points:
        return 0.0
    ordered = sorted(points, key=lambda rp: rp[0])
    envelope: List[Tuple[float, float]] = []
    best = 0.0
    for r, p in reversed(ordered):
        best = max(best, p)
        envelope.append((r, best))
    envelope.reverse()
    terms = []
    prev_r = 0.0
    for r, p in envelope:
        terms.append((r - prev_r) * p)
        prev_r = r
    return math.fsum(terms)


def average_precision_50(per_image, iou_thr: float = 0.5) -> float:
    """AP at the matching threshold over a whole test set.

    Raises ValueError when the set contains no truth boxes at all.
    """
    return ap_from_points(pr_curve(per_image, iou_thr=iou_thr))


def evaluate_set(per_image, iou_thr: float = 0.5) -> MetricsReport:
    """Micro-averaged counts plus AP for a full set of images."""
    tp = fp = fn = 0
    for dets, gts in per_image:
        t, f, n, _ = match_detections(dets, gts, iou_thr=iou_thr)
        tp, fp, fn = tp + t, fp + f, fn + n
    precision, recall, f1 = precision_recall_f1(tp, fp, fn)
    total_gt = sum(len(gts) for _, gts in per_image)
    if total_gt:
        points = pr_curve(per_image, iou_thr=iou_thr)
        ap = ap_from_points(points)
    else:
        points, ap = [], 0.0
    return MetricsReport(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall,
                         f1=f1, ap50=ap, pr_points=points)


def emit_pr_curve(points: Sequence[Tuple[float, float]], path: str | Path,
                  plot: bool = False) -> None:
    """Write PR points as CSV sorted by recall; optionally render a PNG."""
    if not points:
        raise ValueError("no PR points to emit")
    ordered = sorted(points, key=lambda rp: rp[0])
    lines = ["recall,precision"]
    lines += [f"{r:.6f},{p:.6f}" for r, p in ordered]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    if plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        rs = [r for r, _ in ordered]
        ps = [p for _, p in ordered]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(rs, ps, marker=".")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(path.with_suffix(".png"), dpi=120)
        plt.close(fig)
