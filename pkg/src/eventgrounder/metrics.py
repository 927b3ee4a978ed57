"""Grounding evaluation: Recall1@IoU and mean average precision over IoU thresholds."""
from __future__ import annotations

import csv
import json
import logging

import numpy as np

from .geometry import MomentSpan, interval_iou, span_to_interval

logger = logging.getLogger(__name__)

MAP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
# IoU comparisons absorb float rounding, so an IoU of exactly 11/20 meets 0.55
IOU_TOL = 1e-9


def _interval(span):
    if isinstance(span, MomentSpan):
        return span_to_interval(span)
    return span_to_interval(MomentSpan(*span))


def top1_ious(preds, gts):
    """Best IoU of each sample's highest-confidence prediction against its ground truths.

    ``preds[i]`` is a list of ``(span, confidence)``; ``gts[i]`` a list of spans.
    Samples without predictions get ``None``.
    """
    out = []
    for sample_preds, sample_gts in zip(preds, gts):
        if not sample_preds:
            out.append(None)
            continue
        best = max(range(len(sample_preds)), key=lambda k: (sample_preds[k][1], -k))
        top = _interval(sample_preds[best][0])
        out.append(max(interval_iou(top, _interval(g)) for g in sample_gts))
    return out


def recall1_at_iou(preds, gts, m: float) -> float:
    """Fraction of samples whose top-1 span has IoU strictly greater than ``m`` with any gt."""
    ious = top1_ious(preds, gts)
    missing = sum(v is None for v in ious)
    if missing:
        logger.warning("%d samples have no predictions; counted as misses", missing)
    return sum(1 for v in ious if v is not None and v > m + IOU_TOL) / len(ious)


def average_precision(preds, gts, threshold: float) -> float:
    """All-point interpolated AP with greedy matching at IoU >= threshold."""
    flat = [(conf, i, k) for i, sample in enumerate(preds) for k, (_, conf) in enumerate(sample)]
    # stable sort keeps (sample, prediction) order among equal confidences
    flat.sort(key=lambda t: -t[0])
    num_gt = sum(len(g) for g in gts)
    if num_gt == 0:
        return 0.0
    gt_intervals = [[_interval(g) for g in sample] for sample in gts]
    used = [np.zeros(len(sample), dtype=bool) for sample in gts]
    tp = np.zeros(len(flat))
    for r, (_, i, k) in enumerate(flat):
        pred = _interval(preds[i][k][0])
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_intervals[i]):
            if used[i][j]:
                continue
            iou = interval_iou(pred, g)
            if iou >= threshold - IOU_TOL and iou > best + IOU_TOL:
                best, best_j = iou, j
        if best_j >= 0:
            used[i][best_j] = True
            tp[r] = 1
    if not len(flat):
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(flat) + 1)
    recall = ctp / num_gt
    # precision envelope, then area under the step curve
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for n in range(len(mpre) - 2, -1, -1):
        mpre[n] = max(mpre[n], mpre[n + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def mean_ap(preds, gts, thresholds=MAP_THRESHOLDS) -> dict:
    per = {float(t): average_precision(preds, gts, t) for t in thresholds}
    return {"per_threshold": per, "mean": float(np.mean(list(per.values())))}


def evaluation_report(preds, gts) -> dict:
    """The five headline grounding numbers, as percentages."""
    maps = mean_ap(preds, gts)
    return {
        "R1@0.5": 100 * recall1_at_iou(preds, gts, 0.5),
        "R1@0.7": 100 * recall1_at_iou(preds, gts, 0.7),
        "mAP@0.5": 100 * maps["per_threshold"][0.5],
        "mAP@0.75": 100 * maps["per_threshold"][0.75],
        "mAP_avg": 100 * maps["mean"],
    }


def write_report(path, report) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)


def write_top1_csv(path, qids, preds, gts) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["qid", "top1_iou"])
        for qid, iou in zip(qids, top1_ious(preds, gts)):
            writer.writerow([qid, "" if iou is None else f"{iou:.6f}"])
