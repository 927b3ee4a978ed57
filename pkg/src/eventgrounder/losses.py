"""Saliency margin loss, event and moment localization losses, and the overall objective."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from .assignment import CostWeights, _as_span_tensor, hungarian, moment_cost_matrix, span_cost_matrix
from .geometry import span_cxw_to_xx
from .errors import TrainingDivergenceError
from .pseudo_events import pseudo_events

PROB_EPS = 1e-7

# incremented whenever a loss term is skipped for lack of usable targets
skipped = Counter()


@dataclass(frozen=True)
class LossWeights:
    lambda_sal: float = 1.0
    lambda_event: float = 2.0
    alpha: float = 0.2
    cost: CostWeights = field(default_factory=CostWeights)
    background_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda_sal", "lambda_event", "alpha", "background_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def frames_inside(gt_spans, num_frames):
    """Boolean (L,) vector: frame centers falling in any ground-truth interval."""
    gt = _as_span_tensor(gt_spans).detach().cpu().double()
    centers = (torch.arange(num_frames, dtype=torch.float64) + 0.5) / num_frames
    inside = torch.zeros(num_frames, dtype=torch.bool)
    for c, w in gt.tolist():
        inside |= (centers >= c - w / 2) & (centers <= c + w / 2)
    return inside


def saliency_loss(scores, gt_spans, alpha: float, rng: np.random.Generator, mask=None):
    """Hinge on one randomly sampled inside frame versus one outside frame."""
    scores = torch.as_tensor(scores)
    valid = torch.ones(len(scores), dtype=torch.bool) if mask is None else torch.as_tensor(mask).cpu()
    num_frames = int(valid.sum())
    inside = torch.zeros(len(scores), dtype=torch.bool)
    inside[:num_frames] = frames_inside(gt_spans, num_frames)
    in_idx = torch.nonzero(inside & valid).flatten().tolist()
    out_idx = torch.nonzero(~inside & valid).flatten().tolist()
    if not in_idx or not out_idx:
        skipped["saliency"] += 1
        return scores.sum() * 0.0
    i = in_idx[rng.integers(len(in_idx))]
    o = out_idx[rng.integers(len(out_idx))]
    return torch.relu(alpha + scores[o] - scores[i])


def event_loss(predicted, pseudo, w: CostWeights = CostWeights()):
    """Sum of matching costs between pseudo events and predicted event spans at the
    optimal assignment. Unmatched predictions contribute nothing."""
    predicted = _as_span_tensor(predicted)
    if pseudo is None or len(pseudo) == 0:
        skipped["event"] += 1
        return predicted.sum() * 0.0
    targets = _as_span_tensor(pseudo, dtype=predicted.dtype).to(predicted.dtype)
    cost = span_cost_matrix(targets, predicted, w)
    match = hungarian(cost.detach().cpu().numpy())
    rows = torch.tensor(match.rows, dtype=torch.long)
    cols = torch.tensor(match.cols, dtype=torch.long)
    return cost[rows, cols].sum()


def moment_loss(moments, confidence, gt, w: CostWeights = CostWeights(), background_weight: float = 1.0):
    """Matched queries pay the confidence, L1 and gIoU terms; unmatched queries pay a
    background term pushing their confidence to zero."""
    moments = _as_span_tensor(moments)
    confidence = torch.as_tensor(confidence, dtype=moments.dtype).reshape(-1)
    targets = _as_span_tensor(gt, dtype=moments.dtype).to(moments.dtype)
    match = hungarian(moment_cost_matrix(targets, moments, confidence, w).cpu().numpy())
    rows = torch.tensor(match.rows, dtype=torch.long)
    cols = torch.tensor(match.cols, dtype=torch.long)
    p = confidence.clamp(PROB_EPS, 1 - PROB_EPS)
    span_cost = span_cost_matrix(targets[rows], moments[cols], w).diagonal()
    matched = (-w.lambda_c * torch.log(p[cols]) + span_cost).sum()
    unmatched = torch.ones(len(p), dtype=torch.bool)
    unmatched[cols] = False
    background = -torch.log(1 - p[unmatched]).sum()
    return matched + background_weight * background


def overall_loss(moment, saliency, event, weights: LossWeights = LossWeights()):
    """L_moment + lambda_sal * L_sal + lambda_event * L_event."""
    parts = {"moment": moment, "saliency": saliency, "event": event}
    values = {k: float(torch.as_tensor(v).detach()) for k, v in parts.items()}
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDivergenceError(f"non-finite loss components: {bad}", diagnostics=bad)
    return moment + weights.lambda_sal * saliency + weights.lambda_event * event


def pad_targets(targets, dtype=None):
    """List of (M_i, 2) tensors -> padded (B, M, 2) tensor and (B, M) validity mask."""
    m = max(len(t) for t in targets)
    dtype = dtype or targets[0].dtype
    out = torch.full((len(targets), m, 2), 0.5, dtype=dtype)
    mask = torch.zeros(len(targets), m, dtype=torch.bool)
    for i, t in enumerate(targets):
        out[i, : len(t)] = t.to(dtype)
        mask[i, : len(t)] = True
    return out, mask


def batched_span_cost(targets, predicted, w: CostWeights):
    """(B, M, 2) x (B, N, 2) -> (B, M, N) matching cost without the confidence term."""
    l1 = (targets[:, :, None, :] - predicted[:, None, :, :]).abs().sum(-1)
    t = span_cxw_to_xx(targets)[:, :, None, :]
    p = span_cxw_to_xx(predicted)[:, None, :, :]
    inter = (torch.min(t[..., 1], p[..., 1]) - torch.max(t[..., 0], p[..., 0])).clamp(min=0)
    union = (t[..., 1] - t[..., 0]) + (p[..., 1] - p[..., 0]) - inter
    enclosure = torch.max(t[..., 1], p[..., 1]) - torch.min(t[..., 0], p[..., 0])
    giou = inter / union - (enclosure - union) / enclosure
    return w.lambda_l1 * l1 + w.lambda_iou * (1.0 - giou)


def _match_batch(cost, mask):
    """Per-sample Hungarian on a padded (B, M, N) cost; returns flat index tensors."""
    cost_np = cost.detach().cpu().numpy()
    bi, ri, ci = [], [], []
    for b in range(cost_np.shape[0]):
        m = int(mask[b].sum())
        if m == 0:
            continue
        match = hungarian(cost_np[b, :m])
        bi += [b] * len(match.pairs)
        ri += match.rows
        ci += match.cols
    as_long = lambda v: torch.tensor(v, dtype=torch.long)
    return as_long(bi), as_long(ri), as_long(ci)


def batched_moment_loss(spans, confidence, targets, target_mask, w: CostWeights, background_weight):
    """Per-sample :func:`moment_loss` summed over a padded batch."""
    span_cost = batched_span_cost(targets, spans, w)
    p = confidence.clamp(PROB_EPS, 1 - PROB_EPS)
    bi, ri, ci = _match_batch(span_cost - w.lambda_c * confidence[:, None, :], target_mask)
    matched = (-w.lambda_c * torch.log(p[bi, ci]) + span_cost[bi, ri, ci]).sum()
    unmatched = torch.ones_like(p, dtype=torch.bool)
    unmatched[bi, ci] = False
    background = -torch.log(1 - p[unmatched]).sum()
    return matched + background_weight * background


def batched_saliency_loss(scores, targets, video_mask, alpha, rng: np.random.Generator):
    """Sum over the batch of :func:`saliency_loss`, drawing from ``rng`` in the same order."""
    idx_in, idx_out, rows = [], [], []
    for b, gt in enumerate(targets):
        valid = video_mask[b]
        n = int(valid.sum())
        inside = torch.zeros(len(valid), dtype=torch.bool)
        inside[:n] = frames_inside(gt, n)
        in_idx = torch.nonzero(inside & valid).flatten().tolist()
        out_idx = torch.nonzero(~inside & valid).flatten().tolist()
        if not in_idx or not out_idx:
            skipped["saliency"] += 1
            continue
        idx_in.append(in_idx[rng.integers(len(in_idx))])
        idx_out.append(out_idx[rng.integers(len(out_idx))])
        rows.append(b)
    if not rows:
        return scores.sum() * 0.0
    rows = torch.tensor(rows)
    return torch.relu(alpha + scores[rows, torch.tensor(idx_out)] - scores[rows, torch.tensor(idx_in)]).sum()


def batched_event_loss(event_spans, pseudo, w: CostWeights):
    """Per-sample :func:`event_loss` summed over the batch."""
    targets, mask = pad_targets(pseudo, event_spans.dtype)
    cost = batched_span_cost(targets, event_spans, w)
    bi, ri, ci = _match_batch(cost, mask)
    return cost[bi, ri, ci].sum()


class GroundingCriterion:
    """Batch objective over model outputs.

    ``targets`` is a list (one per sample) of (M_i, 2) ground-truth span tensors.
    Pseudo events are derived from the model's TSM features unless supplied.
    Every component is averaged over the batch.
    """

    def __init__(self, weights: LossWeights = LossWeights(), aux_loss=True, use_event_loss=True):
        self.weights = weights
        self.aux_loss = aux_loss
        self.use_event_loss = use_event_loss

    @staticmethod
    def pseudo_targets(outputs):
        feats = outputs["tsm_features"]
        mask = outputs["video_mask"]
        events = []
        for f, m in zip(feats, mask):
            spans = pseudo_events(f, m)
            events.append(torch.tensor([s.as_tuple() for s in spans], dtype=feats.dtype))
        return events

    def __call__(self, outputs, targets, rng: np.random.Generator, pseudo=None):
        w = self.weights
        batch = len(targets)
        padded, tmask = pad_targets(targets, outputs["pred_spans"].dtype)
        layers = outputs["layers"] if self.aux_loss else outputs["layers"][-1:]
        moment = sum(
            batched_moment_loss(spans, conf, padded, tmask, w.cost, w.background_weight)
            for spans, conf in layers
        ) / batch

        sal = batched_saliency_loss(outputs["saliency"], targets, outputs["video_mask"], w.alpha, rng) / batch

        if self.use_event_loss and w.lambda_event > 0:
            if pseudo is None:
                pseudo = self.pseudo_targets(outputs)
            event = batched_event_loss(outputs["event_spans"], pseudo, w.cost) / batch
        else:
            event = outputs["event_spans"].sum() * 0.0

        total = overall_loss(moment, sal, event, w)
        return {"moment": moment, "saliency": sal, "event": event, "total": total}
