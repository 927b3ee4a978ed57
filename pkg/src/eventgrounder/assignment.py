"""Rectangular minimum-cost assignment and the two matching cost functions."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import InvalidCostError
from .geometry import MomentSpan, pairwise_generalized_iou, span_cxw_to_xx, span_to_interval

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostWeights:
    lambda_l1: float = 10.0
    lambda_iou: float = 1.0
    lambda_c: float = 4.0

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_iou", "lambda_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class Assignment:
    pairs: list = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def rows(self):
        return [r for r, _ in self.pairs]

    @property
    def cols(self):
        return [c for _, c in self.pairs]


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of ``min(R, C)`` pairs.

    Backed by scipy's shortest-augmenting-path solver, which handles
    rectangular matrices directly.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] < 1 or cost.shape[1] < 1:
        raise InvalidCostError(f"cost must be a non-empty 2-D matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise InvalidCostError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return Assignment(pairs=pairs, total_cost=float(cost[rows, cols].sum()))


def _as_span_tensor(spans, dtype=torch.float64) -> torch.Tensor:
    if isinstance(spans, torch.Tensor):
        return spans
    rows = []
    for s in spans:
        if isinstance(s, MomentSpan):
            span_to_interval(s)  # raises for degenerate spans
            rows.append(s.as_tuple())
        else:
            rows.append(tuple(s))
    return torch.tensor(rows, dtype=dtype).reshape(-1, 2)


def span_cost_matrix(targets: torch.Tensor, predicted: torch.Tensor, w: CostWeights) -> torch.Tensor:
    """lambda_l1 * L1 + lambda_iou * (1 - gIoU) between (T, 2) targets and (P, 2) predictions."""
    l1 = torch.cdist(targets, predicted, p=1)
    giou = pairwise_generalized_iou(span_cxw_to_xx(targets), span_cxw_to_xx(predicted))
    return w.lambda_l1 * l1 + w.lambda_iou * (1.0 - giou)


@torch.no_grad()
def event_cost_matrix(pseudo, predicted, w: CostWeights = CostWeights()) -> torch.Tensor:
    """Cost between pseudo events (rows) and predicted event spans (columns)."""
    pseudo = _as_span_tensor(pseudo)
    predicted = _as_span_tensor(predicted).to(pseudo.dtype)
    if len(pseudo) == 0 or len(predicted) == 0:
        raise ValueError("event_cost_matrix needs non-empty span lists")
    return span_cost_matrix(pseudo, predicted.detach(), w)


@torch.no_grad()
def moment_cost_matrix(gt, predicted, confidence, w: CostWeights = CostWeights()) -> torch.Tensor:
    """Cost between ground-truth moments (rows) and the N predictions (columns).

    The confidence term rewards assigning a target to a confident query.
    """
    gt = _as_span_tensor(gt)
    predicted = _as_span_tensor(predicted).to(gt.dtype).detach()
    confidence = torch.as_tensor(confidence, dtype=gt.dtype).detach().reshape(-1)
    if len(gt) == 0:
        raise ValueError("moment_cost_matrix needs at least one ground-truth span")
    if len(confidence) != len(predicted):
        raise ValueError(f"{len(predicted)} predictions but {len(confidence)} confidences")
    if len(gt) > len(predicted):
        logger.warning("%d ground-truth moments exceed %d queries; matching %d of them",
                       len(gt), len(predicted), len(predicted))
    return -w.lambda_c * confidence[None, :] + span_cost_matrix(gt, predicted, w)
