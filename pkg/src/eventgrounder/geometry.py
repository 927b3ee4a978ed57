"""Span arithmetic on normalized (center, width) moments.

Scalar helpers operate on :class:`MomentSpan`; the ``*_tensor`` / ``pairwise_*``
variants work on ``(..., 2)`` torch tensors and keep autograd intact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, InvalidSpanError

# temperature for normalized coordinates in [0, 1]; frame indices use 1.0
COORD_TEMPERATURE = 1000.0
FRAME_TEMPERATURE = 1.0


@dataclass(frozen=True)
class MomentSpan:
    center: float
    width: float

    def __post_init__(self):
        c, w = float(self.center), float(self.width)
        if not (math.isfinite(c) and math.isfinite(w)):
            raise InvalidSpanError(f"non-finite span ({c}, {w})")
        if not 0.0 <= c <= 1.0:
            raise InvalidSpanError(f"center {c} outside [0, 1]")
        if not 0.0 < w <= 1.0:
            raise InvalidSpanError(f"width {w} outside (0, 1]")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "width", w)

    @classmethod
    def from_interval(cls, start, end):
        return cls((start + end) / 2.0, end - start)

    def interval(self):
        return span_to_interval(self)

    def as_tuple(self):
        return (self.center, self.width)


def span_to_interval(s: MomentSpan) -> tuple[float, float]:
    start = max(0.0, s.center - s.width / 2.0)
    end = min(1.0, s.center + s.width / 2.0)
    if end <= start:
        raise InvalidSpanError(f"span {s.as_tuple()} is empty after clamping to [0, 1]")
    return start, end


def generalized_temporal_iou(a: MomentSpan, b: MomentSpan) -> tuple[float, float]:
    """Return ``(iou, giou)`` for two spans."""
    s1, e1 = span_to_interval(a)
    s2, e2 = span_to_interval(b)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    enclosure = max(e1, e2) - min(s1, s2)
    iou = inter / union
    giou = iou - (enclosure - union) / enclosure
    return iou, giou


def interval_iou(a, b) -> float:
    """IoU of two ``(start, end)`` intervals given directly."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def sinusoidal_encode(x: float, d: int, temperature: float = COORD_TEMPERATURE) -> np.ndarray:
    """Interleaved ``[sin, cos, ...]`` encoding of a scalar in ``d`` dimensions."""
    if d <= 0 or d % 2:
        raise ConfigurationError(f"encoding dimension must be even and positive, got {d}")
    i = np.arange(d // 2, dtype=np.float64)
    omega = 10000.0 ** (2.0 * i / d)
    arg = x * temperature / omega
    out = np.empty(d, dtype=np.float64)
    out[0::2] = np.sin(arg)
    out[1::2] = np.cos(arg)
    return out


# ---------------------------------------------------------------------------
# tensor versions


def span_cxw_to_xx(spans: torch.Tensor) -> torch.Tensor:
    """(..., 2) center/width -> (..., 2) start/end, clamped to [0, 1]."""
    c, w = spans.unbind(-1)
    return torch.stack([(c - 0.5 * w).clamp(min=0.0), (c + 0.5 * w).clamp(max=1.0)], dim=-1)


def span_xx_to_cxw(xx: torch.Tensor) -> torch.Tensor:
    s, e = xx.unbind(-1)
    return torch.stack([(s + e) / 2, e - s], dim=-1)


def pairwise_temporal_iou(spans1: torch.Tensor, spans2: torch.Tensor):
    """IoU and union between every pair of (start, end) rows. Shapes (N, 2), (M, 2) -> (N, M)."""
    areas1 = spans1[:, 1] - spans1[:, 0]
    areas2 = spans2[:, 1] - spans2[:, 0]
    left = torch.max(spans1[:, None, 0], spans2[None, :, 0])
    right = torch.min(spans1[:, None, 1], spans2[None, :, 1])
    inter = (right - left).clamp(min=0)
    union = areas1[:, None] + areas2[None, :] - inter
    return inter / union, union


def pairwise_generalized_iou(spans1: torch.Tensor, spans2: torch.Tensor) -> torch.Tensor:
    """Generalized IoU between (start, end) rows, (N, 2) x (M, 2) -> (N, M)."""
    iou, union = pairwise_temporal_iou(spans1, spans2)
    left = torch.min(spans1[:, None, 0], spans2[None, :, 0])
    right = torch.max(spans1[:, None, 1], spans2[None, :, 1])
    enclosure = (right - left).clamp(min=0)
    return iou - (enclosure - union) / enclosure


def paired_generalized_iou(spans1: torch.Tensor, spans2: torch.Tensor) -> torch.Tensor:
    """Generalized IoU between row i of ``spans1`` and row i of ``spans2`` (start/end form)."""
    inter = (torch.min(spans1[:, 1], spans2[:, 1]) - torch.max(spans1[:, 0], spans2[:, 0])).clamp(min=0)
    union = (spans1[:, 1] - spans1[:, 0]) + (spans2[:, 1] - spans2[:, 0]) - inter
    enclosure = torch.max(spans1[:, 1], spans2[:, 1]) - torch.min(spans1[:, 0], spans2[:, 0])
    return inter / union - (enclosure - union) / enclosure


def sinusoidal_encode_tensor(x: torch.Tensor, d: int, temperature: float = COORD_TEMPERATURE) -> torch.Tensor:
    """Vectorized :func:`sinusoidal_encode`: (...) -> (..., d)."""
    if d <= 0 or d % 2:
        raise ConfigurationError(f"encoding dimension must be even and positive, got {d}")
    i = torch.arange(d // 2, dtype=x.dtype, device=x.device)
    omega = 10000.0 ** (2.0 * i / d)
    arg = x[..., None] * temperature / omega
    return torch.stack([arg.sin(), arg.cos()], dim=-1).flatten(-2)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))
