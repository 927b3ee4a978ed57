"""Unsupervised pseudo event timestamps from a temporal self-similarity matrix.

Pipeline: cosine TSM -> contrastive-kernel boundary scores along the diagonal
-> mean threshold -> size-3 sliding max -> events between boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateFeatureError, SequenceTooShortError
from .geometry import MomentSpan

KERNEL_SIZE = 5
CONTRASTIVE_KERNEL = np.array(
    [
        [1, 1, 0, -1, -1],
        [1, 1, 0, -1, -1],
        [0, 0, 0, 0, 0],
        [-1, -1, 0, 1, 1],
        [-1, -1, 0, 1, 1],
    ],
    dtype=np.float64,
)
# relative tolerance used when comparing boundary scores for equality; TSM
# entries of identical feature rows may differ in the last ulp after BLAS
TIE_RTOL = 1e-9


@dataclass
class BoundaryScores:
    scores: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))


def build_tsm(features, mask=None) -> np.ndarray:
    """Pairwise cosine similarity of the rows of an ``(L, d)`` feature matrix."""
    f = torch.as_tensor(features).detach().to(torch.float64).cpu().numpy()
    if mask is not None:
        f = f[np.asarray(mask, dtype=bool)]
    if f.ndim != 2 or f.shape[0] < 1:
        raise DegenerateFeatureError(f"expected a non-empty (L, d) matrix, got shape {f.shape}")
    norms = np.linalg.norm(f, axis=1)
    bad = np.flatnonzero(norms <= 0)
    if bad.size:
        raise DegenerateFeatureError(f"zero-norm feature rows at indices {bad.tolist()}")
    unit = f / norms[:, None]
    tsm = unit @ unit.T
    tsm = 0.5 * (tsm + tsm.T)
    np.fill_diagonal(tsm, 1.0)
    return np.clip(tsm, -1.0, 1.0)


def boundary_scores(tsm) -> BoundaryScores:
    """Convolve the contrastive kernel along the TSM diagonal.

    Centers without a full 5x5 window (the first and last two) score 0.
    """
    tsm = np.asarray(tsm, dtype=np.float64)
    length = tsm.shape[0]
    if length < KERNEL_SIZE:
        raise SequenceTooShortError(f"need at least {KERNEL_SIZE} frames, got {length}")
    half = KERNEL_SIZE // 2
    scores = np.zeros(length, dtype=np.float64)
    centers = np.arange(half, length - half)
    for p in range(KERNEL_SIZE):
        for q in range(KERNEL_SIZE):
            z = CONTRASTIVE_KERNEL[p, q]
            if z:
                scores[centers] += z * tsm[centers - half + p, centers - half + q]
    return BoundaryScores(scores)


def select_boundaries(b: BoundaryScores) -> list[int]:
    """Indices surviving the mean threshold and the size-3 sliding max.

    In a run of equal maxima only the last index is kept; index 0 is never a boundary.
    """
    s = np.asarray(b.scores, dtype=np.float64)
    length = len(s)
    tol = TIE_RTOL * max(1.0, float(np.max(np.abs(s))) if length else 1.0)
    kept = np.where(s < b.mean - tol, 0.0, s)
    out = []
    for i in range(1, length):
        v = kept[i]
        if v <= tol:
            continue
        lo, hi = max(0, i - 1), min(length, i + 2)
        if v < kept[lo:hi].max() - tol:
            continue
        if i + 1 < length and abs(kept[i + 1] - v) <= tol:
            continue
        out.append(i)
    return out


def events_from_boundaries(boundaries, length: int) -> list[MomentSpan]:
    cuts = [0] + sorted(i for i in set(boundaries) if 0 < i < length) + [length]
    return [MomentSpan((a + b) / (2.0 * length), (b - a) / length) for a, b in zip(cuts[:-1], cuts[1:])]


def extract_events(b: BoundaryScores, length: int) -> list[MomentSpan]:
    if len(b.scores) != length:
        raise ValueError(f"scores have length {len(b.scores)}, expected {length}")
    return events_from_boundaries(select_boundaries(b), length)


def pseudo_events(features, mask=None) -> list[MomentSpan]:
    """Full pipeline on one video's features; short videos become one whole-video event."""
    tsm = build_tsm(features, mask)
    try:
        scores = boundary_scores(tsm)
    except SequenceTooShortError:
        return [MomentSpan(0.5, 1.0)]
    return extract_events(scores, tsm.shape[0])


def event_boundaries(features, mask=None) -> list[int]:
    tsm = build_tsm(features, mask)
    if tsm.shape[0] < KERNEL_SIZE:
        return []
    return select_boundaries(boundary_scores(tsm))
