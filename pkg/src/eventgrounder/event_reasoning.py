"""Slot-attention event reasoning: N learnable event slots compete for video frames
and become the initial content and positional moment queries."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .geometry import inverse_sigmoid

NORM_EPS = 1e-8


@dataclass
class EventSlots:
    slots: torch.Tensor  # (B, N, d)
    iteration: int = 0
    attention: torch.Tensor = None  # (B, L_v, N), softmax over slots


@dataclass
class MomentQuerySet:
    content: torch.Tensor  # (B, N, d)
    positions: torch.Tensor  # (B, N, 2) as (center, width) in (0, 1)


class EventReasoning(nn.Module):
    """Residual slot attention with projections shared across the K iterations."""

    def __init__(self, d_model, num_slots, num_iters):
        super().__init__()
        self.d_model = d_model
        self.num_slots = num_slots
        self.num_iters = num_iters
        self.initial_slots = nn.Parameter(torch.randn(num_slots, d_model) * 0.02)
        self.norm_video = nn.LayerNorm(d_model)
        self.norm_slots = nn.LayerNorm(d_model)
        self.norm_update = nn.LayerNorm(d_model)
        self.w1 = nn.Linear(d_model, d_model, bias=False)
        self.w2 = nn.Linear(d_model, d_model, bias=False)
        self.w3 = nn.Linear(d_model, d_model, bias=False)
        self.w4 = nn.Linear(d_model, d_model, bias=False)
        self.span_proj = nn.Linear(d_model, 2)

    def embed_video(self, video):
        return self.norm_video(video) @ self.w1.weight.T, video @ self.w3.weight.T

    def step(self, slots: EventSlots, video, video_mask=None, embedded=None) -> EventSlots:
        """One slot-attention iteration. ``video`` is (B, L_v, d) including frame PE."""
        keys, values = embedded if embedded is not None else self.embed_video(video)
        prev = slots.slots
        queries = self.w2(self.norm_slots(prev))
        logits = keys @ queries.transpose(1, 2) / math.sqrt(self.d_model)
        attn = logits.softmax(dim=-1)  # compete over slots
        if video_mask is not None:
            attn = attn * video_mask[..., None].to(attn.dtype)
        weights = attn / (attn.sum(dim=1, keepdim=True) + NORM_EPS)  # normalize over frames
        update = weights.transpose(1, 2) @ values + prev
        new = self.w4(self.norm_update(update)) + update
        return EventSlots(new, slots.iteration + 1, attn)

    def initial(self, batch_size) -> EventSlots:
        return EventSlots(self.initial_slots[None].expand(batch_size, -1, -1), 0)

    def project_spans(self, slots):
        return self.span_proj(slots).sigmoid()

    def forward(self, video, video_mask=None, initial_slots=None):
        if initial_slots is None:
            state = self.initial(video.shape[0])
        else:
            state = EventSlots(initial_slots.expand(video.shape[0], -1, -1), 0)
        embedded = self.embed_video(video)
        attention = []
        for _ in range(self.num_iters):
            state = self.step(state, video, video_mask, embedded)
            attention.append(state.attention)
        queries = MomentQuerySet(state.slots, self.project_spans(state.slots))
        return queries, attention


class StaticQueries(nn.Module):
    """Input-agnostic queries: zero content and free learnable spans."""

    def __init__(self, d_model, num_queries):
        super().__init__()
        self.d_model = d_model
        self.num_queries = num_queries
        init = torch.rand(num_queries, 2).clamp(0.05, 0.95)
        self.span_logits = nn.Parameter(inverse_sigmoid(init))

    def forward(self, video, video_mask=None):
        b = video.shape[0]
        content = video.new_zeros(b, self.num_queries, self.d_model)
        positions = self.span_logits.sigmoid()[None].expand(b, -1, -1)
        return MomentQuerySet(content, positions), []
