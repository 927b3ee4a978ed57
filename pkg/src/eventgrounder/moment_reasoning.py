"""Decoder side: positional-query embedding, the gated fusion layer, layer-wise
span refinement and the prediction heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .geometry import COORD_TEMPERATURE, FRAME_TEMPERATURE, inverse_sigmoid, sinusoidal_encode_tensor
from .layers import MLP, FeedForward, MultiHeadAttention


@dataclass
class DecoderState:
    content: torch.Tensor  # (B, N, d) after this layer
    positions: torch.Tensor  # (B, N, 2) reference spans the layer attended with
    layer: int
    gates: torch.Tensor = None  # (B, N), gated fusion layer only
    cross_attention: torch.Tensor = None  # (B, N, L_v + L_s)
    extras: dict = field(default_factory=dict)


class PositionalQueryEmbedding(nn.Module):
    """(center, width) -> d via sinusoidal encoding of each coordinate and a 2-layer MLP."""

    def __init__(self, d_model):
        super().__init__()
        self.d_model = d_model
        self.mlp = MLP(2 * d_model, d_model, d_model, 2)

    def encode(self, positions):
        c, w = positions.unbind(-1)
        return torch.cat(
            [
                sinusoidal_encode_tensor(c, self.d_model, COORD_TEMPERATURE),
                sinusoidal_encode_tensor(w, self.d_model, COORD_TEMPERATURE),
            ],
            dim=-1,
        )

    def forward(self, positions):
        return self.mlp(self.encode(positions))


def query_frame_encoding(positions, num_frames, d_model):
    """Sinusoidal embedding of each query center expressed in frame-index units.

    ``num_frames`` is the per-sample count of valid frames, shape (B,). Frame l
    is centered at normalized time (l + 0.5) / L, hence the -0.5 shift.
    """
    centers = positions[..., 0] * num_frames[:, None].to(positions.dtype) - 0.5
    return sinusoidal_encode_tensor(centers, d_model, FRAME_TEMPERATURE)


class DecoderLayer(nn.Module):
    """Post-norm decoder layer: MHSA over queries, modulated MHCA into the encoder
    output, then FFN."""

    def __init__(self, d_model, num_heads, dim_feedforward, dropout=0.1, attn_dropout=0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, num_heads, attn_dropout)
        # concat modulation: [content ; query pos] against [memory ; frame pos]
        self.cross_attn = MultiHeadAttention(d_model, num_heads, attn_dropout, q_dim=2 * d_model,
                                             k_dim=2 * d_model)
        self.ffn = FeedForward(d_model, dim_feedforward, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.dropout3 = nn.Dropout(dropout)

    def query_self_attention(self, content, query_pos):
        q = content + query_pos
        out, _ = self.self_attn(q, q, content, need_weights=False)
        return self.norm1(content + self.dropout1(out))

    def cross_attention(self, content, query_sine, memory, memory_pos, memory_mask, need_weights=False):
        q = torch.cat([content, query_sine], dim=-1)
        k = torch.cat([memory, memory_pos], dim=-1)
        out, weights = self.cross_attn(q, k, memory, key_padding_mask=~memory_mask, need_weights=need_weights)
        content = self.norm2(content + self.dropout2(out))
        content = self.norm3(content + self.dropout3(self.ffn(content)))
        return content, weights

    def forward(self, content, query_pos, query_sine, memory, memory_pos, memory_mask, sentence_global=None,
                need_weights=False):
        content = self.query_self_attention(content, query_pos)
        content, weights = self.cross_attention(content, query_sine, memory, memory_pos, memory_mask, need_weights)
        return content, weights, None


class GatedFusionLayer(DecoderLayer):
    """Decoder layer that fuses the global sentence vector into the queries, scaled
    per query by a sigmoid gate of query-sentence agreement."""

    def __init__(self, d_model, num_heads, dim_feedforward, dropout=0.1, attn_dropout=0.0):
        super().__init__(d_model, num_heads, dim_feedforward, dropout, attn_dropout)
        self.sentence_attn = MultiHeadAttention(d_model, num_heads, attn_dropout)
        self.fusion_attn = MultiHeadAttention(d_model, num_heads, attn_dropout)
        self.fusion_proj = nn.Linear(d_model, d_model)

    @staticmethod
    def gate(enhanced, aggregated):
        # raw dot product, deliberately unscaled
        return (enhanced * aggregated).sum(-1).sigmoid()

    def fuse(self, enhanced, sentence_global):
        kv = sentence_global[:, None, :]
        aggregated, _ = self.sentence_attn(enhanced, kv, kv, need_weights=False)
        g = self.gate(enhanced, aggregated)
        mixed = enhanced + aggregated
        fused, _ = self.fusion_attn(mixed, mixed, mixed, need_weights=False)
        return self.fusion_proj(g[..., None] * fused) + enhanced, g

    def forward(self, content, query_pos, query_sine, memory, memory_pos, memory_mask, sentence_global=None,
                need_weights=False):
        enhanced = self.query_self_attention(content, query_pos)
        fused, g = self.fuse(enhanced, sentence_global)
        content, weights = self.cross_attention(fused, query_sine, memory, memory_pos, memory_mask, need_weights)
        return content, weights, g


class MomentDecoder(nn.Module):
    def __init__(self, d_model, num_heads, num_layers, dim_feedforward, dropout=0.1, gated_fusion=True,
                 attn_dropout=0.0):
        super().__init__()
        if num_layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.d_model = d_model
        self.num_layers = num_layers
        self.query_pos = PositionalQueryEmbedding(d_model)
        first = GatedFusionLayer if gated_fusion else DecoderLayer
        self.layers = nn.ModuleList(
            [first(d_model, num_heads, dim_feedforward, dropout, attn_dropout)]
            + [DecoderLayer(d_model, num_heads, dim_feedforward, dropout, attn_dropout)
               for _ in range(num_layers - 1)]
        )
        self.offset_heads = nn.ModuleList(MLP(d_model, d_model, 2, 2) for _ in range(num_layers - 1))
        self.span_head = MLP(d_model, d_model, 2, 3)
        self.confidence_head = nn.Linear(d_model, 1)

    def forward(self, content, positions, encoded, sentence_global, need_weights=False):
        """Returns the per-layer :class:`DecoderState` list (length T)."""
        memory = encoded.joint
        memory_mask = encoded.joint_mask
        num_text = memory.shape[1] - encoded.num_video
        memory_pos = torch.cat([encoded.frame_pe, encoded.frame_pe.new_zeros(num_text, self.d_model)], dim=0)
        memory_pos = memory_pos[None].expand(memory.shape[0], -1, -1)
        num_frames = encoded.video_mask.sum(dim=1)

        states = []
        for t, layer in enumerate(self.layers):
            query_pos = self.query_pos(positions)
            query_sine = query_frame_encoding(positions, num_frames, self.d_model)
            content, weights, gates = layer(
                content, query_pos, query_sine, memory, memory_pos, memory_mask, sentence_global, need_weights
            )
            states.append(
                DecoderState(content, positions, t + 1, gates, weights)
            )
            if t < self.num_layers - 1:
                delta = self.offset_heads[t](content)
                positions = (inverse_sigmoid(positions) + delta).sigmoid()
        return states

    def predict_heads(self, state: DecoderState):
        """Spans as offsets from the state's reference positions, plus confidences."""
        spans = (inverse_sigmoid(state.positions) + self.span_head(state.content)).sigmoid()
        confidence = self.confidence_head(state.content).squeeze(-1).sigmoid()
        return spans, confidence
