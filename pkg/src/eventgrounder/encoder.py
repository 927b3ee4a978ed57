"""Feature projection, frame positional embedding and the joint video-sentence encoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError
from .geometry import FRAME_TEMPERATURE, sinusoidal_encode_tensor
from .layers import FeedForward, MultiHeadAttention


@dataclass
class FeatureSequence:
    """``(L, d_in)`` token matrix plus a boolean validity mask (True = valid)."""

    tokens: torch.Tensor
    mask: torch.Tensor = None

    def __post_init__(self):
        self.tokens = torch.as_tensor(self.tokens)
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be (L, d), got shape {tuple(self.tokens.shape)}")
        if self.mask is None:
            self.mask = torch.ones(self.tokens.shape[0], dtype=torch.bool)
        self.mask = torch.as_tensor(self.mask, dtype=torch.bool)
        if self.mask.shape != (self.tokens.shape[0],):
            raise ValueError("mask length must equal the number of tokens")
        if not self.mask.any():
            raise ValueError("a feature sequence needs at least one valid token")

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class EncodedPair:
    joint: torch.Tensor  # (B, L_v + L_s, d), video first
    joint_mask: torch.Tensor  # (B, L_v + L_s), True = valid
    num_video: int
    saliency: torch.Tensor  # (B, L_v)
    video_projected: torch.Tensor  # (B, L_v, d), before positional embedding
    video_embedded: torch.Tensor  # (B, L_v, d), projected + frame PE
    sentence_embedded: torch.Tensor  # (B, L_s, d)
    frame_pe: torch.Tensor  # (L_v, d)

    @property
    def video_part(self):
        return self.joint[:, : self.num_video]

    @property
    def sentence_part(self):
        return self.joint[:, self.num_video:]

    @property
    def video_mask(self):
        return self.joint_mask[:, : self.num_video]

    @property
    def sentence_mask(self):
        return self.joint_mask[:, self.num_video:]


def frame_position_embedding(length, d, dtype=torch.float32, device=None):
    pos = torch.arange(length, dtype=dtype, device=device)
    return sinusoidal_encode_tensor(pos, d, FRAME_TEMPERATURE)


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, d_model, num_heads, dim_feedforward, dropout=0.1, attn_dropout=0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, num_heads, attn_dropout)
        self.ffn = FeedForward(d_model, dim_feedforward, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)

    def forward(self, x, padding_mask, need_weights=False):
        attn, weights = self.self_attn(x, x, x, key_padding_mask=padding_mask, need_weights=need_weights)
        x = self.norm1(x + self.dropout1(attn))
        x = self.norm2(x + self.dropout2(self.ffn(x)))
        return x, weights


class JointEncoder(nn.Module):
    def __init__(self, video_dim, text_dim, d_model, num_heads, num_layers, dim_feedforward, dropout=0.1,
                 attn_dropout=0.0):
        super().__init__()
        if d_model % 2:
            raise ConfigurationError("d_model must be even for sinusoidal frame embeddings")
        self.video_dim = video_dim
        self.text_dim = text_dim
        self.d_model = d_model
        # input LayerNorm keeps projected content on the same scale as the frame PE
        self.video_proj = nn.Sequential(nn.LayerNorm(video_dim), nn.Linear(video_dim, d_model))
        self.text_proj = nn.Sequential(nn.LayerNorm(text_dim), nn.Linear(text_dim, d_model))
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, num_heads, dim_feedforward, dropout, attn_dropout) for _ in range(num_layers)
        )
        self.saliency_proj = nn.Linear(d_model, 1)

    def forward(self, video, video_mask, text, text_mask, need_weights=False):
        if video.shape[-1] != self.video_dim or text.shape[-1] != self.text_dim:
            raise ConfigurationError(
                f"feature dims ({video.shape[-1]}, {text.shape[-1]}) do not match "
                f"configured ({self.video_dim}, {self.text_dim})"
            )
        num_video = video.shape[1]
        projected = self.video_proj(video)
        frame_pe = frame_position_embedding(num_video, self.d_model, projected.dtype, projected.device)
        h_v = projected + frame_pe
        h_s = self.text_proj(text)
        x = torch.cat([h_v, h_s], dim=1)
        mask = torch.cat([video_mask, text_mask], dim=1)
        attn = []
        for layer in self.layers:
            x, w = layer(x, ~mask, need_weights)
            if need_weights:
                attn.append(w)
        saliency = self.saliency_scores(x[:, :num_video])
        out = EncodedPair(x, mask, num_video, saliency, projected, h_v, h_s, frame_pe)
        if need_weights:
            out.attention = attn
        return out

    def saliency_scores(self, video_part):
        return self.saliency_proj(video_part).squeeze(-1)
