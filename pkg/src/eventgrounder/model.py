"""The full grounding network: encoder, event reasoning, moment decoder."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .encoder import JointEncoder
from .errors import ConfigurationError
from .event_reasoning import EventReasoning, MomentQuerySet, StaticQueries
from .moment_reasoning import MomentDecoder


@dataclass
class ModelConfig:
    video_dim: int
    text_dim: int
    d_model: int = 256
    num_heads: int = 8
    enc_layers: int = 3
    dec_layers: int = 3
    num_queries: int = 10
    slot_iters: int = 3
    dim_feedforward: int = None  # defaults to 4 * d_model
    dropout: float = 0.1
    attn_dropout: float = 0.0
    event_reasoning: bool = True
    gf_layer: bool = True
    tsm_include_pe: bool = False
    modulated_mhca: str = "concat"

    def __post_init__(self):
        if self.dim_feedforward is None:
            self.dim_feedforward = 4 * self.d_model
        for name in ("video_dim", "text_dim", "d_model", "num_heads", "dec_layers", "num_queries", "slot_iters"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.enc_layers < 0:
            raise ConfigurationError("enc_layers must be nonnegative")
        if self.d_model % 2:
            raise ConfigurationError("d_model must be even")
        if self.d_model % self.num_heads:
            raise ConfigurationError("d_model must be divisible by num_heads")
        if self.modulated_mhca != "concat":
            raise ConfigurationError(f"unsupported modulated_mhca variant {self.modulated_mhca!r}")

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def masked_max(x, mask):
    """Coordinate-wise max over valid tokens. x: (B, L, d), mask: (B, L) True=valid."""
    return x.masked_fill(~mask[..., None], float("-inf")).max(dim=1).values


class GroundingModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.encoder = JointEncoder(c.video_dim, c.text_dim, c.d_model, c.num_heads, c.enc_layers,
                                    c.dim_feedforward, c.dropout, c.attn_dropout)
        if c.event_reasoning:
            self.queries = EventReasoning(c.d_model, c.num_queries, c.slot_iters)
        else:
            self.queries = StaticQueries(c.d_model, c.num_queries)
        self.decoder = MomentDecoder(c.d_model, c.num_heads, c.dec_layers, c.dim_feedforward, c.dropout,
                                     gated_fusion=c.gf_layer, attn_dropout=c.attn_dropout)

    def forward(self, video, video_mask, text, text_mask, need_weights=False):
        """Run the network on a padded batch.

        Returns a dict with final ``pred_spans`` (B, N, 2) and ``pred_confidence``
        (B, N), per-layer ``layers`` predictions, the initial ``event_spans``, the
        per-frame ``saliency`` and the ``tsm_features`` used for pseudo events.
        """
        encoded = self.encoder(video, video_mask, text, text_mask, need_weights=need_weights)
        initial, slot_attention = self.queries(encoded.video_embedded, video_mask)
        sentence_global = masked_max(encoded.sentence_embedded, text_mask)
        states = self.decoder(initial.content, initial.positions, encoded, sentence_global, need_weights)
        layers = [self.decoder.predict_heads(s) for s in states]
        tsm_features = encoded.video_embedded if self.config.tsm_include_pe else encoded.video_projected
        out = {
            "pred_spans": layers[-1][0],
            "pred_confidence": layers[-1][1],
            "layers": layers,
            "event_spans": initial.positions,
            "initial_queries": initial,
            "saliency": encoded.saliency,
            "tsm_features": tsm_features.detach(),
            "video_mask": video_mask,
            "states": states,
            "slot_attention": slot_attention,
            "encoded": encoded,
        }
        return out

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, seed: int = None) -> GroundingModel:
    """Construct a model; with ``seed`` the initialization is reproducible."""
    if seed is None:
        return GroundingModel(config)
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return GroundingModel(config)
    finally:
        torch.random.set_rng_state(state)
