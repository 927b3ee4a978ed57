import pytest
import torch

from conftest import random_batch
from eventgrounder.model import ModelConfig, build_model
from eventgrounder.moment_reasoning import GatedFusionLayer, PositionalQueryEmbedding


def double_model(**kw):
    cfg = dict(video_dim=6, text_dim=5, d_model=8, num_heads=2, enc_layers=1, dec_layers=3, num_queries=4,
               slot_iters=2, dropout=0.0)
    cfg.update(kw)
    config = ModelConfig(**cfg)
    model = build_model(config, seed=0).double()
    model.eval()
    return model, config


def test_positional_embedding_shape_and_zero_map():
    torch.manual_seed(0)
    emb = PositionalQueryEmbedding(8)
    assert emb(torch.tensor([[0.3, 0.2]])).shape == (1, 8)
    for p in emb.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(emb(torch.tensor([[0.3, 0.2]])), torch.zeros(1, 8))


def test_positional_embedding_jacobian_finite_differences():
    torch.manual_seed(0)
    emb = PositionalQueryEmbedding(8).double()
    x = torch.tensor([0.43, 0.21], dtype=torch.float64, requires_grad=True)
    jac = torch.autograd.functional.jacobian(emb, x)
    eps = 1e-7
    numeric = torch.zeros_like(jac)
    for k in range(2):
        dx = torch.zeros(2, dtype=torch.float64)
        dx[k] = eps
        numeric[:, k] = (emb(x.detach() + dx) - emb(x.detach() - dx)) / (2 * eps)
    assert (jac - numeric).norm() / numeric.norm() <= 1e-4


def test_gate_values():
    torch.manual_seed(0)
    c = torch.tensor([[[1.0, 0.0, 0.0, 0.0]]])
    assert GatedFusionLayer.gate(c, torch.tensor([[[0.0, 1.0, 0.0, 0.0]]])).item() == 0.5
    dots = torch.linspace(-5, 5, 11)
    gates = GatedFusionLayer.gate(c.expand(1, 11, 4), torch.stack([dots, *[torch.zeros(11)] * 3], -1)[None])
    assert (gates[0, 1:] > gates[0, :-1]).all()


def test_gate_closed_suppresses_fusion_update():
    torch.manual_seed(0)
    layer = GatedFusionLayer(8, 2, 16, dropout=0.0).eval()
    enhanced = torch.randn(1, 3, 8)
    sentence = torch.randn(1, 8)
    with torch.no_grad():
        # scale the aggregated sentence vector so every gate saturates at 0
        layer.sentence_attn.out_proj.weight.zero_()
        layer.sentence_attn.out_proj.bias.copy_(-1e4 * enhanced[0].sum(0))
    fused, g = layer.fuse(enhanced, sentence)
    assert (g < 1e-6).all()
    assert torch.allclose(fused, enhanced + layer.fusion_proj.bias, atol=1e-4)


def test_zero_offset_heads_keep_positions():
    model, config = double_model()
    for head in model.decoder.offset_heads:
        for p in head.parameters():
            torch.nn.init.zeros_(p)
    out = model(**random_batch(config, dtype=torch.float64))
    positions = [s.positions for s in out["states"]]
    for p in positions[1:]:
        assert torch.allclose(p, positions[0], atol=1e-12)


def test_positions_valid_after_every_layer_and_heads_in_range():
    model, config = double_model()
    out = model(**random_batch(config, dtype=torch.float64))
    assert len(out["states"]) == 3
    for s in out["states"]:
        assert ((s.positions > 0) & (s.positions < 1)).all()
    assert out["pred_spans"].shape == (2, 4, 2) and out["pred_confidence"].shape == (2, 4)
    assert ((out["pred_spans"] > 0) & (out["pred_spans"] < 1)).all()
    assert ((out["pred_confidence"] > 0) & (out["pred_confidence"] < 1)).all()
    assert out["states"][0].gates.shape == (2, 4)


def test_gradients_reach_event_slots_through_decoder():
    model, config = double_model()
    out = model(**random_batch(config, dtype=torch.float64))
    out["pred_spans"].sum().backward()
    assert model.queries.initial_slots.grad.abs().sum() > 0


def test_confidence_gradient_finite_differences():
    model, config = double_model()
    batch = random_batch(config, dtype=torch.float64)
    head = model.decoder.confidence_head
    f = lambda: model(**batch)["pred_confidence"].sum()
    model.zero_grad()
    f().backward()
    analytic = head.weight.grad.clone()
    numeric = torch.zeros_like(analytic)
    eps = 1e-6
    with torch.no_grad():
        for j in range(analytic.numel()):
            head.weight.view(-1)[j] += eps
            up = f().item()
            head.weight.view(-1)[j] -= 2 * eps
            down = f().item()
            head.weight.view(-1)[j] += eps
            numeric.view(-1)[j] = (up - down) / (2 * eps)
    assert (analytic - numeric).norm() / numeric.norm() <= 1e-4


def test_single_layer_is_gated_fusion_plus_heads():
    model, config = double_model(dec_layers=1)
    batch = random_batch(config, dtype=torch.float64)
    out = model(**batch)
    enc = model.encoder(batch["video"], batch["video_mask"], batch["text"], batch["text_mask"])
    queries, _ = model.queries(enc.video_embedded, batch["video_mask"])
    sentence = enc.sentence_embedded.max(dim=1).values
    layer = model.decoder.layers[0]
    assert isinstance(layer, GatedFusionLayer)
    from eventgrounder.moment_reasoning import query_frame_encoding
    memory_pos = torch.cat([enc.frame_pe, torch.zeros(4, 8, dtype=torch.float64)])[None].expand(2, -1, -1)
    content, _, _ = layer(queries.content, model.decoder.query_pos(queries.positions),
                          query_frame_encoding(queries.positions, batch["video_mask"].sum(1), 8),
                          enc.joint, memory_pos, enc.joint_mask, sentence)
    spans, conf = model.decoder.predict_heads(type(out["states"][0])(content, queries.positions, 1))
    assert torch.allclose(spans, out["pred_spans"], atol=1e-12)
    assert torch.allclose(conf, out["pred_confidence"], atol=1e-12)


def test_eval_forward_deterministic():
    model, config = double_model(dropout=0.1)
    batch = random_batch(config, dtype=torch.float64)
    assert torch.equal(model(**batch)["pred_spans"], model(**batch)["pred_spans"])


def test_cross_attention_dump_shape():
    model, config = double_model()
    out = model(**random_batch(config, num_frames=12, num_tokens=4, dtype=torch.float64), need_weights=True)
    for s in out["states"]:
        assert s.cross_attention.shape == (2, 4, 16)
        assert torch.allclose(s.cross_attention.sum(-1), torch.ones(2, 4, dtype=torch.float64))


def test_baseline_variant_has_static_queries():
    model, config = double_model(event_reasoning=False, gf_layer=False)
    out = model(**random_batch(config, dtype=torch.float64))
    assert torch.equal(out["initial_queries"].content, torch.zeros(2, 4, 8, dtype=torch.float64))
    assert torch.equal(out["event_spans"][0], out["event_spans"][1])
    assert not isinstance(model.decoder.layers[0], GatedFusionLayer)
