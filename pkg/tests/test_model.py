import numpy as np
import pytest
import torch

from pwdmocap.errors import InvalidInputError
from pwdmocap.model import (
    GatedCrossAttention,
    ModelConfig,
    PWDEmbedding,
    STJSelfAttention,
    WiPModel,
    flatten_joints,
    is_stage2_trainable,
    load_checkpoint,
    save_checkpoint,
    unflatten_joints,
)

torch.set_num_threads(1)

TINY = dict(num_blocks=2, channels=8, heads=2, stj_heads=2, dropout=0.0, window=4)


def inputs(cfg, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    pts = torch.randn(batch, cfg.window + 1, cfg.j_in, 3, generator=g)
    d = torch.cdist(pts, pts)
    if cfg.geometric_feedback:
        past = torch.randn(batch, cfg.window, cfg.j_out, 3, generator=g)
    else:
        past = d[:, :-1]
    return past, d[:, -1]


@pytest.mark.parametrize("variant", ["WiP-H", "WiP-SI", "WiP-Geo"])
def test_output_shapes(variant):
    cfg = ModelConfig(variant=variant, **TINY)
    model = WiPModel(cfg).eval()
    pose, dist = model(*inputs(cfg))
    assert pose.shape == (2, cfg.j_out, 3)
    assert dist.shape == (2, cfg.j_out, cfg.j_out)
    assert torch.equal(dist, dist.transpose(1, 2))
    assert torch.all(torch.diagonal(dist, dim1=1, dim2=2) == 0)


def test_sizes_follow_config():
    cfg = ModelConfig()
    assert (cfg.j_in, cfg.j_out, cfg.d_model) == (9, 27, 288)
    assert ModelConfig(variant="WiP-SI").j_out == 9


def test_unbatched_matches_batched():
    cfg = ModelConfig(**TINY)
    model = WiPModel(cfg).eval()
    past, cur = inputs(cfg, batch=1)
    pose_b, _ = model(past, cur)
    pose_u, _ = model(past[0], cur[0])
    torch.testing.assert_close(pose_u, pose_b[0])


def test_window_mismatch_rejected():
    cfg = ModelConfig(**TINY)
    past, cur = inputs(cfg)
    with pytest.raises(InvalidInputError):
        WiPModel(cfg)(past[:, 1:], cur)


def test_geo_toggle_only_changes_feedback_embedding():
    base = WiPModel(ModelConfig(**TINY)).state_dict()
    geo = WiPModel(ModelConfig(variant="WiP-Geo", **TINY)).state_dict()
    rest = lambda sd: {k: v.shape for k, v in sd.items() if not k.startswith("feedback_embed.")}
    assert rest(base) == rest(geo)
    fb = lambda sd: [v.shape for k, v in sd.items() if k.startswith("feedback_embed.")]
    assert fb(base) != fb(geo)


def test_pwd_embedding_is_row_local():
    emb = PWDEmbedding(5, 4)
    d = torch.rand(5, 5)
    base = emb(d)
    d2 = d.clone()
    d2[2] += 1.0
    changed = (emb(d2) - base).abs().sum(-1) > 0
    assert changed.tolist() == [False, False, True, False, False]
    # negative measurements are clamped
    torch.testing.assert_close(emb(d - 10.0), emb(torch.zeros(5, 5)))


def test_gate_zero_gives_residual_only():
    gca = GatedCrossAttention(4, 8, 2)
    h, m = torch.randn(2, 3, 32), torch.randn(2, 4, 8)
    gca.gate_override = 0.0
    torch.testing.assert_close(gca(m, h), h)
    gca.gate_override = 1.0
    torch.testing.assert_close(gca(m, h), gca.attend(m, h) + h)


def test_cross_attention_modes_shapes():
    for mode in ("measurement_qk", "decoder_query"):
        gca = GatedCrossAttention(4, 8, 2, mode=mode)
        assert gca(torch.randn(2, 4, 8), torch.randn(2, 3, 32)).shape == (2, 3, 32)


def test_flatten_round_trip():
    h = torch.randn(2, 5, 27 * 4)
    x = flatten_joints(h, 27)
    assert x.shape == (2, 5 * 27, 4)
    torch.testing.assert_close(x[:, 27 + 3], h[:, 1, 12:16])
    torch.testing.assert_close(unflatten_joints(x, 5), h)


def test_stj_fresh_layer_is_identity_and_weights_normalized():
    stj = STJSelfAttention(9, 27, 8, 2)
    h = torch.randn(2, 5, 72)
    out, weights = stj(h, need_weights=True)
    torch.testing.assert_close(out, h)
    assert weights.shape == (2, 2, 5 * 27, 5 * 27)
    torch.testing.assert_close(weights.sum(-1), torch.ones(2, 2, 135))


def test_stj_weight_path_matches_fused_path():
    stj = STJSelfAttention(9, 27, 8, 2).eval()
    torch.nn.init.normal_(stj.out.weight)
    h = torch.randn(2, 5, 72)
    fast, _ = stj(h)
    slow, _ = stj(h, need_weights=True)
    torch.testing.assert_close(fast, slow, atol=1e-5, rtol=1e-5)


def test_add_stj_sa_keeps_outputs():
    cfg = ModelConfig(**TINY)
    model = WiPModel(cfg).eval()
    past, cur = inputs(cfg)
    before, _ = model(past, cur)
    model.add_stj_sa()
    after, _, maps = model(past, cur, return_attention=True)
    torch.testing.assert_close(after, before)
    assert len(maps) == cfg.num_blocks
    assert maps[0].shape[-1] == (cfg.window + 1) * cfg.j_out
    with pytest.raises(InvalidInputError):
        model.add_stj_sa()


def test_causal_mask_isolates_earlier_tokens():
    cfg = ModelConfig(**TINY)
    model = WiPModel(cfg).eval()
    block = model.blocks[0]
    h = torch.randn(1, cfg.window + 1, cfg.d_model)
    m = torch.randn(1, cfg.j_in, cfg.channels)
    out, _ = block(h, m, model.causal_mask)
    h2 = h.clone()
    h2[:, -1] += 1.0
    out2, _ = block(h2, m, model.causal_mask)
    torch.testing.assert_close(out[:, :-1], out2[:, :-1])


def test_stage2_trainable_fraction_desk_config():
    model = WiPModel(ModelConfig())
    model.add_stj_sa()
    names = dict(model.named_parameters())
    trainable = sum(p.numel() for n, p in names.items() if is_stage2_trainable(n))
    assert trainable / model.parameter_count() <= 0.10
    assert any(".gca." in n for n in names) and any(".stj." in n for n in names)


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(variant="WiP-Geo", **TINY)
    model = WiPModel(cfg).eval()
    path = tmp_path / "m.pt"
    save_checkpoint(model, path, "stage1", {"note": "x"})
    back, payload = load_checkpoint(path)
    assert back.cfg.variant == "WiP-Geo" and payload["meta"] == {"note": "x"}
    past, cur = inputs(cfg)
    torch.testing.assert_close(back(past, cur)[0], model(past, cur)[0])


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.pt"
    save_checkpoint(WiPModel(ModelConfig(**TINY)), path, "stage1")
    with pytest.raises(InvalidInputError):
        load_checkpoint(path, ModelConfig(**{**TINY, "channels": 16}))


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.pt"
    torch.save({"weights": np.zeros(3)}, path)
    with pytest.raises(InvalidInputError):
        load_checkpoint(path)


def test_invalid_config():
    with pytest.raises(InvalidInputError):
        ModelConfig(variant="WiP-X")
    with pytest.raises(InvalidInputError):
        ModelConfig(channels=30, heads=4)
