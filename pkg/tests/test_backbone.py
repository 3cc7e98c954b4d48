import numpy as np
import pytest
import torch

from _oracles import attention_ref, directional_gradient_check, gate_ref, rel_index_ref
from sbvqa.backbone import (
    BackboneConfig,
    FragmentBackbone,
    GRPBBlock,
    bias_table_size,
    build_gate_mask,
    gate_masks,
    grpb_attention,
    relative_position_index,
    shift_region_mask,
)
from sbvqa.errors import BadConfig, ShapeMismatch
from sbvqa.head import DualBranchHead, HeadConfig


@pytest.mark.parametrize("window", [(2, 2, 2), (1, 3, 4), (3, 2, 1)])
def test_relative_index_matches_enumeration(window):
    np.testing.assert_array_equal(relative_position_index(window).numpy(), rel_index_ref(window))
    assert relative_position_index(window).max() < bias_table_size(window)


def test_clipped_window_uses_full_table_layout():
    np.testing.assert_array_equal(relative_position_index((1, 2, 2), (2, 4, 4)).numpy(),
                                  rel_index_ref((1, 2, 2), (2, 4, 4)))


def test_gate_count_single_window():
    # 4x4 tokens in 2x2 patches: 4 patches of 4 tokens, 4*4 same-patch pairs each
    g = build_gate_mask((1, 4, 4), (1, 2, 2))
    assert g.shape == (16, 16)
    assert int(g.sum()) == 64
    assert torch.equal(g, g.T)


@pytest.mark.parametrize("size,window,tpp,shift", [
    ((2, 8, 8), (2, 4, 4), (1 << 30, 2, 2), (0, 0, 0)),
    ((2, 8, 8), (2, 4, 4), (1 << 30, 2, 2), (1, 2, 2)),
    ((4, 6, 6), (2, 3, 3), (1 << 30, 2, 2), (1, 1, 1)),
    ((2, 12, 12), (1, 4, 4), (1 << 30, 3, 3), (0, 2, 2)),
])
def test_gate_masks_match_enumeration(size, window, tpp, shift):
    np.testing.assert_array_equal(gate_masks(size, window, tpp, shift).numpy(), gate_ref(size, window, tpp, shift))


def test_gate_mask_rejects_nonpositive():
    with pytest.raises(BadConfig):
        build_gate_mask((1, 0, 4), (1, 2, 2))


def test_shift_mask_matches_region_enumeration():
    size, window, shift = (4, 6, 6), (2, 3, 3), (1, 1, 1)
    m = shift_region_mask(size, window, shift)
    assert set(m.unique().tolist()) <= {0.0, -100.0}

    def region(p, s, w, sh):
        return 0 if p < s - w else (1 if p < s - sh else 2)

    labels = [[[(region(t, 4, 2, 1), region(h, 6, 3, 1), region(x, 6, 3, 1)) for x in range(6)]
               for h in range(6)] for t in range(4)]
    k = 0
    for t0 in range(0, 4, 2):
        for h0 in range(0, 6, 3):
            for w0 in range(0, 6, 3):
                toks = [labels[t0 + a][h0 + b][w0 + c] for a in range(2) for b in range(3) for c in range(3)]
                ref = np.array([[0.0 if u == v else -100.0 for v in toks] for u in toks])
                np.testing.assert_array_equal(m[k].numpy(), ref)
                k += 1
    assert torch.all(m[0] == 0)


def _attention_inputs(nw=3, n=8, c=6, heads=2, window=(2, 2, 2), seed=0):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    return dict(
        x=r(nw, n, c), qkv_weight=r(3 * c, c) * 0.5, qkv_bias=r(3 * c) * 0.1,
        proj_weight=r(c, c) * 0.5, proj_bias=r(c) * 0.1,
        bias_intra=r(bias_table_size(window), heads), bias_cross=r(bias_table_size(window), heads),
        rel_index=relative_position_index(window), num_heads=heads,
    )


def test_attention_matches_loop_reference():
    inp = _attention_inputs()
    gate = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(1)) > 0.5
    mask = torch.where(torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(2)) > 0.8, -100.0, 0.0).double()
    out = grpb_attention(gate=gate, attn_mask=mask, **inp)

    idx = inp["rel_index"].numpy()
    intra = inp["bias_intra"].numpy()[idx].transpose(2, 0, 1)
    cross = inp["bias_cross"].numpy()[idx].transpose(2, 0, 1)
    bias = np.where(gate.numpy()[:, None], intra[None], cross[None])
    ref = attention_ref(inp["x"].numpy(), inp["qkv_weight"].numpy(), inp["qkv_bias"].numpy(),
                        inp["proj_weight"].numpy(), inp["proj_bias"].numpy(), bias, 2, mask.numpy())
    np.testing.assert_allclose(out.numpy(), ref, rtol=0, atol=1e-12)


def test_tied_tables_equal_ungated():
    inp = _attention_inputs()
    inp["bias_cross"] = inp["bias_intra"].clone()
    gate = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(4)) > 0.5
    out = grpb_attention(gate=gate, **inp)
    idx = inp["rel_index"].numpy()
    table = inp["bias_intra"].numpy()[idx].transpose(2, 0, 1)
    ref = attention_ref(inp["x"].numpy(), inp["qkv_weight"].numpy(), inp["qkv_bias"].numpy(),
                        inp["proj_weight"].numpy(), inp["proj_bias"].numpy(), np.broadcast_to(table, (3,) + table.shape), 2)
    assert np.max(np.abs(out.numpy() - ref)) <= 1e-12


def test_cross_table_ignored_inside_one_patch():
    inp = _attention_inputs()
    gate = torch.zeros(3, 8, 8, dtype=torch.bool)
    gate[0] = True
    gate[2] = True
    before = grpb_attention(gate=gate, **inp)
    inp["bias_cross"] = inp["bias_cross"] + 5.0 * torch.randn_like(inp["bias_cross"])
    after = grpb_attention(gate=gate, **inp)
    assert torch.equal(before[0], after[0]) and torch.equal(before[2], after[2])
    assert not torch.equal(before[1], after[1])


def test_attention_shape_errors():
    inp = _attention_inputs()
    with pytest.raises(ShapeMismatch):
        grpb_attention(gate=torch.ones(9, 9, dtype=torch.bool), **inp)
    inp["num_heads"] = 4
    with pytest.raises(ShapeMismatch):
        grpb_attention(gate=torch.ones(8, 8, dtype=torch.bool), **inp)


def test_block_with_window_inside_patch_ignores_cross_table(float64):
    torch.manual_seed(0)
    block = GRPBBlock(8, 2, (2, 2, 2), shifted=False)
    x = torch.randn(1, 2, 4, 4, 8)
    before = block(x, (1 << 30, 4, 4))
    with torch.no_grad():
        block.attn.bias_cross.add_(torch.randn_like(block.attn.bias_cross))
    assert torch.equal(before, block(x, (1 << 30, 4, 4)))


def test_shifted_block_runs_on_padded_grid(float64):
    torch.manual_seed(0)
    block = GRPBBlock(8, 2, (2, 3, 3), shifted=True)
    y = block(torch.randn(2, 3, 5, 5, 8), (1 << 30, 1, 1))
    assert y.shape == (2, 3, 5, 5, 8) and torch.isfinite(y).all()


def _tiny_cfg(**kw):
    base = dict(window=(2, 2, 2), depths=(1, 1), embed_dims=(8, 16), heads=(1, 2))
    base.update(kw)
    return BackboneConfig(**base)


def test_backbone_output_shape():
    torch.manual_seed(0)
    bb = FragmentBackbone(_tiny_cfg())
    feats, blocks = bb(torch.rand(2, 4, 16, 16, 3), grid_count=2, return_blocks=True)
    # temporal stride 2; 16 px / 8 px-per-token -> 2x2 tokens = one per patch
    assert feats.shape == (2, 2, 2, 2, 16)
    assert len(blocks) == 2


def test_backbone_pools_each_patch_separately():
    torch.manual_seed(0)
    bb = FragmentBackbone(_tiny_cfg(depths=(1,), embed_dims=(8,), heads=(2,))).eval()
    x = torch.rand(1, 4, 16, 16, 3)
    base = bb(x, 2)
    x2 = x.clone()
    x2[:, :, :8, :8] = torch.rand(4, 8, 8, 3)
    # one unshifted block whose 2x2-token windows coincide with the mini-patches:
    # only patch (0, 0) sees the change
    out = bb(x2, 2)
    assert not torch.allclose(out[:, :, 0, 0], base[:, :, 0, 0])
    for gy, gx in [(0, 1), (1, 0), (1, 1)]:
        torch.testing.assert_close(out[:, :, gy, gx], base[:, :, gy, gx], rtol=0, atol=1e-6)


def test_backbone_rejects_bad_inputs():
    bb = FragmentBackbone(_tiny_cfg())
    with pytest.raises(ShapeMismatch):
        bb(torch.rand(1, 4, 16, 12, 3), 2)
    with pytest.raises(BadConfig):
        bb(torch.rand(1, 4, 12, 12, 3), 2)  # 6 px patches, 4 px tokens at stage 0


def test_config_roundtrip_and_validation():
    cfg = _tiny_cfg()
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.out_channels == 16 and cfg.spatial_reduction == 8
    with pytest.raises(BadConfig):
        BackboneConfig(depths=(1, 1), embed_dims=(8,), heads=(1, 2)).validate()
    fast = BackboneConfig.faster_variant()
    assert fast.variant_tag == "faster" and fast.spatial_reduction == 16


def test_default_config():
    cfg = BackboneConfig()
    assert cfg.window == (8, 7, 7)
    assert cfg.out_channels == 768


def test_gradients_match_finite_differences(float64):
    torch.manual_seed(0)
    cfg = _tiny_cfg(depths=(1,), embed_dims=(8,), heads=(2,))
    bb = FragmentBackbone(cfg)
    head = DualBranchHead(HeadConfig(8, 4))
    x = torch.rand(2, 4, 16, 16, 3)
    w = torch.tensor([0.7, -1.3])
    params = [p for p in list(bb.parameters()) + list(head.parameters())]
    err = directional_gradient_check(lambda: (head(bb(x, 2)) * w).sum(), params, n_dirs=50)
    assert err < 1e-4
