import numpy as np
import pytest
import torch

import oracles as O
from conftest import SMALL_ENC, seeded, state_np
from stvlp.encoders import (
    EncoderConfig,
    ImageEncoder,
    TextEncoder,
    ViewRoutedBlock,
    encode_image,
    encode_text,
    patchify,
)


def make_image_encoder(seed=0):
    torch.manual_seed(seed)
    return ImageEncoder(SMALL_ENC).double()


def make_text_encoder(seed=0):
    torch.manual_seed(seed)
    return TextEncoder(SMALL_ENC).double()


# --- config validation ----------------------------------------------------------


def test_config_rejects_bad_patch_size():
    with pytest.raises(ValueError, match="not divisible by patch_size"):
        EncoderConfig(image_size=30, patch_size=8)


def test_config_rejects_bad_heads():
    with pytest.raises(ValueError, match="n_heads"):
        EncoderConfig(embed_dim=30, n_heads=4)


def test_config_derived_sizes():
    cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=64)
    assert cfg.n_patches == 16
    assert cfg.hidden == 256
    assert EncoderConfig(ffn_hidden=100).hidden == 100


# --- patchify -------------------------------------------------------------------


def test_patchify_matches_loop_reference():
    img = seeded(2, 16, 16, seed=1)
    got = patchify(img, 8)
    assert got.shape == (2, 4, 64)
    for b in range(2):
        ref = O.patchify_ref(img[b].numpy(), 8)
        np.testing.assert_array_equal(got[b].numpy(), ref)


def test_patchify_row_major_order():
    img = torch.zeros(1, 4, 4, dtype=torch.float64)
    img[0, 0, 2] = 1.0  # top-right 2x2 patch
    patches = patchify(img, 2)
    assert patches[0, 1].sum() == 1.0
    assert patches[0, 0].sum() == 0.0


# --- forward parity with the scalar oracle ---------------------------------------


def test_image_encoder_matches_oracle():
    enc = make_image_encoder(seed=3)
    frontal = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    lateral = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    with torch.no_grad():
        g, patches = enc(frontal, lateral)
    g_ref, p_ref = O.image_encoder_ref(
        frontal[0].numpy(), lateral[0].numpy(), state_np(enc),
        SMALL_ENC.patch_size, SMALL_ENC.n_heads, SMALL_ENC.n_blocks,
    )
    np.testing.assert_allclose(g[0].numpy(), g_ref, atol=1e-12)
    np.testing.assert_allclose(patches[0].numpy(), p_ref, atol=1e-12)


def test_text_encoder_matches_oracle():
    enc = make_text_encoder(seed=6)
    tokens = torch.tensor([[2, 4, 7, 9, 12, 3, 0, 0, 0, 0, 0, 0]])
    pad = torch.tensor([[False] * 6 + [True] * 6])
    with torch.no_grad():
        g, feats = enc(tokens, pad)
    g_ref, f_ref = O.text_encoder_ref(
        tokens[0].numpy(), pad[0].numpy(), state_np(enc),
        SMALL_ENC.n_heads, SMALL_ENC.n_text_blocks,
    )
    np.testing.assert_allclose(g[0].numpy(), g_ref, atol=1e-12)
    np.testing.assert_allclose(feats[0].numpy(), f_ref, atol=1e-12)


# --- embedding-stage invariants ----------------------------------------------


def test_zero_lateral_rows_are_pos_plus_bias():
    enc = make_image_encoder()
    frontal = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    lateral = torch.zeros(1, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        h = enc.embed_views(frontal, lateral)
    n_p = SMALL_ENC.n_patches
    expected = (enc.pos[1:] + enc.patch_proj.bias).detach()
    np.testing.assert_allclose(h[0, n_p + 1 :].numpy(), expected.numpy(), atol=1e-15)


def test_identical_views_give_identical_rows():
    enc = make_image_encoder()
    img = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    with torch.no_grad():
        h = enc.embed_views(img, img)
    n_p = SMALL_ENC.n_patches
    np.testing.assert_array_equal(h[0, 1 : n_p + 1].numpy(), h[0, n_p + 1 :].numpy())


def test_positional_table_is_shared_across_views():
    # moving a frontal patch's content to the same patch slot of the lateral
    # view must produce the same embedded row (same positional offset)
    enc = make_image_encoder()
    img = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(8), dtype=torch.float64)
    zero = torch.zeros_like(img)
    with torch.no_grad():
        as_frontal = enc.embed_views(img, zero)
        as_lateral = enc.embed_views(zero, img)
    n_p = SMALL_ENC.n_patches
    np.testing.assert_allclose(
        as_frontal[0, 1 : n_p + 1].numpy(),
        as_lateral[0, n_p + 1 :].numpy(),
        atol=1e-15,
    )


# --- expert routing -------------------------------------------------------------


def test_routing_isolation_finite_difference():
    # with attention bypassed, perturbing the lateral expert must leave the
    # front rows untouched (and vice versa)
    torch.manual_seed(9)
    block = ViewRoutedBlock(16, 4, 32).double()
    h = seeded(1, 7, 16, seed=10)
    n_front = 4
    eps = 1e-3
    with torch.no_grad():
        base = block(h, n_front, skip_attention=True)
        block.lateral_ffn.fc1.weight[0, 0] += eps
        bumped_lat = block(h, n_front, skip_attention=True)
        block.lateral_ffn.fc1.weight[0, 0] -= eps
        block.front_ffn.fc1.weight[0, 0] += eps
        bumped_front = block(h, n_front, skip_attention=True)
    front_shift = (bumped_lat - base)[0, :n_front].abs().max()
    lateral_shift = (bumped_front - base)[0, n_front:].abs().max()
    assert float(front_shift) < 1e-10
    assert float(lateral_shift) < 1e-10
    # and the perturbations did land somewhere
    assert float((bumped_lat - base)[0, n_front:].abs().max()) > 0
    assert float((bumped_front - base)[0, :n_front].abs().max()) > 0


def test_routing_isolation_autograd():
    torch.manual_seed(11)
    block = ViewRoutedBlock(16, 4, 32).double()
    h = seeded(1, 7, 16, seed=12)
    out = block(h, 4, skip_attention=True)
    front_sum = out[0, :4].sum()
    grads = torch.autograd.grad(front_sum, list(block.lateral_ffn.parameters()),
                                allow_unused=True, retain_graph=True)
    assert all(g is None or float(g.abs().max()) == 0.0 for g in grads)
    lat_sum = out[0, 4:].sum()
    grads = torch.autograd.grad(lat_sum, list(block.front_ffn.parameters()), allow_unused=True)
    assert all(g is None or float(g.abs().max()) == 0.0 for g in grads)


def test_attention_couples_views():
    # without the bypass, lateral pixels must reach the class token
    enc = make_image_encoder(seed=13)
    gen = torch.Generator().manual_seed(14)
    frontal = torch.rand(1, 16, 16, generator=gen, dtype=torch.float64)
    lat_a = torch.rand(1, 16, 16, generator=gen, dtype=torch.float64)
    lat_b = torch.rand(1, 16, 16, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        ga, _ = enc(frontal, lat_a)
        gb, _ = enc(frontal, lat_b)
    assert float((ga - gb).abs().max()) > 1e-6


def test_block_parity_with_oracle_when_skipping_attention():
    torch.manual_seed(15)
    block = ViewRoutedBlock(16, 4, 32).double()
    h = seeded(1, 7, 16, seed=16)
    with torch.no_grad():
        out = block(h, 3, skip_attention=True)
    ref = O.view_routed_block_ref(
        h[0].numpy(), {f"blocks.0.{k}": v.detach().numpy() for k, v in block.state_dict().items()},
        "blocks.0.", 4, n_front=3, skip_attention=True,
    )
    np.testing.assert_allclose(out[0].numpy(), ref, atol=1e-13)


# --- text encoder behavior --------------------------------------------------------


def test_text_encoder_rejects_out_of_range_ids():
    enc = make_text_encoder()
    tokens = torch.tensor([[2, 99, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]])
    pad = torch.zeros(1, 12, dtype=torch.bool)
    with pytest.raises(ValueError, match="out of range"):
        enc(tokens, pad)


def test_padded_keys_do_not_leak():
    enc = make_text_encoder(seed=17)
    tokens_a = torch.tensor([[2, 4, 7, 0, 0, 0, 0, 0, 0, 0, 0, 0]])
    tokens_b = tokens_a.clone()
    tokens_b[0, 5] = 9  # different id at a padded slot
    pad = torch.tensor([[False, False, False] + [True] * 9])
    with torch.no_grad():
        ga, fa = enc(tokens_a, pad)
        gb, fb = enc(tokens_b, pad)
    np.testing.assert_array_equal(ga.numpy(), gb.numpy())
    np.testing.assert_array_equal(fa[0, :3].numpy(), fb[0, :3].numpy())


# --- study-level wrappers ----------------------------------------------------------


def test_encode_image_trims_missing_lateral():
    enc = make_image_encoder()
    gen = torch.Generator().manual_seed(18)
    frontal = torch.rand(16, 16, generator=gen, dtype=torch.float64)
    lateral = torch.rand(16, 16, generator=gen, dtype=torch.float64)
    with_lat = encode_image(enc, frontal, lateral, has_lateral=True)
    without = encode_image(enc, frontal, torch.zeros_like(frontal), has_lateral=False)
    n_p = SMALL_ENC.n_patches
    assert with_lat.patches.shape == (2 * n_p, SMALL_ENC.proj_dim)
    assert without.patches.shape == (n_p, SMALL_ENC.proj_dim)


def test_encode_text_shapes():
    enc = make_text_encoder()
    tokens = torch.tensor([2, 4, 7, 0, 0, 0, 0, 0, 0, 0, 0, 0])
    pad = torch.tensor([False, False, False] + [True] * 9)
    out = encode_text(enc, tokens, pad)
    assert out.global_vec.shape == (SMALL_ENC.proj_dim,)
    assert out.tokens.shape == (12, SMALL_ENC.proj_dim)
    assert out.pad_mask.tolist() == pad.tolist()
