import math

import numpy as np
import pytest
import torch

from slotvsg.encoder import PatchEncoder, encode_frame, load_features, save_features
from slotvsg.heads import FFN, MaskDecoder, MaskHead, ObjectHead, RelationHead
from slotvsg.slots import Decomposer, SlotAttention, normalize_attention
from slotvsg.synthgen import WorldConfig, generate_world



@pytest.fixture(autouse=True)
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# ---------------------------------------------------------------- encoder


def test_encoder_shape_contract():
    enc = PatchEncoder((64, 64), stride=8, dim=64)
    out = encode_frame(np.zeros((64, 64, 3), np.uint8), enc)
    assert out.shape == (8, 8, 64)
    assert torch.isfinite(out).all()


def test_encoder_rejects_non_divisible_size():
    with pytest.raises(ValueError):
        PatchEncoder((60, 64), stride=8)
    enc = PatchEncoder((64, 64), stride=8)
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 60, 64, 3))


def test_zero_image_equals_position_through_network():
    torch.manual_seed(0)
    enc = PatchEncoder((32, 32), stride=8, dim=16)
    x = enc.patch.bias + enc.pos
    for b in enc.blocks:
        x = b(x)
    expected = enc.norm(x)
    assert torch.allclose(enc(torch.zeros(32, 32, 3)), expected, atol=1e-12)


def test_changing_one_patch_changes_only_its_token():
    torch.manual_seed(1)
    enc = PatchEncoder((32, 32), stride=8, dim=16)
    a = torch.rand(32, 32, 3)
    b = a.clone()
    b[8:16, 16:24] = torch.rand(8, 8, 3)
    diff = (enc(a) - enc(b)).abs().sum(-1)
    assert diff[1, 2] > 0
    diff[1, 2] = 0
    assert diff.max() == 0


def test_identical_patches_at_different_positions_differ():
    enc = PatchEncoder((32, 32), stride=8, dim=16)
    out = enc(torch.full((32, 32, 3), 0.5))
    flat = out.reshape(-1, 16)
    d = torch.cdist(flat, flat)
    assert (d + torch.eye(len(flat))).min() > 0


def test_encoder_deterministic():
    enc = PatchEncoder((32, 32), stride=8, dim=16)
    x = torch.rand(2, 32, 32, 3)
    assert torch.equal(enc(x), enc(x))


def test_feature_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 4, 8))
    save_features(tmp_path / "v", arr)
    back = load_features(tmp_path / "v.npy")
    assert back.dtype == np.dtype("<f4") and back.shape == (3, 4, 4, 8)
    assert np.allclose(back, arr, atol=1e-6)
    assert (tmp_path / "v.npy.json").exists()


def test_feature_file_rejects_bad_arrays(tmp_path):
    with pytest.raises(ValueError):
        save_features(tmp_path / "x.npy", np.zeros((4, 4, 8)))
    bad = np.zeros((1, 2, 2, 2), "<f4")
    bad[0, 0, 0, 0] = np.nan
    np.save(tmp_path / "nan.npy", bad)
    with pytest.raises(ValueError):
        load_features(tmp_path / "nan.npy")
    np.save(tmp_path / "f8.npy", np.zeros((1, 2, 2, 2)))
    with pytest.raises(ValueError):
        load_features(tmp_path / "f8.npy")


# ---------------------------------------------------------------- slots


def test_attention_hand_case():
    maps = normalize_attention(torch.tensor([[[0.0, math.log(2)], [0.0, 0.0]]]))
    assert torch.allclose(maps.attn[0, :, 0], torch.tensor([0.5, 0.5]), atol=1e-12)
    assert torch.allclose(maps.attn[0, :, 1], torch.tensor([2 / 3, 1 / 3]), atol=1e-12)
    assert torch.allclose(maps.weights[0, 0], torch.tensor([3 / 7, 4 / 7]), atol=1e-12)
    assert torch.allclose(maps.weights[0, 1], torch.tensor([3 / 5, 2 / 5]), atol=1e-12)


def test_zero_queries_give_uniform_attention():
    torch.manual_seed(0)
    sa = SlotAttention(5, 8, 6, iters=1)
    torch.nn.init.zeros_(sa.to_q.weight)
    feats = torch.randn(1, 12, 6)
    _, maps = sa(feats)
    assert torch.allclose(maps.attn, torch.full_like(maps.attn, 1 / 5))
    assert torch.allclose(maps.weights, torch.full_like(maps.weights, 1 / 12))
    v = sa.to_v(sa.norm_feats(feats))
    upd = torch.einsum("bml,bld->bmd", maps.weights, v)
    assert torch.allclose(upd, v.mean(1, keepdim=True).expand_as(upd))


@pytest.mark.parametrize("seed", range(5))
def test_normalization_holds_after_every_iteration(seed):
    torch.manual_seed(seed)
    sa = SlotAttention(7, 16, 12, iters=3)
    _, history = sa(torch.randn(2, 20, 12), return_all=True)
    assert len(history) == 3
    for maps in history:
        assert torch.allclose(maps.attn.sum(1), torch.ones(2, 20), atol=1e-6)
        assert torch.allclose(maps.weights.sum(2), torch.ones(2, 7), atol=1e-6)


def test_permutation_equivariance():
    torch.manual_seed(3)
    sa = SlotAttention(6, 16, 12)
    feats = torch.randn(1, 30, 12)
    init = torch.randn(1, 6, 16)
    perm = torch.randperm(6)
    s1, m1 = sa(feats, init)
    s2, m2 = sa(feats, init[:, perm])
    assert torch.allclose(s1[:, perm], s2, atol=1e-10)
    assert torch.allclose(m1.attn[:, perm], m2.attn, atol=1e-10)


def test_competition_monotonicity():
    torch.manual_seed(0)
    logits = torch.randn(1, 5, 9)
    base = normalize_attention(logits).attn
    bumped = logits.clone()
    bumped[0, 2, 4] += 0.7
    after = normalize_attention(bumped).attn
    others = [i for i in range(5) if i != 2]
    assert (after[0, others, 4] < base[0, others, 4]).all()
    assert after[0, 2, 4] > base[0, 2, 4]


def test_slot_attention_errors():
    sa = SlotAttention(3, 8, 4)
    with pytest.raises(FloatingPointError):
        sa(torch.full((1, 5, 4), float("nan")))
    with pytest.raises(ValueError):
        sa(torch.zeros(1, 0, 4))
    with pytest.raises(ValueError):
        SlotAttention(3, 8, 4, iters=0)


def test_init_modes():
    sa = SlotAttention(3, 8, 4)
    assert torch.equal(sa.init_slots(1), sa.init_slots(1))
    assert torch.equal(sa.init_slots(1, "carry_previous", None), sa.init_slots(1))
    prev = torch.randn(1, 3, 8)
    assert sa.init_slots(1, "carry_previous", prev) is prev
    with pytest.raises(ValueError):
        sa.init_slots(1, "carry_previous", torch.randn(1, 4, 8))
    with pytest.raises(ValueError):
        sa.init_slots(1, "bogus")


def test_decomposer_shapes_dsgg_configuration():
    dec = Decomposer(40, 24, 16, 12)
    s, z, sm, zm = dec(torch.randn(1, 8, 8, 12))
    assert s.shape == (1, 40, 16) and z.shape == (1, 24, 16)
    assert sm.attn.shape == (1, 40, 64) and zm.attn.shape == (1, 24, 64)


def test_learned_init_same_start_different_frames():
    torch.manual_seed(0)
    dec = Decomposer(4, 2, 8, 6)
    feats = torch.randn(2, 4, 4, 6)
    s, _, _, _ = dec.decompose_video(feats, "learned")
    assert not torch.allclose(s[0], s[1])


def test_carry_previous_on_static_video_stays_bounded():
    torch.manual_seed(0)
    frames, _ = generate_world(WorldConfig(seed=2, velocity_range=(0.0, 0.0), num_frames=12))
    enc = PatchEncoder((64, 64), stride=8, dim=16)
    dec = Decomposer(6, 3, 16, 16)
    with torch.no_grad():
        feats = enc(torch.as_tensor(frames, dtype=torch.float64) / 255)
        s, _, _, _ = dec.decompose_video(feats, "carry_previous")
    drift = (s[1:] - s[:-1]).norm(dim=(1, 2))
    assert torch.isfinite(drift).all()
    assert drift[-4:].max() <= drift[:4].max() + 1e-9


def test_carry_mode_threads_slots():
    torch.manual_seed(0)
    dec = Decomposer(4, 2, 8, 6)
    feats = torch.randn(3, 4, 4, 6)
    s, z, _, _ = dec.decompose_video(feats, "carry_previous")
    s1, z1, _, _ = dec(feats[1:2], "carry_previous", (s[0:1], z[0:1]))
    assert torch.allclose(s1, s[1:2]) and torch.allclose(z1, z[1:2])


# ---------------------------------------------------------------- heads


def test_object_head_shapes_and_ranges():
    head = ObjectHead(16, 36)
    out = head(torch.randn(40, 16) * 10)
    assert out.logits.shape == (40, 37) and out.boxes.shape == (40, 4)
    assert (out.boxes > 0).all() and (out.boxes < 1).all()
    zero = head(torch.zeros(5, 16))
    assert torch.equal(zero.logits, zero.logits[:1].expand(5, -1))


def test_relation_head_shapes_and_identical_rows():
    head = RelationHead(16, 25)
    z = torch.randn(1, 16).expand(24, -1)
    out = head(z)
    assert out.shape == (24, 26)
    assert torch.equal(out, out[:1].expand(24, -1))
    assert torch.allclose(out.softmax(-1).sum(-1), torch.ones(24), atol=1e-6)


def test_heads_are_slot_permutation_equivariant():
    head = ObjectHead(8, 3)
    s = torch.randn(6, 8)
    perm = torch.randperm(6)
    assert torch.allclose(head(s[perm]).logits, head(s).logits[perm])


def test_decoder_shape_and_stride_check():
    dec = MaskDecoder(64, 16, (2, 2, 2, 1))
    out = dec(torch.randn(1, 8, 8, 64), (64, 64))
    assert out.shape == (1, 64, 64, 16)
    with pytest.raises(ValueError):
        dec(torch.randn(1, 8, 8, 64), (128, 128))


def test_decoder_zero_input_is_bias_field():
    dec = MaskDecoder(4, 3, (2, 2, 2, 1))
    out = dec(torch.zeros(1, 2, 2, 4))
    assert torch.isfinite(out).all()
    x = torch.zeros(1, 4, 2, 2)
    for layer in dec.net:
        x = layer(x)
    assert torch.allclose(out, x.permute(0, 2, 3, 1))


def test_mask_inner_product_one_hot():
    head = MaskHead(4, 3)
    with torch.no_grad():
        head.proj.weight.zero_()
        head.proj.weight[1, 0] = 1.0
    slots = torch.zeros(1, 1, 4)
    slots[0, 0, 0] = 1.0
    pixels = torch.zeros(1, 5, 5, 3)
    pixels[0, 2, 3, 1] = 1.0
    pixels[0, 0, 0, 2] = 1.0
    inner = head.inner(slots, pixels)[0, 0]
    expected = torch.zeros(5, 5)
    expected[2, 3] = 1.0
    assert torch.equal(inner, expected)


def test_mask_inner_products_hand_case():
    head = MaskHead(2, 2)
    with torch.no_grad():
        head.proj.weight.copy_(torch.eye(2))
    slots = torch.tensor([[[1.0, 2.0], [-1.0, 0.5]]])
    pixels = torch.arange(18, dtype=torch.float64).reshape(1, 3, 3, 2) / 10
    inner = head.inner(slots, pixels)[0].detach()
    for n in range(2):
        for i in range(3):
            for j in range(3):
                hand = slots[0, n, 0] * pixels[0, i, j, 0] + slots[0, n, 1] * pixels[0, i, j, 1]
                assert math.isclose(float(inner[n, i, j]), float(hand), abs_tol=1e-12)


def test_mask_head_pvsg_shape_and_range():
    head = MaskHead(8, 4)
    logits = head(torch.randn(1, 96, 8), torch.randn(1, 64, 64, 4))
    assert logits.shape == (1, 96, 64, 64)
    p = logits.sigmoid()
    assert torch.isfinite(p).all() and (p > 0).all() and (p < 1).all()


def test_ffn_structure():
    f = FFN(8, 3)
    assert [type(m).__name__ for m in f] == ["Linear", "ReLU", "Linear"]
    assert f[0].out_features == 8
