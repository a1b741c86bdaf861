import math
from fractions import Fraction

import numpy as np
import pytest

from ophthmae import tensor as T
from ophthmae.mae import (MAEModel, MaskPlan, PretrainSchedule, keep_count, log_line, masked_recon_loss,
                          pretrain, random_mask, reconstruct_visualize)
from ophthmae.tensor import Tensor, grad_check
from ophthmae.vit import ViTConfig, ViTEncoder, patchify, sincos_pos_embed, unpatchify
from synthetic import fundus_like, scale_params

TINY = ViTConfig(image_size=16, patch_size=4, in_channels=3, enc_depth=2, enc_dim=16, enc_heads=2,
                 dec_depth=1, dec_dim=8, dec_heads=2)


def test_presets():
    p = ViTConfig.paper()
    assert (p.image_size, p.patch_size, p.enc_depth, p.enc_dim, p.enc_heads) == (224, 16, 24, 1024, 16)
    assert (p.dec_depth, p.dec_dim, p.num_patches) == (8, 512, 196)
    d = ViTConfig.desk()
    assert (d.image_size, d.patch_size, d.enc_depth, d.enc_dim, d.dec_depth, d.dec_dim) == (64, 8, 4, 64, 2, 32)
    assert ViTConfig.from_dict(d.to_dict()) == d
    with pytest.raises(ValueError):
        ViTConfig(image_size=30, patch_size=8)
    with pytest.raises(ValueError):
        ViTConfig.preset("huge")


def test_patchify_layout_and_inverse():
    img = np.arange(2 * 4 * 4).reshape(2, 4, 4).astype(float)
    tok = patchify(img, 2)
    assert tok.shape == (4, 8)
    # first patch: rows 0-1, cols 0-1, channel fastest
    np.testing.assert_array_equal(tok[0], [0, 16, 1, 17, 4, 20, 5, 21])
    np.testing.assert_array_equal(unpatchify(tok, 2, 2), img)
    batch = np.stack([img, img + 1])
    np.testing.assert_array_equal(unpatchify(patchify(batch, 2), 2, 2), batch)


def test_sincos_table():
    t = sincos_pos_embed(3, 3, 8)
    assert t.shape == (9, 8)
    np.testing.assert_allclose(t[0], [0, 0, 1, 1, 0, 0, 1, 1], atol=1e-12)
    with pytest.raises(ValueError):
        sincos_pos_embed(2, 2, 6)


def test_encoder_shapes_and_attention_rows():
    enc = ViTEncoder(TINY, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 3, 16, 16)).astype(np.float32)
    pooled, tokens = enc(x, keep_weights=True)
    assert pooled.shape == (2, 16) and tokens.shape == (2, 16, 16)
    for w in enc.attention_maps():
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        enc(np.zeros((1, 3, 15, 16), dtype=np.float32))


def test_identity_path_reduces_to_normed_embeddings():
    with T.default_dtype(np.float64):
        enc = ViTEncoder(TINY, np.random.default_rng(0))
        for blk in enc.blocks:
            for lin in (blk.attn.q, blk.attn.k, blk.attn.v, blk.attn.o, blk.mlp.fc1, blk.mlp.fc2):
                lin.weight.data[...] = 0.0
        x = np.random.default_rng(1).normal(size=(1, 3, 16, 16))
        with T.no_grad():
            _, tokens = enc(x)
            emb = enc.with_cls(enc.embed_patches(patchify(Tensor(x), 4)))
            expect = enc.norm(emb).data[:, 1:]
    np.testing.assert_allclose(tokens.data, expect, atol=1e-12)


def test_encoder_gradient_desk_scale():
    """Depth 2, width 32: input gradient through the whole encoder."""
    cfg = ViTConfig(image_size=16, patch_size=8, in_channels=1, enc_depth=2, enc_dim=32, enc_heads=4,
                    dec_depth=1, dec_dim=8, dec_heads=2)
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(0)
        enc = ViTEncoder(cfg, rng)
        scale_params(enc, rng)
        x = rng.normal(size=(1, 1, 16, 16))
        proj = rng.normal(size=(1, 32))
        assert grad_check(lambda t: (enc(t)[0] * proj).sum(), x, eps=1e-3, order=4) < 1e-5


def test_encoder_finite_after_patch_permutation():
    enc = ViTEncoder(TINY, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, 3, 16, 16)).astype(np.float32)
    x2 = x.copy()
    x2[..., :4, :4], x2[..., 4:8, :4] = x[..., 4:8, :4], x[..., :4, :4]
    assert np.isfinite(enc(x2)[0].data).all()


# --------------------------------------------------------------------------
# masking
# --------------------------------------------------------------------------

@pytest.mark.parametrize("ratio", [0.25, 0.5, 0.75, 0.8])
def test_keep_count_exact_floor(ratio):
    r = Fraction(repr(ratio))
    for n in range(4, 197):
        assert keep_count(n, ratio) == math.floor(n * (1 - r))
    assert keep_count(196, 0.8) == 39
    assert keep_count(10, 0.8) == 2      # 10 * (1 - 0.8) is 1.999... in binary floating point


def test_random_mask_roundtrip_exhaustive_small():
    for n in range(4, 17):
        values = np.arange(n) * 10.0
        for ratio in (0.25, 0.5, 0.75, 0.8):
            if keep_count(n, ratio) == 0:
                continue
            for seed in range(50):
                plan = random_mask(n, ratio, np.random.default_rng(seed))
                shuffle = np.argsort(plan.ids_restore)          # inverse permutation
                np.testing.assert_array_equal(shuffle[:plan.len_keep], plan.ids_keep)
                np.testing.assert_array_equal(values[shuffle][plan.ids_restore], values)
                np.testing.assert_array_equal(plan.mask, (plan.ids_restore >= plan.len_keep).astype(float))
                assert plan.mask.sum() == n - keep_count(n, ratio)


def test_random_mask_errors():
    with pytest.raises(ValueError):
        random_mask(4, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        random_mask(3, 0.75, np.random.default_rng(0))


def test_mask_plan_from_kept():
    plan = MaskPlan.from_kept([3, 1], 5)
    np.testing.assert_array_equal(plan.mask, [1, 0, 1, 0, 1])
    x = np.arange(5) * 10
    shuffled = np.r_[x[[3, 1]], x[[0, 2, 4]]]
    np.testing.assert_array_equal(shuffled[plan.ids_restore], x)


def test_different_seeds_give_different_masks():
    a = random_mask(196, 0.8, np.random.default_rng(0)).mask
    b = random_mask(196, 0.8, np.random.default_rng(1)).mask
    assert not np.array_equal(a, b)


# --------------------------------------------------------------------------
# MAE model and loss
# --------------------------------------------------------------------------

def test_masked_recon_loss_cases():
    pred = Tensor(np.zeros((1, 3, 4)))
    target = np.full((1, 3, 4), 0.5)
    mask = np.array([[0.0, 1.0, 0.0]])
    assert float(masked_recon_loss(pred, target, mask).data) == pytest.approx(0.25)
    assert float(masked_recon_loss(Tensor(target), target, mask).data) == 0.0
    with pytest.raises(ValueError):
        masked_recon_loss(pred, target, np.zeros((1, 3)))


def test_mae_forward_shapes_and_zero_visible_gradient():
    with T.default_dtype(np.float64):
        model = MAEModel(TINY, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(2, 3, 16, 16))
        plans = [random_mask(16, 0.75, np.random.default_rng(s)) for s in (5, 6)]
        pred, mask = model(x, plans)
        assert pred.shape == (2, 16, 48) and mask.shape == (2, 16)
        leaf = Tensor(pred.data.copy(), requires_grad=True)
        masked_recon_loss(leaf, model.targets(x), mask).backward()
    visible = mask == 0
    assert np.all(leaf.grad[visible] == 0.0)
    assert np.all(np.abs(leaf.grad[~visible]).sum(-1) > 0)


def test_mae_rejects_mismatched_plans():
    model = MAEModel(TINY, np.random.default_rng(0))
    x = np.zeros((1, 3, 16, 16), dtype=np.float32)
    with pytest.raises(ValueError):
        model(x, [random_mask(9, 0.5, np.random.default_rng(0))])
    with pytest.raises(ValueError):
        model(x, [])


def test_norm_pix_targets():
    model = MAEModel(TINY, np.random.default_rng(0), norm_pix_loss=True)
    t = model.targets(np.random.default_rng(1).normal(size=(1, 3, 16, 16)))
    np.testing.assert_allclose(t.mean(-1), 0.0, atol=1e-5)


def test_reconstruct_visualize_copies_visible_patches():
    model = MAEModel(TINY, np.random.default_rng(0))
    img = fundus_like(1, 16)[0]
    plan = random_mask(16, 0.75, np.random.default_rng(3))
    masked, comp = reconstruct_visualize(img, plan, model)
    assert masked.dtype == np.uint8 and comp.shape == img.shape
    vis = plan.mask == 0
    np.testing.assert_array_equal(patchify(comp, 4)[vis], patchify(img, 4)[vis])
    np.testing.assert_array_equal(patchify(masked, 4)[~vis], 0)


def test_pretrain_schedule_anchors():
    s = PretrainSchedule()
    assert (s.total_epochs, s.warmup_epochs, s.batch_size, s.mask_ratio) == (50, 15, 64, 0.8)
    assert s.lr_at(0) == 0.0
    assert s.lr_at(15) == 1e-3
    assert s.lr_at(50) == 0.0
    assert s.lr_at(32.5) == pytest.approx(5e-4, rel=1e-12)
    with pytest.raises(ValueError):
        PretrainSchedule(total_epochs=10, warmup_epochs=10)


def test_pretrain_loop_logs_and_is_deterministic():
    images = fundus_like(4, 16)
    sched = PretrainSchedule(total_epochs=2, warmup_epochs=1, batch_size=2, mask_ratio=0.75)
    seen = []
    a = pretrain(images, TINY, sched, seed=3, on_epoch=lambda e, m, o: seen.append(e))
    b = pretrain(images, TINY, sched, seed=3)
    assert seen == [1, 2]
    assert a.log_lines == b.log_lines and len(a.log_lines) == 4
    assert a.log_lines[0].startswith("epoch 1 step 1 loss ")
    assert log_line(2, 7, 0.5, 1e-3) == "epoch 2 step 7 loss 0.50000000 lr 1.00000000e-03"
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    with pytest.raises(ValueError):
        pretrain([], TINY, sched, seed=0)


def test_pretrain_aborts_on_non_finite_loss():
    images = fundus_like(2, 16)
    model = MAEModel(TINY, np.random.default_rng(0))
    model.decoder_pred.bias.data[...] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        pretrain(images, TINY, PretrainSchedule(total_epochs=2, warmup_epochs=1, batch_size=2), 0, model=model)
