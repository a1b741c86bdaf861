"""Masked-autoencoder model, masking bookkeeping, reconstruction loss and
the reconstruction composite used for visual inspection."""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .data import (IMAGENET_MEAN, IMAGENET_STD, augment, normalize, resize_cubic, sample_rng,
                   to_three_channels)
from .nn import AdamW, Block, LayerNorm, Linear, Module, Parameter, trunc_normal, warmup_cosine
from .tensor import Tensor
from .vit import ViTEncoder, patchify, sincos_pos_embed, unpatchify


def keep_count(num_patches, mask_ratio):
    """floor(L * (1 - ratio)) evaluated on the decimal value of ``mask_ratio``.

    Exact rational arithmetic avoids 196 * (1 - 0.8) landing just under 39.
    """
    ratio = Fraction(repr(float(mask_ratio)))
    return math.floor(num_patches * (1 - ratio))


@dataclass
class MaskPlan:
    """Per-sample masking. ``mask`` is 1 for hidden patches."""

    len_keep: int
    ids_keep: np.ndarray
    ids_restore: np.ndarray
    mask: np.ndarray

    @property
    def num_patches(self):
        return self.mask.shape[-1]

    @classmethod
    def from_kept(cls, kept, num_patches):
        """Plan that keeps exactly the patch indices in ``kept`` (in that order)."""
        kept = np.asarray(kept, dtype=np.int64)
        rest = np.setdiff1d(np.arange(num_patches), kept)
        shuffle = np.concatenate([kept, rest])
        restore = np.argsort(shuffle, kind="stable")
        mask = np.ones(num_patches, dtype=np.float64)
        mask[kept] = 0.0
        return cls(len(kept), kept, restore, mask)


def random_mask(num_patches, mask_ratio, rng):
    if num_patches < 1:
        raise ValueError("need at least one patch")
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    len_keep = keep_count(num_patches, mask_ratio)
    if len_keep == 0:
        raise ValueError(f"mask_ratio {mask_ratio} leaves no visible patch out of {num_patches}")
    noise = rng.random(num_patches)
    shuffle = np.argsort(noise, kind="stable")
    restore = np.argsort(shuffle, kind="stable")
    mask = np.ones(num_patches, dtype=np.float64)
    mask[:len_keep] = 0.0
    mask = mask[restore]
    return MaskPlan(len_keep, shuffle[:len_keep].copy(), restore, mask)


def stack_plans(plans):
    lens = {p.len_keep for p in plans}
    if len(lens) != 1:
        raise ValueError("all plans in a batch must keep the same number of patches")
    return (np.stack([p.ids_keep for p in plans]), np.stack([p.ids_restore for p in plans]),
            np.stack([p.mask for p in plans]))


class MAEModel(Module):
    """ViT encoder over visible patches plus a narrow decoder that predicts pixels."""

    def __init__(self, config, rng, norm_pix_loss=False):
        cfg = config
        self.config = cfg
        self.norm_pix_loss = norm_pix_loss
        self.encoder = ViTEncoder(cfg, rng)
        self.decoder_embed = Linear(cfg.enc_dim, cfg.dec_dim, rng)
        self.mask_token = Parameter(trunc_normal(rng, (1, 1, cfg.dec_dim)))
        self.decoder_blocks = [Block(cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio, rng) for _ in range(cfg.dec_depth)]
        self.decoder_norm = LayerNorm(cfg.dec_dim)
        self.decoder_pred = Linear(cfg.dec_dim, cfg.patch_dim, rng)
        table = sincos_pos_embed(cfg.grid, cfg.grid, cfg.dec_dim)
        self.decoder_pos_embed = np.concatenate([np.zeros((1, cfg.dec_dim)), table], axis=0)

    def forward_encoder(self, images, ids_keep):
        enc = self.encoder
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.mask_token.dtype))
        x = enc.embed_patches(patchify(images, self.config.patch_size))
        b = x.shape[0]
        x = x[np.arange(b)[:, None], ids_keep]
        return enc.run_blocks(enc.with_cls(x))

    def forward_decoder(self, latent, ids_restore):
        x = self.decoder_embed(latent)
        b, n, d = x.shape
        num_masked = ids_restore.shape[1] + 1 - n
        masks = T.broadcast_to(self.mask_token, (b, num_masked, d))
        seq = T.concat([x[:, 1:], masks], axis=1)
        seq = seq[np.arange(b)[:, None], ids_restore]
        x = T.concat([x[:, :1], seq], axis=1) + self.decoder_pos_embed.astype(x.dtype)
        for blk in self.decoder_blocks:
            x = blk(x)
        x = self.decoder_pred(self.decoder_norm(x))
        return x[:, 1:]

    def forward(self, images, plans):
        """Return (pred (B, L, p*p*C), mask (B, L))."""
        if images.ndim == 3:
            images = images.reshape((1,) + tuple(images.shape))
        self.encoder.check_images(images)
        if len(plans) != images.shape[0]:
            raise ValueError(f"{len(plans)} mask plans for {images.shape[0]} images")
        if any(p.num_patches != self.config.num_patches for p in plans):
            raise ValueError(f"mask plans do not cover {self.config.num_patches} patches")
        ids_keep, ids_restore, mask = stack_plans(plans)
        latent = self.forward_encoder(images, ids_keep)
        return self.forward_decoder(latent, ids_restore), mask

    def targets(self, images):
        data = images.data if isinstance(images, Tensor) else np.asarray(images)
        target = patchify(data, self.config.patch_size).astype(self.mask_token.dtype)
        if self.norm_pix_loss:
            mu = target.mean(axis=-1, keepdims=True)
            var = target.var(axis=-1, keepdims=True)
            target = (target - mu) / np.sqrt(var + 1e-6)
        return target

    def loss(self, images, plans):
        pred, mask = self(images, plans)
        return masked_recon_loss(pred, self.targets(images), mask), pred, mask


def mae_forward(images, model, plans):
    return model(images, plans)


def masked_recon_loss(pred, target, mask):
    """Mean squared error per patch, averaged over masked patches only."""
    mask = np.asarray(mask, dtype=pred.dtype)
    total = float(mask.sum())
    if total < 1:
        raise ValueError("masked_recon_loss needs at least one masked patch")
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape or mask.shape != pred.shape[:-1]:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    diff = pred - target
    per_patch = (diff * diff).mean(axis=-1)
    return (per_patch * mask).sum() * (1.0 / total)


def reconstruct_visualize(image, plan, model, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Composite of visible original patches and predicted masked patches.

    ``image`` is a uint8 (C, H, W) array at the model's input size. Returns
    (masked_view, composite), both uint8; hidden patches in ``masked_view`` are 0.
    """
    image = np.asarray(image)
    cfg = model.config
    p = cfg.patch_size
    x = normalize(image.astype(np.float64) / 255.0, mean, std)[None]
    with T.no_grad():
        pred, _ = model(x, [plan])
    pred = pred.data[0].astype(np.float64)
    if model.norm_pix_loss:
        raw = patchify(x[0], p)
        mu = raw.mean(axis=-1, keepdims=True)
        var = raw.var(axis=-1, keepdims=True)
        pred = pred * np.sqrt(var + 1e-6) + mu
    pixels = unpatchify(pred, p, cfg.in_channels)
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    pixels = np.clip(np.rint((pixels * s + m) * 255.0), 0, 255).astype(np.uint8)

    hidden = plan.mask.astype(bool)
    orig_patches = patchify(image, p)
    pred_patches = patchify(pixels, p)
    composite = np.where(hidden[:, None], pred_patches, orig_patches)
    masked = np.where(hidden[:, None], np.zeros_like(orig_patches), orig_patches)
    return (unpatchify(masked, p, cfg.in_channels).astype(np.uint8),
            unpatchify(composite, p, cfg.in_channels).astype(np.uint8))


# --------------------------------------------------------------------------
# pretraining loop
# --------------------------------------------------------------------------

@dataclass
class PretrainSchedule:
    total_epochs: int = 50
    warmup_epochs: int = 15
    peak_lr: float = 1e-3
    batch_size: int = 64
    mask_ratio: float = 0.8
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)

    def __post_init__(self):
        if min(self.total_epochs, self.batch_size) < 1 or self.warmup_epochs < 0 or self.peak_lr <= 0:
            raise ValueError("schedule values must be positive")
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup must end before the last epoch")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")

    def lr_at(self, epoch):
        return warmup_cosine(epoch, self.warmup_epochs, self.total_epochs, self.peak_lr, 0.0)


@dataclass
class PretrainResult:
    model: MAEModel
    optimizer: AdamW
    epoch_losses: list
    log_lines: list


def log_line(epoch, step, loss, lr):
    return f"epoch {epoch} step {step} loss {loss:.8f} lr {lr:.8e}"


def training_view(image, rng, size, use_augment):
    if use_augment:
        return augment(image, rng, out_size=size)
    image = to_three_channels(image)
    if image.shape[1:] != (size, size):
        image = resize_cubic(image.astype(np.float64), size)
    return normalize(np.asarray(image, dtype=np.float64) / 255.0).astype(np.float32)


def pretrain(images, config, schedule, seed, use_augment=True, model=None,
             on_epoch=None, log=None):
    """Run masked-autoencoder pretraining over in-memory uint8 images.

    ``on_epoch(epoch, model, optimizer)`` is called after every epoch (checkpointing);
    ``log`` receives each loss-log line.
    """
    images = list(images)
    if not images:
        raise ValueError("pretraining needs at least one image")
    if model is None:
        model = MAEModel(config, np.random.default_rng(seed))
    opt = AdamW(model.trainable(), betas=schedule.betas, weight_decay=schedule.weight_decay)
    n = len(images)
    bs = schedule.batch_size
    steps = math.ceil(n / bs)
    epoch_losses, lines = [], []
    global_step = 0
    for epoch in range(schedule.total_epochs):
        order = sample_rng(seed, epoch).permutation(n)
        running = 0.0
        for step in range(steps):
            idx = order[step * bs:(step + 1) * bs]
            batch = np.stack([training_view(images[i], sample_rng(seed, epoch, i, 0),
                                            config.image_size, use_augment) for i in idx])
            plans = [random_mask(config.num_patches, schedule.mask_ratio, sample_rng(seed, epoch, i, 1))
                     for i in idx]
            lr = schedule.lr_at(epoch + step / steps)
            opt.zero_grad()
            loss, _, _ = model.loss(batch.astype(model.mask_token.dtype), plans)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at epoch {epoch + 1} step {step}")
            loss.backward()
            opt.step(lr)
            global_step += 1
            running += value * len(idx)
            line = log_line(epoch + 1, global_step, value, lr)
            lines.append(line)
            if log is not None:
                log(line)
        epoch_losses.append(running / n)
        if on_epoch is not None:
            on_epoch(epoch + 1, model, opt)
    return PretrainResult(model, opt, epoch_losses, lines)
