"""Vision Transformer encoder and the patch/positional-embedding helpers."""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import Block, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    in_channels: int = 3
    enc_depth: int = 24
    enc_dim: int = 1024
    enc_heads: int = 16
    dec_depth: int = 8
    dec_dim: int = 512
    dec_heads: int = 16
    mlp_ratio: float = 4.0
    pool: str = "cls"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.enc_dim % self.enc_heads:
            raise ValueError(f"enc_dim {self.enc_dim} not divisible by enc_heads {self.enc_heads}")
        if self.dec_dim % self.dec_heads:
            raise ValueError(f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}")
        if self.pool not in ("cls", "mean"):
            raise ValueError(f"pool must be 'cls' or 'mean', got {self.pool!r}")
        if min(self.enc_depth, self.dec_depth, self.in_channels) < 1:
            raise ValueError("depths and channel count must be positive")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.in_channels

    @classmethod
    def paper(cls):
        """ViT-Large encoder with the 8-block, 512-wide decoder."""
        return cls()

    @classmethod
    def desk(cls):
        return cls(image_size=64, patch_size=8, enc_depth=4, enc_dim=64, enc_heads=4,
                   dec_depth=2, dec_dim=32, dec_heads=4)

    @classmethod
    def preset(cls, name):
        presets = {"paper": cls.paper, "desk": cls.desk}
        if name not in presets:
            raise ValueError(f"unknown architecture preset {name!r} (choose from {sorted(presets)})")
        return presets[name]()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------

def patchify(images, patch_size):
    """(C, H, W) or (B, C, H, W) -> (L, p*p*C) or (B, L, p*p*C), row-major patches.

    Within a patch the layout is (row, col, channel). Works on ndarrays and Tensors.
    """
    single = images.ndim == 3
    x = images.reshape((1,) + tuple(images.shape)) if single else images
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = x.reshape((b, c, gh, p, gw, p)).transpose((0, 2, 4, 3, 5, 1))
    x = x.reshape((b, gh * gw, p * p * c))
    return x.reshape((gh * gw, p * p * c)) if single else x


def unpatchify(tokens, patch_size, channels, grid=None):
    """Inverse of ``patchify``. ``grid`` is (rows, cols) of patches; square if omitted."""
    single = tokens.ndim == 2
    x = tokens.reshape((1,) + tuple(tokens.shape)) if single else tokens
    b, n, d = x.shape
    p = patch_size
    if d != p * p * channels:
        raise ValueError(f"token width {d} != patch_size^2 * channels = {p * p * channels}")
    if grid is None:
        side = int(round(np.sqrt(n)))
        grid = (side, side)
    gh, gw = grid
    if gh * gw != n:
        raise ValueError(f"{n} tokens do not fill a {gh}x{gw} patch grid")
    x = x.reshape((b, gh, gw, p, p, channels)).transpose((0, 5, 1, 3, 2, 4))
    x = x.reshape((b, channels, gh * p, gw * p))
    return x.reshape((channels, gh * p, gw * p)) if single else x


def _sincos_1d(dim, positions):
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    angles = np.outer(positions.reshape(-1), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed(grid_h, grid_w, dim):
    """Fixed 2-D sine-cosine table of shape (grid_h * grid_w, dim).

    Half the channels encode the column index, half the row index.
    """
    if dim % 4:
        raise ValueError(f"positional embedding dim {dim} must be divisible by 4")
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64),
                             np.arange(grid_w, dtype=np.float64), indexing="ij")
    emb = np.concatenate([_sincos_1d(dim // 2, cols), _sincos_1d(dim // 2, rows)], axis=1)
    return emb


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------

class ViTEncoder(Module):
    def __init__(self, config, rng):
        cfg = config
        self.config = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.enc_dim, rng)
        self.cls_token = Parameter(trunc_normal(rng, (1, 1, cfg.enc_dim)))
        self.blocks = [Block(cfg.enc_dim, cfg.enc_heads, cfg.mlp_ratio, rng) for _ in range(cfg.enc_depth)]
        self.norm = LayerNorm(cfg.enc_dim)
        table = sincos_pos_embed(cfg.grid, cfg.grid, cfg.enc_dim)
        # row 0 belongs to the class token and stays zero
        self.pos_embed = np.concatenate([np.zeros((1, cfg.enc_dim)), table], axis=0)

    def _pos(self, dtype):
        return self.pos_embed.astype(dtype)

    def embed_patches(self, patches):
        """Linear patch embedding plus positional table, no class token."""
        x = self.patch_embed(patches)
        return x + self._pos(x.dtype)[1:]

    def with_cls(self, x):
        b = x.shape[0]
        cls = self.cls_token + self._pos(x.dtype)[:1]
        return T.concat([T.broadcast_to(cls, (b, 1, x.shape[-1])), x], axis=1)

    def run_blocks(self, x, keep_weights=False):
        for blk in self.blocks:
            x = blk(x, keep_weights=keep_weights)
        return self.norm(x)

    def check_images(self, images):
        cfg = self.config
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if tuple(images.shape[1:]) != want:
            raise ValueError(f"images of shape {tuple(images.shape[1:])} do not match config {want}")

    def forward(self, images, keep_weights=False):
        """images (B, C, H, W) -> (pooled (B, D), tokens (B, L, D))."""
        if images.ndim == 3:
            images = images.reshape((1,) + tuple(images.shape))
        self.check_images(images)
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.cls_token.dtype))
        x = self.embed_patches(patchify(images, self.config.patch_size))
        out = self.run_blocks(self.with_cls(x), keep_weights=keep_weights)
        tokens = out[:, 1:]
        pooled = out[:, 0] if self.config.pool == "cls" else tokens.mean(axis=1)
        return pooled, tokens

    def attention_maps(self):
        return [blk.attn.last_weights for blk in self.blocks]


def encode(images, model):
    """Functional alias for ``model(images)``."""
    return model(images)
