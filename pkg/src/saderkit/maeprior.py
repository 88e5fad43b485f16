"""Tiny masked autoencoder used as a frozen structural prior at sampling time.

A ViT-style asymmetric encoder/decoder is pretrained on cloud-free synthetic
scenes by reconstructing randomly masked patches. After training the weights
are frozen; the guide-time entry point reconstructs with every patch visible,
yielding a deterministic structure-regularized projection of its input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError
from .checkpoint import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class MAEConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    mask_ratio: float = 0.75
    encoder_dim: int = 64
    encoder_depth: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.encoder_dim % self.heads or self.decoder_dim % self.heads:
            raise ConfigError("encoder/decoder dims must be divisible by heads")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MAEConfig":
        return cls(**d)


def patchify(img: torch.Tensor, patch_size: int) -> torch.Tensor:
    """[B, C, H, W] -> [B, N, patch*patch*C] in row-major patch order."""
    if img.dim() != 4:
        raise ConfigError(f"expected [B, C, H, W], got {tuple(img.shape)}")
    b, c, h, w = img.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    x = img.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 3, 5, 1)  # B, gh, gw, p, p, C
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(seq: torch.Tensor, patch_size: int, channels: int, height: int, width: int):
    """Inverse of patchify; exact round trip."""
    b, n, d = seq.shape
    p = patch_size
    gh, gw = height // p, width // p
    if n != gh * gw or d != p * p * channels:
        raise ConfigError(f"sequence {n}x{d} does not match {channels}x{height}x{width}")
    x = seq.reshape(b, gh, gw, p, p, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, height, width)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TinyMAE(nn.Module):
    def __init__(self, cfg: MAEConfig):
        super().__init__()
        self.cfg = cfg
        p, n = cfg.patch_size, cfg.num_patches
        d_in = p * p * cfg.channels
        self.embed = nn.Linear(d_in, cfg.encoder_dim)
        self.enc_pos = nn.Parameter(torch.randn(1, n, cfg.encoder_dim) * 0.02)
        self.encoder = nn.ModuleList(_Block(cfg.encoder_dim, cfg.heads) for _ in range(cfg.encoder_depth))
        self.enc_norm = nn.LayerNorm(cfg.encoder_dim)
        self.to_decoder = nn.Linear(cfg.encoder_dim, cfg.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.decoder_dim))
        self.dec_pos = nn.Parameter(torch.randn(1, n, cfg.decoder_dim) * 0.02)
        self.decoder = nn.ModuleList(_Block(cfg.decoder_dim, cfg.heads) for _ in range(cfg.decoder_depth))
        self.dec_norm = nn.LayerNorm(cfg.decoder_dim)
        self.head = nn.Linear(cfg.decoder_dim, d_in)

    def _encode(self, tokens, keep_idx=None):
        x = self.embed(tokens) + self.enc_pos
        if keep_idx is not None:
            x = torch.gather(x, 1, keep_idx[..., None].expand(-1, -1, x.shape[-1]))
        for blk in self.encoder:
            x = blk(x)
        return self.enc_norm(x)

    def _decode(self, enc, keep_idx=None):
        b = enc.shape[0]
        n = self.cfg.num_patches
        lat = self.to_decoder(enc)
        if keep_idx is None:
            full = lat
        else:
            full = self.mask_token.expand(b, n, -1).clone()
            full = full.scatter(1, keep_idx[..., None].expand(-1, -1, lat.shape[-1]), lat)
        full = full + self.dec_pos
        for blk in self.decoder:
            full = blk(full)
        return self.head(self.dec_norm(full))

    def masked_loss(self, imgs: torch.Tensor, rng: np.random.Generator):
        """Mean squared error on floor(mask_ratio * N) hidden patches.

        A small visible-patch anchor (weight 0.1) keeps the decoder faithful
        at unmasked positions; without it the full-visibility reconstruction
        used at guide time degrades badly, since masked-only training never
        constrains those outputs.
        """
        cfg = self.cfg
        tokens = patchify(imgs, cfg.patch_size)
        b, n, _ = tokens.shape
        n_masked = int(math.floor(cfg.mask_ratio * n))
        keep = n - n_masked
        perm = np.stack([rng.permutation(n) for _ in range(b)])
        perm_t = torch.from_numpy(perm).to(imgs.device)
        keep_idx = perm_t[:, :keep]
        mask_idx = perm_t[:, keep:]
        enc = self._encode(tokens, keep_idx)
        pred = self._decode(enc, keep_idx)

        def take(seq, idx):
            return torch.gather(seq, 1, idx[..., None].expand(-1, -1, seq.shape[-1]))

        masked_mse = ((take(pred, mask_idx) - take(tokens, mask_idx)) ** 2).mean()
        visible_mse = ((take(pred, keep_idx) - take(tokens, keep_idx)) ** 2).mean()
        return masked_mse + 0.1 * visible_mse

    def reconstruct(self, imgs: torch.Tensor) -> torch.Tensor:
        """Full-visibility reconstruction (no masking); deterministic."""
        cfg = self.cfg
        tokens = patchify(imgs, cfg.patch_size)
        pred = self._decode(self._encode(tokens))
        return unpatchify(pred, cfg.patch_size, cfg.channels, imgs.shape[-2], imgs.shape[-1])


class FrozenPrior:
    """Read-only wrapper around a trained autoencoder."""

    def __init__(self, model: TinyMAE):
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self.cfg = model.cfg

    @torch.no_grad()
    def reconstruct(self, imgs: torch.Tensor) -> torch.Tensor:
        single = imgs.dim() == 3
        batch = imgs.unsqueeze(0) if single else imgs
        out = self._model.reconstruct(batch)
        return out[0] if single else out

    def masked_loss(self, *args, **kwargs):
        raise ConfigError("prior is frozen; training entry points are disabled")

    def train(self, *args, **kwargs):
        raise ConfigError("prior is frozen; training entry points are disabled")

    def state_dict(self):
        return self._model.state_dict()

    def save(self, path):
        save_checkpoint(path, kind="mae", config=self.cfg.to_dict(), state_dict=self.state_dict())

    @classmethod
    def load(cls, path) -> "FrozenPrior":
        ckpt = load_checkpoint(path)
        if ckpt.kind != "mae":
            raise DataError(f"{path}: expected a 'mae' checkpoint, found {ckpt.kind!r}")
        cfg = MAEConfig.from_dict(ckpt.config)
        model = TinyMAE(cfg)
        model.load_state_dict(ckpt.state)
        return cls(model)


def train_mae(
    corpus: torch.Tensor,
    cfg: MAEConfig,
    epochs: int = 30,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
) -> FrozenPrior:
    """Pretrain on cloud-free scenes [N, C, H, W] in [0, 1]; returns the frozen prior."""
    if corpus.ndim != 4 or corpus.shape[0] == 0:
        raise ConfigError("corpus must be a non-empty [N, C, H, W] tensor")
    if corpus.shape[1] != cfg.channels or corpus.shape[-1] != cfg.image_size:
        raise ConfigError(
            f"corpus {tuple(corpus.shape)} does not match config "
            f"{cfg.channels}x{cfg.image_size}x{cfg.image_size}"
        )
    torch.manual_seed(seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xAE])))
    model = TinyMAE(cfg)
    opt = torch.optim.RMSprop(model.parameters(), lr=lr)
    n = corpus.shape[0]
    for _epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = corpus[order[start : start + batch_size]]
            loss = model.masked_loss(batch, rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return FrozenPrior(model)
