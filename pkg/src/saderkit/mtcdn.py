"""Multi-temporal conditional denoiser.

The denoiser is a small U-Net that processes T frames jointly:

* a conditional encoder runs on each frame's (observation, auxiliary) pair
  independently and fuses the per-scale features across time with a temporal
  attention encoder, yielding pooled features plus key/value stacks;
* the backbone consumes the noisy state concatenated with the observation
  and auxiliary channels, injects pooled conditional features at matching
  scales, mixes frames through a temporal fusion block (self-attention over
  the frames gated against cross-attention into the conditional key/values),
  and refines the bottleneck with a hybrid of global and clamped-window
  neighborhood attention whose mixing coefficients come from the noise-level
  embedding;
* `denoise` wraps the network with input/output scaling so that the module
  predicts the clean frames directly and reduces to a contraction of the
  de-meaned input when the final layer is zero (its initial state).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError
from .schedule import Schedule


@dataclass(frozen=True)
class MTCDNConfig:
    in_channels: int = 3
    aux_channels: int = 1
    out_channels: int = 3
    frames: int = 3
    base_channels: int = 32
    depth: int = 3
    heads: int = 4
    neighborhood_window: int = 5
    embed_dim: int = 64
    temporal_pos_enc: bool = True
    use_tfblock: bool = True
    use_hablock: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.neighborhood_window % 2 != 1:
            raise ConfigError("neighborhood_window must be odd")
        if self.base_channels % self.heads != 0:
            raise ConfigError("base_channels must be divisible by heads")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")

    @property
    def stage_channels(self) -> list:
        return [self.base_channels * (s + 1) for s in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MTCDNConfig":
        return cls(**d)


@dataclass
class ConditionalFeatures:
    """Per-scale fused features plus the temporal key/value stack."""

    fused: list  # scale s: [B, c_s, h_s, w_s]
    kv: tuple  # (k, v), each [B, T, c_0, H, W] at the first scale


class NoiseEmbedding(nn.Module):
    """sigma -> vector via ln(sigma)/4, sinusoidal features, and a 2-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigError("embed_dim must be even")
        self.dim = dim
        half = dim // 2
        self.register_buffer(
            "freqs", torch.exp(torch.arange(half) * (-math.log(10000.0) / max(half - 1, 1)))
        )
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        if (sigma <= 0).any():
            raise ConfigError("noise embedding needs sigma > 0")
        c = torch.log(sigma) / 4.0
        ang = c[:, None] * self.freqs[None, :].to(c.dtype)
        feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
        return self.mlp(feats)


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with group norm and optional scale/shift modulation."""

    def __init__(self, cin: int, cout: int, embed_dim: int | None = None):
        super().__init__()
        groups = math.gcd(8, cin)
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(math.gcd(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.mod = nn.Linear(embed_dim, 2 * cout) if embed_dim else None
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.mod is not None and emb is not None:
            scale, shift = self.mod(emb)[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # [B, T, c, h, w] -> [B, T, heads, c//heads, h, w]
    b, t, c, hh, ww = x.shape
    return x.view(b, t, heads, c // heads, hh, ww)


class TemporalAttentionEncoder(nn.Module):
    """Fuses per-frame features across time with head-wise attention pooling.

    Scores come from a learned per-head query against key projections of the
    frames (plus a learned temporal position code unless disabled); the fused
    map is the attention-weighted sum of the raw inputs, so a single frame
    passes through unchanged. Key/value projections of the frames are
    returned for cross-attention further down the network.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        max_frames: int,
        pos_enc: bool = True,
        emit_values: bool = True,
    ):
        super().__init__()
        self.heads = heads
        self.pos_enc = pos_enc
        self.to_k = nn.Conv2d(dim, dim, 1, bias=False)
        self.to_v = nn.Conv2d(dim, dim, 1, bias=False) if emit_values else None
        self.query = nn.Parameter(torch.randn(heads, dim // heads) * 0.2)
        self.pos = nn.Parameter(torch.zeros(max_frames, dim))

    def forward(self, frames: torch.Tensor):
        b, t, c, hh, ww = frames.shape
        flat = frames.reshape(b * t, c, hh, ww)
        k = self.to_k(flat).view(b, t, c, hh, ww)
        if self.pos_enc:
            if t > self.pos.shape[0]:
                raise ConfigError(
                    f"{t} frames exceed the configured maximum {self.pos.shape[0]}"
                )
            k = k + self.pos[:t].view(1, t, c, 1, 1)
        kh = _split_heads(k, self.heads)
        scale = 1.0 / math.sqrt(kh.shape[3])
        scores = torch.einsum("bthdxy,hd->bthxy", kh, self.query.to(k.dtype)) * scale
        attn = torch.softmax(scores, dim=1)
        fused = torch.einsum("bthxy,bthdxy->bhdxy", attn, _split_heads(frames, self.heads))
        fused = fused.reshape(b, c, hh, ww)
        if self.to_v is None:
            return fused, None
        v = self.to_v(flat).view(b, t, c, hh, ww)
        return fused, (k, v)


def _temporal_attention(q, k, v, heads):
    """Attention across the frame axis at every spatial position."""
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[3])
    scores = torch.einsum("bthdxy,bshdxy->bhxyts", qh, kh) * scale
    attn = torch.softmax(scores, dim=-1)
    out = torch.einsum("bhxyts,bshdxy->bthdxy", attn, vh)
    b, t, _, _, hh, ww = out.shape
    return out.reshape(b, t, -1, hh, ww)


class TFBlock(nn.Module):
    """Gated blend of temporal self-attention and conditional cross-attention.

    Returns exactly  g * cross + (1 - g) * self  with g in (0, 1) from a
    sigmoid projection of the concatenated branch outputs; any residual
    wiring is the caller's business.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(math.gcd(8, dim), dim)
        self.q_self = nn.Conv2d(dim, dim, 1, bias=False)
        self.k_self = nn.Conv2d(dim, dim, 1, bias=False)
        self.v_self = nn.Conv2d(dim, dim, 1, bias=False)
        self.q_cross = nn.Conv2d(dim, dim, 1, bias=False)
        self.gate = nn.Conv2d(2 * dim, dim, 1)

    def _normed(self, x):
        b, t, c, hh, ww = x.shape
        return self.norm(x.reshape(b * t, c, hh, ww)).view(b, t, c, hh, ww)

    def branches(self, x: torch.Tensor, kv):
        """(cross, self) branch outputs for [B, T, c, h, w] input."""
        k_cond, v_cond = kv
        if k_cond.shape[-2:] != x.shape[-2:]:
            raise ConfigError(
                f"kv spatial size {tuple(k_cond.shape[-2:])} does not match "
                f"features {tuple(x.shape[-2:])}"
            )
        xn = self._normed(x)
        b, t, c, hh, ww = xn.shape
        flat = xn.reshape(b * t, c, hh, ww)
        q_s = self.q_self(flat).view(b, t, c, hh, ww)
        k_s = self.k_self(flat).view(b, t, c, hh, ww)
        v_s = self.v_self(flat).view(b, t, c, hh, ww)
        out_self = _temporal_attention(q_s, k_s, v_s, self.heads)
        q_c = self.q_cross(flat).view(b, t, c, hh, ww)
        out_cross = _temporal_attention(q_c, k_cond, v_cond, self.heads)
        return out_cross, out_self

    def forward(self, x: torch.Tensor, kv, force_gate: float | None = None):
        out_cross, out_self = self.branches(x, kv)
        if force_gate is None:
            b, t, c, hh, ww = x.shape
            cat = torch.cat([out_cross, out_self], dim=2).reshape(b * t, 2 * c, hh, ww)
            g = torch.sigmoid(self.gate(cat)).view(b, t, c, hh, ww)
        else:
            g = torch.as_tensor(force_gate, dtype=x.dtype, device=x.device)
        return g * out_cross + (1 - g) * out_self


def neighborhood_mask(h: int, w: int, window: int, device=None) -> torch.Tensor:
    """[h*w, h*w] bool mask of clamped window neighborhoods.

    Every query attends to exactly window x window keys; windows near the
    border shift inward so they stay inside the image.
    """
    if window > min(h, w):
        raise ConfigError(f"window {window} larger than feature map {h}x{w}")
    rows = torch.arange(h, device=device)
    cols = torch.arange(w, device=device)
    r0 = (rows - window // 2).clamp(0, h - window)
    c0 = (cols - window // 2).clamp(0, w - window)
    row_ok = (rows[None, :] >= r0[:, None]) & (rows[None, :] < r0[:, None] + window)
    col_ok = (cols[None, :] >= c0[:, None]) & (cols[None, :] < c0[:, None] + window)
    mask = row_ok[:, None, :, None] & col_ok[None, :, None, :]
    return mask.reshape(h * w, h * w)


class HABlock(nn.Module):
    """Global plus neighborhood attention, mixed by noise-conditioned weights.

    Both paths share the same q/k/v and output projections and differ only in
    the attention footprint, so a window covering the whole map makes them
    identical. Mixing weights are softplus outputs of an MLP on the noise
    embedding; the block returns  g1 * global + g2 * neighborhood.
    """

    def __init__(self, dim: int, heads: int, window: int, embed_dim: int):
        super().__init__()
        self.heads = heads
        self.window = window
        self.norm = nn.GroupNorm(math.gcd(8, dim), dim)
        self.to_q = nn.Conv2d(dim, dim, 1, bias=False)
        self.to_k = nn.Conv2d(dim, dim, 1, bias=False)
        self.to_v = nn.Conv2d(dim, dim, 1, bias=False)
        self.proj = nn.Conv2d(dim, dim, 1)
        self.gamma_mlp = nn.Sequential(nn.SiLU(), nn.Linear(embed_dim, 2))

    def _attend(self, q, k, v, mask=None):
        b, c, hh, ww = q.shape
        n = hh * ww
        dh = c // self.heads
        qf = q.view(b, self.heads, dh, n)
        kf = k.view(b, self.heads, dh, n)
        vf = v.view(b, self.heads, dh, n)
        scores = torch.einsum("bhdn,bhdm->bhnm", qf, kf) / math.sqrt(dh)
        if mask is not None:
            scores = scores.masked_fill(~mask[None, None], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = torch.einsum("bhnm,bhdm->bhdn", attn, vf).reshape(b, c, hh, ww)
        return self.proj(out)

    def branches(self, x: torch.Tensor):
        """(global, neighborhood) branch outputs for [B, c, h, w] input."""
        hh, ww = x.shape[-2:]
        xn = self.norm(x)
        q, k, v = self.to_q(xn), self.to_k(xn), self.to_v(xn)
        mask = neighborhood_mask(hh, ww, self.window, device=x.device)
        return self._attend(q, k, v), self._attend(q, k, v, mask)

    def gammas(self, emb: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.gamma_mlp(emb))

    def forward(self, x: torch.Tensor, emb: torch.Tensor, force_gammas=None):
        out_g, out_n = self.branches(x)
        if force_gammas is None:
            g = self.gammas(emb)
            g1, g2 = g[:, 0], g[:, 1]
        else:
            g1 = torch.as_tensor(force_gammas[0], dtype=x.dtype, device=x.device)
            g2 = torch.as_tensor(force_gammas[1], dtype=x.dtype, device=x.device)
        g1 = g1.reshape(-1, 1, 1, 1) if g1.dim() else g1
        g2 = g2.reshape(-1, 1, 1, 1) if g2.dim() else g2
        return g1 * out_g + g2 * out_n


class ConditionalEncoder(nn.Module):
    """Per-frame multi-scale encoder with temporal fusion at every scale."""

    def __init__(self, cfg: MTCDNConfig):
        super().__init__()
        chans = cfg.stage_channels
        cin = cfg.in_channels + cfg.aux_channels
        self.stem = nn.Conv2d(cin, chans[0], 3, padding=1)
        self.blocks = nn.ModuleList(ConvBlock(c, c) for c in chans)
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[s], chans[s + 1], 3, stride=2, padding=1)
            for s in range(cfg.depth - 1)
        )
        self.taes = nn.ModuleList(
            TemporalAttentionEncoder(
                c,
                cfg.heads,
                cfg.frames,
                cfg.temporal_pos_enc,
                emit_values=(s == 0 and cfg.use_tfblock),
            )
            for s, c in enumerate(chans)
        )

    def forward(self, cond: torch.Tensor) -> ConditionalFeatures:
        b, t, c, hh, ww = cond.shape
        h = self.stem(cond.reshape(b * t, c, hh, ww))
        fused, kv = [], None
        for s, block in enumerate(self.blocks):
            h = block(h)
            f, pair = self.taes[s](h.view(b, t, *h.shape[1:]))
            fused.append(f)
            if pair is not None:
                kv = pair
            if s < len(self.downs):
                h = self.downs[s](h)
        return ConditionalFeatures(fused=fused, kv=kv)


class MTCDN(nn.Module):
    """U-Net over T joint frames with conditional injection. Predicts residual
    features; use `denoise` for the full clean-image parameterization."""

    def __init__(self, cfg: MTCDNConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        self.noise_embed = NoiseEmbedding(cfg.embed_dim)
        self.cond_encoder = ConditionalEncoder(cfg)

        cin = 2 * cfg.in_channels + cfg.aux_channels
        self.stem = nn.Conv2d(cin, chans[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(
            ConvBlock(c, c, cfg.embed_dim) for c in chans
        )
        self.cond_proj = nn.ModuleList(nn.Conv2d(c, c, 1) for c in chans)
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[s], chans[s + 1], 3, stride=2, padding=1)
            for s in range(cfg.depth - 1)
        )
        self.tf = TFBlock(chans[0], cfg.heads) if cfg.use_tfblock else None
        # Zero-init residual scale: fusion phases in during training instead
        # of injecting untrained attention into the early optimization.
        self.tf_scale = nn.Parameter(torch.zeros(())) if cfg.use_tfblock else None
        self.mid1 = ConvBlock(chans[-1], chans[-1], cfg.embed_dim)
        self.ha = (
            HABlock(chans[-1], cfg.heads, cfg.neighborhood_window, cfg.embed_dim)
            if cfg.use_hablock
            else None
        )
        self.mid2 = ConvBlock(chans[-1], chans[-1], cfg.embed_dim)
        self.dec_blocks = nn.ModuleList(
            ConvBlock(2 * c, c, cfg.embed_dim) for c in chans
        )
        self.ups = nn.ModuleList(
            nn.Conv2d(chans[s], chans[s - 1], 3, padding=1) for s in range(1, cfg.depth)
        )
        self.out_norm = nn.GroupNorm(math.gcd(8, chans[0]), chans[0])
        self.out_conv = nn.Conv2d(chans[0], cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def encode_condition(self, x_mu: torch.Tensor, aux: torch.Tensor | None = None):
        """Run the conditional branch once; reusable across noise levels."""
        cfg = self.cfg
        if x_mu.dim() != 5 or x_mu.shape[2] != cfg.in_channels:
            raise ConfigError(
                f"x_mu must be [B, T, {cfg.in_channels}, H, W], got {tuple(x_mu.shape)}"
            )
        if cfg.aux_channels > 0:
            if aux is None:
                raise ConfigError("config expects auxiliary input but none was given")
            if aux.shape[2] != cfg.aux_channels or aux.shape[:2] != x_mu.shape[:2]:
                raise ConfigError(
                    f"aux must be [B, T, {cfg.aux_channels}, H, W], got {tuple(aux.shape)}"
                )
            cond_in = torch.cat([x_mu, aux], dim=2)
        else:
            cond_in = x_mu
        return self.cond_encoder(cond_in)

    def forward(
        self,
        x: torch.Tensor,
        sigma,
        x_mu: torch.Tensor,
        aux: torch.Tensor | None = None,
        cond: ConditionalFeatures | None = None,
    ) -> torch.Tensor:
        cfg = self.cfg
        if x.dim() != 5:
            raise ConfigError(f"expected [B, T, C, H, W], got {tuple(x.shape)}")
        b, t, c, hh, ww = x.shape
        stride = 2 ** (cfg.depth - 1)
        if hh % stride or ww % stride:
            raise ConfigError(
                f"spatial dims {hh}x{ww} must be divisible by {stride} for depth {cfg.depth}"
            )
        if cond is None:
            cond = self.encode_condition(x_mu, aux)

        sigma_t = torch.as_tensor(sigma, dtype=x.dtype, device=x.device).reshape(-1)
        if sigma_t.numel() == 1:
            sigma_t = sigma_t.expand(b)
        emb = self.noise_embed(sigma_t)
        emb_bt = emb[:, None, :].expand(b, t, -1).reshape(b * t, -1)

        parts = [x, x_mu]
        if cfg.aux_channels > 0:
            parts.append(aux)
        h = self.stem(torch.cat(parts, dim=2).reshape(b * t, -1, hh, ww))

        skips = []
        for s, block in enumerate(self.enc_blocks):
            h = block(h, emb_bt)
            inj = self.cond_proj[s](cond.fused[s])
            h = h + inj.repeat_interleave(t, dim=0)
            if s == 0 and self.tf is not None:
                h5 = h.view(b, t, *h.shape[1:])
                h = (h5 + self.tf_scale * self.tf(h5, cond.kv)).reshape(
                    b * t, *h.shape[1:]
                )
            skips.append(h)
            if s < len(self.downs):
                h = self.downs[s](h)

        h = self.mid1(h, emb_bt)
        if self.ha is not None:
            h = h + self.ha(h, emb_bt)
        h = self.mid2(h, emb_bt)

        for s in reversed(range(cfg.depth)):
            h = self.dec_blocks[s](torch.cat([h, skips[s]], dim=1), emb_bt)
            if s > 0:
                h = self.ups[s - 1](F.interpolate(h, scale_factor=2, mode="nearest"))

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out.view(b, t, cfg.out_channels, hh, ww)


def denoise(
    model: MTCDN,
    sched: Schedule,
    x: torch.Tensor,
    sigma,
    x_mu: torch.Tensor,
    aux: torch.Tensor | None = None,
    cond: ConditionalFeatures | None = None,
) -> torch.Tensor:
    """Preconditioned clean-image prediction at noise level sigma.

    The network sees the de-meaned state scaled by 1/sqrt(sigma^2 + sd^2) and
    its output is blended back as

        c_skip * (x - alpha*sigma*mu) + c_out * net(...)

    with c_skip = sd^2/(sigma^2+sd^2) and c_out = sigma*sd/sqrt(sigma^2+sd^2),
    so a zero network output degrades gracefully to a shrunk de-meaned input.
    """
    if not torch.isfinite(x).all():
        raise NumericError("non-finite denoiser input")
    sigma_t = torch.as_tensor(sigma, dtype=x.dtype, device=x.device).reshape(-1)
    if (sigma_t <= 0).any():
        raise ConfigError("denoise requires sigma > 0")
    if sigma_t.numel() == 1:
        sig = sigma_t.reshape(1, 1, 1, 1, 1)
    elif sigma_t.numel() == x.shape[0]:
        sig = sigma_t.reshape(-1, 1, 1, 1, 1)
    else:
        raise ConfigError("sigma must be scalar or one value per batch item")
    sd = sched.sigma_data
    x_dm = x - sched.alpha * sig * x_mu
    var = sig**2 + sd**2
    c_skip = sd**2 / var
    c_out = sig * sd / torch.sqrt(var)
    c_in = 1.0 / torch.sqrt(var)
    net_out = model(c_in * x_dm, sigma_t, x_mu, aux, cond)
    return c_skip * x_dm + c_out * net_out
