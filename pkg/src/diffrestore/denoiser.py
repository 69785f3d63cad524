"""Prompt-conditioned transformer U-Net noise predictor.

A 4-level encoder/decoder operating on the channel dimension: attention is
computed across channels (cost linear in pixel count) with L2-normalized
queries/keys and a learned per-head temperature, feed-forward layers are
gated with a 3x3 depthwise spatial mixer, and normalization is bias-free
(scale-only) over channels. Each of the three decoder stages receives the
timestep embedding broadcast as constant channels and passes its features
through a prompt block that mixes learned prompt components with
input-dependent softmax weights.

Attention and feed-forward output projections are zero-initialized, so
every transformer block and prompt block starts as an exact identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


@dataclass(frozen=True)
class DenoiserConfig:
    levels: int = 4
    base_channels: int = 48
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    blocks: tuple[int, ...] = (4, 6, 6, 8)
    prompt_components: int = 5
    prompt_channels: tuple[int, ...] | None = None   # default: level width
    prompt_spatial: tuple[int, ...] = (64, 32, 16)
    timestep_embed_dim: int = 128
    ffn_expansion: float = 2.66
    in_channels: int = 6   # 3 noisy target + 3 degraded condition
    out_channels: int = 3

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("need at least 2 levels")
        for name in ("channel_multipliers", "heads", "blocks"):
            if len(getattr(self, name)) != self.levels:
                raise ValueError(f"{name} must have {self.levels} entries")
        if len(self.prompt_spatial) != self.levels - 1:
            raise ValueError(f"prompt_spatial must have {self.levels - 1} entries")
        if self.prompt_channels is not None and len(self.prompt_channels) != self.levels - 1:
            raise ValueError(f"prompt_channels must have {self.levels - 1} entries")
        if self.prompt_components < 1:
            raise ValueError("prompt_components must be >= 1")
        if self.timestep_embed_dim % 2 or self.timestep_embed_dim < 2:
            raise ValueError("timestep_embed_dim must be a positive even number")
        if self.base_channels < 1 or min(self.channel_multipliers) < 1:
            raise ValueError("channel counts must be positive")
        widths = self.level_channels
        for i, (c, h) in enumerate(zip(widths, self.heads)):
            if c % h:
                raise ValueError(f"level {i}: channels {c} not divisible by heads {h}")
        for i, c in enumerate(widths[1:], start=1):
            if c % 4:
                raise ValueError(
                    f"level {i}: channels {c} must be divisible by 4 for the "
                    "space-to-channel resampling"
                )
        for i in range(self.levels - 1):
            pc = self.prompt_channel_at(i)
            if pc < 1:
                raise ValueError("prompt channels must be positive")
            if (widths[i] + pc) % self.heads[i]:
                raise ValueError(
                    f"decoder stage {i}: fused width {widths[i] + pc} not "
                    f"divisible by heads {self.heads[i]}"
                )

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def prompt_channel_at(self, level: int) -> int:
        if self.prompt_channels is not None:
            return self.prompt_channels[level]
        return self.level_channels[level]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        for key in ("channel_multipliers", "heads", "blocks", "prompt_spatial"):
            d[key] = tuple(d[key])
        if d.get("prompt_channels") is not None:
            d["prompt_channels"] = tuple(d["prompt_channels"])
        return cls(**d)


def timestep_embedding(t, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding: element 2i = sin(t / 10000^(2i/dim)),
    element 2i+1 = cos of the same angle.

    `t` may be an int (returns (dim,)) or a 1-D tensor (returns (B, dim)).
    """
    if dim % 2 or dim < 2:
        raise ValueError(f"embedding dim must be a positive even number, got {dim}")
    scalar = not torch.is_tensor(t)
    tv = torch.as_tensor(t, dtype=dtype).reshape(-1, 1)
    i = torch.arange(dim // 2, dtype=dtype)
    angles = tv * torch.exp(-math.log(10000.0) * (2.0 * i / dim))
    emb = torch.empty(tv.shape[0], dim, dtype=dtype)
    emb[:, 0::2] = torch.sin(angles)
    emb[:, 1::2] = torch.cos(angles)
    return emb[0] if scalar else emb


class ChannelLayerNorm(nn.Module):
    """Bias-free layer norm over the channel axis (scale only)."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return x / torch.sqrt(var + 1e-5) * self.weight[None, :, None, None]


class ChannelAttention(nn.Module):
    """Multi-head self-attention across channels: the attention matrix is
    (C/heads) x (C/heads) per head, so cost is linear in H*W."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, kernel_size=1, bias=False)
        self.qkv_dwconv = nn.Conv2d(
            dim * 3, dim * 3, kernel_size=3, padding=1, groups=dim * 3, bias=False
        )
        self.project_out = nn.Conv2d(dim, dim, kernel_size=1, bias=False)

    def forward(self, x):
        _, _, h, w = x.shape
        q, k, v = self.qkv_dwconv(self.qkv(x)).chunk(3, dim=1)
        q = rearrange(q, "b (head c) h w -> b head c (h w)", head=self.heads)
        k = rearrange(k, "b (head c) h w -> b head c (h w)", head=self.heads)
        v = rearrange(v, "b (head c) h w -> b head c (h w)", head=self.heads)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = (q @ k.transpose(-2, -1)) * self.temperature
        attn = attn.softmax(dim=-1)
        out = rearrange(attn @ v, "b head c (h w) -> b (head c) h w", h=h, w=w)
        return self.project_out(out)


class GatedFeedForward(nn.Module):
    """Two-branch gated feed-forward with a 3x3 depthwise spatial mixer."""

    def __init__(self, dim: int, expansion: float):
        super().__init__()
        hidden = int(dim * expansion)
        self.project_in = nn.Conv2d(dim, hidden * 2, kernel_size=1, bias=False)
        self.dwconv = nn.Conv2d(
            hidden * 2, hidden * 2, kernel_size=3, padding=1,
            groups=hidden * 2, bias=False,
        )
        self.project_out = nn.Conv2d(hidden, dim, kernel_size=1, bias=False)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, expansion: float = 2.66):
        super().__init__()
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by heads {heads}")
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = ChannelAttention(dim, heads)
        self.norm2 = ChannelLayerNorm(dim)
        self.ffn = GatedFeedForward(dim, expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PromptBlock(nn.Module):
    """Mixes learned prompt components into the features.

    Component weights are an input-dependent softmax over pooled features;
    the aggregated prompt is bilinearly resized to the feature resolution,
    fused through a transformer block and a 3x3 conv, and projected back to
    the input width inside a residual, so a zero output projection makes
    the block an identity map.
    """

    def __init__(
        self,
        dim: int,
        components: int,
        prompt_channels: int,
        prompt_size: int,
        heads: int,
        expansion: float = 2.66,
    ):
        super().__init__()
        if components < 1:
            raise ValueError("need at least one prompt component")
        self.weight_head = nn.Linear(dim, components)
        self.components = nn.Parameter(
            torch.empty(components, prompt_channels, prompt_size, prompt_size)
        )
        self.fuse = TransformerBlock(dim + prompt_channels, heads, expansion)
        self.conv = nn.Conv2d(
            dim + prompt_channels, dim + prompt_channels,
            kernel_size=3, padding=1, bias=False,
        )
        self.output_proj = nn.Conv2d(dim + prompt_channels, dim, 1, bias=False)

    def component_weights(self, x) -> torch.Tensor:
        return F.softmax(self.weight_head(x.mean(dim=(-2, -1))), dim=-1)

    def forward(self, x):
        _, _, h, w = x.shape
        weights = self.component_weights(x)
        prompt = torch.einsum("bn,nchw->bchw", weights, self.components)
        prompt = F.interpolate(
            prompt, size=(h, w), mode="bilinear", align_corners=False
        )
        fused = self.conv(self.fuse(torch.cat([x, prompt], dim=1)))
        return x + self.output_proj(fused)


class Downsample(nn.Module):
    """Space-to-channel: halves H and W, conv chooses the output width."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out // 4, kernel_size=3, padding=1, bias=False),
            nn.PixelUnshuffle(2),
        )

    def forward(self, x):
        return self.body(x)


class Upsample(nn.Module):
    """Channel-to-space inverse of :class:`Downsample`."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out * 4, kernel_size=3, padding=1, bias=False),
            nn.PixelShuffle(2),
        )

    def forward(self, x):
        return self.body(x)


def _level_blocks(dim, heads, n, expansion):
    return nn.Sequential(
        *[TransformerBlock(dim, heads, expansion) for _ in range(n)]
    )


class _Encoder(nn.Module):
    """Patch embedding, the downsampling levels and the latent blocks.

    This is the backbone that stays frozen when a pretrained encoder is
    used: every parameter under this module is covered by the freeze mask.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        c = cfg.level_channels
        self.patch_embed = nn.Conv2d(
            cfg.in_channels, c[0], kernel_size=3, padding=1, bias=False
        )
        self.levels = nn.ModuleList(
            _level_blocks(c[i], cfg.heads[i], cfg.blocks[i], cfg.ffn_expansion)
            for i in range(cfg.levels - 1)
        )
        self.downs = nn.ModuleList(
            Downsample(c[i], c[i + 1]) for i in range(cfg.levels - 1)
        )
        self.latent = _level_blocks(
            c[-1], cfg.heads[-1], cfg.blocks[-1], cfg.ffn_expansion
        )

    def forward(self, x):
        f = self.patch_embed(x)
        skips = []
        for level, down in zip(self.levels, self.downs):
            f = level(f)
            skips.append(f)
            f = down(f)
        return self.latent(f), skips


class _Decoder(nn.Module):
    """Upsampling stages with timestep injection and prompt blocks."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        c = cfg.level_channels
        td = cfg.timestep_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.ups = nn.ModuleList(
            Upsample(c[i + 1], c[i]) for i in range(cfg.levels - 1)
        )
        self.time_proj = nn.ModuleList(
            nn.Linear(td, c[i]) for i in range(cfg.levels - 1)
        )
        self.fuse = nn.ModuleList(
            nn.Conv2d(3 * c[i], c[i], kernel_size=1, bias=False)
            for i in range(cfg.levels - 1)
        )
        self.prompts = nn.ModuleList(
            PromptBlock(
                c[i],
                cfg.prompt_components,
                cfg.prompt_channel_at(i),
                cfg.prompt_spatial[i],
                cfg.heads[i],
                cfg.ffn_expansion,
            )
            for i in range(cfg.levels - 1)
        )
        self.levels = nn.ModuleList(
            _level_blocks(c[i], cfg.heads[i], cfg.blocks[i], cfg.ffn_expansion)
            for i in range(cfg.levels - 1)
        )
        self.output = nn.Conv2d(
            c[0], cfg.out_channels, kernel_size=3, padding=1, bias=False
        )

    def forward(self, f, skips, t_emb):
        t_emb = self.time_mlp(t_emb)
        for i in reversed(range(len(self.ups))):
            up = self.ups[i](f)
            t_chan = self.time_proj[i](t_emb)[:, :, None, None]
            t_chan = t_chan.expand(-1, -1, up.shape[-2], up.shape[-1])
            f = self.fuse[i](torch.cat([up, skips[i], t_chan], dim=1))
            f = self.prompts[i](f)
            f = self.levels[i](f)
        return self.output(f)


class PromptDenoiser(nn.Module):
    """Noise predictor eps_hat = f(y_t, x_cond, t).

    Forward passes are read-only on the parameters, so one parameter set
    may be shared across inference workers; training requires the single
    writer to never interleave updates with forward evaluation.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _Encoder(cfg)
        self.decoder = _Decoder(cfg)
        self.apply(self._init_module)
        self.reset_block_projections()

    @staticmethod
    def _init_module(m):
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3]
                if m.weight.ndim == 4 else 1
            )
            std = fan_in**-0.5
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, PromptBlock):
            std = m.components.shape[1] ** -0.5
            nn.init.trunc_normal_(m.components, std=std, a=-2 * std, b=2 * std)

    def reset_block_projections(self):
        """Zero every block output projection, making each transformer block
        and prompt block an exact identity map."""
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (ChannelAttention, GatedFeedForward)):
                    m.project_out.weight.zero_()
                elif isinstance(m, PromptBlock):
                    m.output_proj.weight.zero_()

    def parameter_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def trainable_mask(self, freeze_encoder: bool) -> dict[str, bool]:
        """Trainability mask: encoder tensors are frozen when the encoder
        backbone is held constant."""
        return {
            name: not (freeze_encoder and name.startswith("encoder."))
            for name, _ in self.named_parameters()
        }

    def frozen_names(self, freeze_encoder: bool) -> frozenset[str]:
        mask = self.trainable_mask(freeze_encoder)
        return frozenset(n for n, trainable in mask.items() if not trainable)

    def forward(self, y_t: torch.Tensor, x_cond: torch.Tensor, t) -> torch.Tensor:
        squeeze = y_t.ndim == 3
        if squeeze:
            y_t, x_cond = y_t[None], x_cond[None]
        if y_t.shape != x_cond.shape:
            raise ValueError(
                f"noisy/condition shape mismatch: {tuple(y_t.shape)} vs "
                f"{tuple(x_cond.shape)}"
            )
        if y_t.shape[1] * 2 != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels // 2}-channel images, "
                f"got {y_t.shape[1]}"
            )
        h, w = y_t.shape[-2:]
        d = self.cfg.downsample_factor
        if h % d or w % d:
            raise ValueError(f"H and W must be divisible by {d}, got {h}x{w}")
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"non-finite parameter: {name}")

        dtype = self.decoder.output.weight.dtype
        t_vec = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t_vec.numel() == 1:
            t_vec = t_vec.expand(y_t.shape[0])
        elif t_vec.numel() != y_t.shape[0]:
            raise ValueError(f"got {t_vec.numel()} timesteps for batch {y_t.shape[0]}")
        t_emb = timestep_embedding(t_vec, self.cfg.timestep_embed_dim, dtype=dtype)

        f, skips = self.encoder(torch.cat([y_t, x_cond], dim=1))
        eps_hat = self.decoder(f, skips, t_emb)
        return eps_hat[0] if squeeze else eps_hat
