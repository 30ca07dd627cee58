"""Joint template/search transformer encoder with optional context tokens."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class EncoderConfig:
    patch_size: int = 16
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    template_res: int = 64
    search_res: int = 128
    max_context_tokens: int = 16
    mlp_ratio: float = 4.0
    # "template_to_search": template queries attending search keys
    # "search_to_template": search queries attending template keys
    saliency_direction: str = "template_to_search"

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        for name in ("template_res", "search_res"):
            if getattr(self, name) % self.patch_size:
                raise ValueError(f"{name} must be divisible by patch_size")
        if self.saliency_direction not in ("template_to_search", "search_to_template"):
            raise ValueError(f"unknown saliency_direction {self.saliency_direction!r}")

    @property
    def num_template_tokens(self):
        return (self.template_res // self.patch_size) ** 2

    @property
    def num_search_tokens(self):
        return (self.search_res // self.patch_size) ** 2

    @property
    def feat_size(self):
        return self.search_res // self.patch_size


@dataclass
class EncoderOutput:
    f_x: torch.Tensor    # (B, N_s, D)
    attn: torch.Tensor   # (B, n, N_s) saliency
    last_attention: torch.Tensor  # (B, n, seq, seq)


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x), attn


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


def extract_saliency(last_attention: torch.Tensor, num_template: int, num_search: int,
                     direction: str = "template_to_search") -> torch.Tensor:
    """Per-head saliency of every search token, shape ``(..., n, N_s)``.

    The default averages, over template queries, the attention each one pays
    to the search keys; rows are a sub-distribution because template queries
    also attend to template and context keys.
    """
    z, s = slice(0, num_template), slice(num_template, num_template + num_search)
    if direction == "template_to_search":
        return last_attention[..., z, s].mean(dim=-2)
    if direction == "search_to_template":
        return last_attention[..., s, z].mean(dim=-1)
    raise ValueError(f"unknown saliency direction {direction!r}")


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_z = nn.Parameter(torch.zeros(1, cfg.num_template_tokens, d))
        self.pos_x = nn.Parameter(torch.zeros(1, cfg.num_search_tokens, d))
        self.pos_ctx = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        # pixel normalization, overwritten from the training corpus
        self.register_buffer("pixel_mean", torch.full((3,), 127.5))
        self.register_buffer("pixel_std", torch.full((3,), 64.0))
        self.reset_parameters()

    def reset_parameters(self):
        for p in (self.pos_z, self.pos_x, self.pos_ctx):
            nn.init.trunc_normal_(p, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def patch_embed(self, image: torch.Tensor, role: str | None = None) -> torch.Tensor:
        """(B, 3, R, R) raw-intensity images -> (B, (R/p)^2, D) tokens.

        ``role`` ("template" or "search") picks the positional embedding; when
        omitted it is inferred from the resolution.
        """
        cfg = self.cfg
        res = image.shape[-1]
        if role is None:
            role = "template" if res == cfg.template_res else "search"
        expected = cfg.template_res if role == "template" else cfg.search_res
        if tuple(image.shape[-2:]) != (expected, expected):
            raise ValueError(f"{role} image resolution {tuple(image.shape[-2:])}, expected {expected}")
        image = (image - self.pixel_mean.view(1, 3, 1, 1)) / self.pixel_std.view(1, 3, 1, 1)
        tokens = self.patch(image).flatten(2).transpose(1, 2)
        return tokens + (self.pos_z if role == "template" else self.pos_x)

    def encode(self, z_tokens, x_tokens, context=None) -> EncoderOutput:
        cfg = self.cfg
        if z_tokens.shape[-1] != cfg.embed_dim or x_tokens.shape[-1] != cfg.embed_dim:
            raise ValueError("token dimension does not match embed_dim")
        if z_tokens.shape[1] != cfg.num_template_tokens or x_tokens.shape[1] != cfg.num_search_tokens:
            raise ValueError("unexpected number of template/search tokens")
        parts = [z_tokens, x_tokens]
        if context is not None and context.shape[1] > 0:
            if context.shape[1] > cfg.max_context_tokens:
                raise ValueError(f"{context.shape[1]} context tokens exceed max_context_tokens")
            if context.shape[-1] != cfg.embed_dim:
                raise ValueError("context token dimension does not match embed_dim")
            parts.append(context + self.pos_ctx)
        x = torch.cat(parts, dim=1)
        attn = None
        for blk in self.blocks:
            x, attn = blk(x)
        x = self.norm(x)
        nz, ns = cfg.num_template_tokens, cfg.num_search_tokens
        f_x = x[:, nz:nz + ns]
        sal = extract_saliency(attn, nz, ns, cfg.saliency_direction)
        return EncoderOutput(f_x=f_x, attn=sal, last_attention=attn)

    def forward(self, template, search, context=None) -> EncoderOutput:
        return self.encode(self.patch_embed(template, "template"), self.patch_embed(search, "search"), context)
