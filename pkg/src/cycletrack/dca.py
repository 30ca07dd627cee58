"""Dual-mode contextual association: prompt tokens early, noise tokens late.

Selection indices never carry gradients; the gathered token vectors keep
their gradient path back into the encoder.
"""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass

import torch
from torch import nn

from .heads import CenterHead, PredictionMaps

# instrumentation: how often each sampler ran (inference must leave these at 0)
CALLS: Counter = Counter()


class Mode(str, enum.Enum):
    NONE = "none"
    PROMPT = "prompt"
    NOISE = "noise"
    QUERY = "query"  # learned non-semantic queries (ablation only)


@dataclass
class ContextTokens:
    tokens: torch.Tensor | None  # (B, K, D)
    mode: Mode = Mode.NONE
    source_indices: torch.Tensor | None = None  # (B, K) long

    @classmethod
    def empty(cls):
        return cls(None, Mode.NONE, None)

    def __len__(self):
        return 0 if self.tokens is None else self.tokens.shape[1]


@dataclass
class DcaSchedule:
    switch_epoch: int = 10
    token_length: int = 8

    def __post_init__(self):
        if self.switch_epoch < 0:
            raise ValueError("switch_epoch must be >= 0")
        if self.token_length < 1:
            raise ValueError("token_length must be >= 1")


@dataclass
class DcaConfig:
    token_length: int = 8
    switch_epoch: int | None = None  # None: half of the training epochs
    noise_exclude_topk: bool = False
    noise_loss_weight: float = 1.0
    saliency_direction: str = "template_to_search"
    # ablation switches
    use_prompt: bool = True
    use_noise: bool = True
    learned_queries: bool = False

    def schedule(self, total_epochs: int) -> DcaSchedule:
        k = self.switch_epoch if self.switch_epoch is not None else total_epochs // 2
        return DcaSchedule(switch_epoch=k, token_length=self.token_length)


def select_mode(epoch: int, sched: DcaSchedule) -> Mode:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return Mode.PROMPT if epoch <= sched.switch_epoch else Mode.NOISE


def score_tokens(attn: torch.Tensor, cls: torch.Tensor) -> torch.Tensor:
    """Head-averaged ``attn * cls`` score for every search token.

    ``attn`` is ``(..., n, N_s)``; ``cls`` is ``(..., N_s)`` or a ``(..., H, W)``
    map flattened row-major.
    """
    if cls.shape[-1] != attn.shape[-1] and cls.dim() >= 2:
        cls = cls.flatten(-2)
    if cls.shape[-1] != attn.shape[-1]:
        raise ValueError(f"cls has {cls.shape[-1]} cells but attn covers {attn.shape[-1]} tokens")
    return (attn * cls.unsqueeze(-2)).mean(dim=-2)


def topk_indices(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest scores, ties resolved toward smaller index."""
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def gather_tokens(f_x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(f_x, 1, idx.unsqueeze(-1).expand(-1, -1, f_x.shape[-1]))


def sample_prompt(f_x: torch.Tensor, attn: torch.Tensor, cls: torch.Tensor, k: int) -> ContextTokens:
    n_s = f_x.shape[1]
    if k > n_s:
        raise ValueError(f"cannot sample {k} tokens from {n_s}")
    CALLS["prompt"] += 1
    scores = score_tokens(attn.detach(), cls.detach())
    idx = topk_indices(scores, k)
    return ContextTokens(gather_tokens(f_x, idx), Mode.PROMPT, idx)


def sample_noise(f_x: torch.Tensor, k: int, generator: torch.Generator | None = None,
                 exclude: torch.Tensor | None = None) -> ContextTokens:
    """``k`` distinct uniformly drawn token indices per sample.

    ``exclude`` (B, E) optionally removes indices from the candidate pool.
    """
    b, n_s, _ = f_x.shape
    if k > n_s:
        raise ValueError(f"cannot sample {k} tokens from {n_s}")
    CALLS["noise"] += 1
    rows = []
    for i in range(b):
        perm = torch.randperm(n_s, generator=generator)
        if exclude is not None:
            keep = ~torch.isin(perm, exclude[i])
            if int(keep.sum()) >= k:
                perm = perm[keep]
        rows.append(perm[:k])
    idx = torch.stack(rows)
    return ContextTokens(gather_tokens(f_x, idx), Mode.NOISE, idx)


class NoiseDecoder(nn.Module):
    """One cross-attention transformer layer (search queries, noise keys/values)
    followed by a dedicated copy of the prediction heads."""

    def __init__(self, dim, num_heads, feat_size, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.head = CenterHead(dim, feat_size)

    def perturb(self, f_x: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        kv = self.norm_kv(noise)
        y, _ = self.attn(self.norm_q(f_x), kv, kv, need_weights=False)
        x = f_x + y
        return x + self.mlp(self.norm2(x))

    def forward(self, f_x: torch.Tensor, noise: ContextTokens) -> PredictionMaps:
        if noise.mode != Mode.NOISE:
            raise ValueError(f"noise decoder needs noise tokens, got mode {noise.mode.value}")
        return self.head(self.perturb(f_x, noise.tokens))


def noise_decode(decoder: NoiseDecoder, f_x: torch.Tensor, noise: ContextTokens) -> PredictionMaps:
    return decoder(f_x, noise)
