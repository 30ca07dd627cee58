"""Tracker network: encoder + center head (+ training-only noise decoder)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import Encoder, EncoderConfig, EncoderOutput
from .dca import ContextTokens, NoiseDecoder
from .heads import CenterHead, PredictionMaps, decode_box


@dataclass
class HopMeta:
    """Bookkeeping about one tracking hop, used only by oracle stand-ins."""
    seq_ids: list
    frame_indices: list
    centers: torch.Tensor  # (B, 2) crop centers in frame pixels
    sides: torch.Tensor    # (B,)


@dataclass
class HopOutput:
    f_x: torch.Tensor
    attn: torch.Tensor
    maps: PredictionMaps
    box: torch.Tensor  # (B, 4) crop-normalized


class TrackerModel(nn.Module):
    def __init__(self, cfg: EncoderConfig | None = None, token_length: int = 8):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.encoder = Encoder(self.cfg)
        self.head = CenterHead(self.cfg.embed_dim, self.cfg.feat_size)
        self.noise_decoder = NoiseDecoder(self.cfg.embed_dim, self.cfg.num_heads, self.cfg.feat_size)
        # non-semantic query ablation; unused unless that variant is trained
        self.query_tokens = nn.Parameter(torch.zeros(1, token_length, self.cfg.embed_dim))
        nn.init.trunc_normal_(self.query_tokens, std=0.02)

    def set_pixel_stats(self, mean, std):
        self.encoder.pixel_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.encoder.pixel_std.copy_(torch.as_tensor(std, dtype=torch.float32))

    def backbone_parameters(self):
        return self.encoder.parameters()

    def other_parameters(self):
        ids = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def encode(self, template, search, context: ContextTokens | None = None) -> EncoderOutput:
        tokens = None if context is None else context.tokens
        return self.encoder(template, search, tokens)

    def hop(self, template, search, context: ContextTokens | None = None,
            meta: HopMeta | None = None) -> HopOutput:
        out = self.encode(template, search, context)
        maps = self.head(out.f_x)
        return HopOutput(out.f_x, out.attn, maps, decode_box(maps))


class OracleModel(TrackerModel):
    """Stand-in whose heads return the ground truth of the searched frame.

    ``gt`` maps a sequence id to an ``(T, 4)`` array of center-size frame
    boxes.  Encoder features are all-zero and attention uniform, so DCA
    sampling still runs on well-formed tensors.
    """

    def __init__(self, gt: dict, cfg: EncoderConfig | None = None, token_length: int = 8):
        super().__init__(cfg, token_length)
        self.gt = {k: torch.as_tensor(v, dtype=torch.float64) for k, v in gt.items()}
        self.encode_calls = 0
        self.context_lengths = []

    def hop(self, template, search, context=None, meta: HopMeta | None = None) -> HopOutput:
        if meta is None:
            raise ValueError("the oracle needs hop metadata")
        self.encode_calls += 1
        self.context_lengths.append(0 if context is None else len(context))
        b = search.shape[0]
        s = self.cfg.feat_size
        gt = torch.stack([self.gt[sid][fi] for sid, fi in zip(meta.seq_ids, meta.frame_indices)])
        norm = torch.cat([(gt[:, :2] - meta.centers) / meta.sides.unsqueeze(-1) + 0.5,
                          gt[:, 2:] / meta.sides.unsqueeze(-1)], -1)
        cell = (norm[:, :2] * s).floor().clamp(0, s - 1)
        cls = torch.zeros(b, s, s, dtype=torch.float64)
        ar = torch.arange(b)
        cls[ar, cell[:, 1].long(), cell[:, 0].long()] = 1.0
        offset = torch.zeros(b, 2, s, s, dtype=torch.float64)
        size = torch.zeros(b, 2, s, s, dtype=torch.float64)
        offset[ar, :, cell[:, 1].long(), cell[:, 0].long()] = norm[:, :2] * s - cell
        size[ar, :, cell[:, 1].long(), cell[:, 0].long()] = norm[:, 2:]
        maps = PredictionMaps(cls, offset, size)
        n = self.cfg.num_template_tokens + self.cfg.num_search_tokens + (0 if context is None else len(context))
        f_x = torch.zeros(b, self.cfg.num_search_tokens, self.cfg.embed_dim)
        attn = torch.full((b, self.cfg.num_heads, self.cfg.num_search_tokens), 1.0 / n)
        return HopOutput(f_x, attn, maps, decode_box(maps))
