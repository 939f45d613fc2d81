"""Encoder-decoder transformer and the full image-to-tokens model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import STRIDE, ChannelCompress, ResidualBackbone
from .posenc import A2DPE, flatten, pe_1d

ATTN_SCALES = ("sqrt", "hidden")
POS_ENCODINGS = ("a2dpe", "1d")


@dataclass
class ModelConfig:
    hidden: int = 256
    heads: int = 1
    layers: int = 2
    ff: int | None = None
    dropout: float = 0.1
    max_len: int = 600
    attn_scale: str = "sqrt"
    positional_encoding: str = "a2dpe"
    backbone: str = "toy"
    backbone_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    image_h: int = 256
    image_w: int = 1024

    def __post_init__(self) -> None:
        if self.ff is None:
            self.ff = 4 * self.hidden
        self.backbone_widths = list(self.backbone_widths)

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.hidden % 2:
            raise ValueError("hidden must be even for sinusoidal encodings")
        if self.attn_scale not in ATTN_SCALES:
            raise ValueError(f"attn_scale must be one of {ATTN_SCALES}")
        if self.positional_encoding not in POS_ENCODINGS:
            raise ValueError(f"positional_encoding must be one of {POS_ENCODINGS}")
        if self.image_h % STRIDE or self.image_w % STRIDE:
            raise ValueError(f"image size must be a multiple of {STRIDE}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.layers < 1 or self.max_len < 2:
            raise ValueError("need layers >= 1 and max_len >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def causal_mask(t: int, device=None) -> torch.Tensor:
    """Boolean ``(t, t)`` mask, True where attention is blocked (future keys)."""
    return torch.triu(torch.ones(t, t, dtype=torch.bool, device=device), diagonal=1)


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float = 0.0, scale: str = "sqrt"):
        super().__init__()
        self.hidden, self.heads = hidden, heads
        self.head_dim = hidden // heads
        self.scale_mode = scale
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)
        self.last_weights: torch.Tensor | None = None

    @property
    def scale(self) -> float:
        if self.scale_mode == "hidden":
            return 1.0 / self.hidden
        return 1.0 / math.sqrt(self.head_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, key, mask: torch.Tensor | None = None, keep_weights: bool = False):
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(key))
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        if keep_weights:
            self.last_weights = weights.detach()
        ctx = self.drop(weights) @ v
        b, _, t, _ = ctx.shape
        return self.out(ctx.transpose(1, 2).reshape(b, t, self.hidden))


class FeedForward(nn.Sequential):
    def __init__(self, hidden: int, ff: int, dropout: float):
        super().__init__(nn.Linear(hidden, ff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ff, hidden))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.dropout, cfg.attn_scale)
        self.norm2 = nn.LayerNorm(cfg.hidden)
        self.ff = FeedForward(cfg.hidden, cfg.ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, keep_weights=False):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, keep_weights=keep_weights))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.dropout, cfg.attn_scale)
        self.norm2 = nn.LayerNorm(cfg.hidden)
        self.cross_attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.dropout, cfg.attn_scale)
        self.norm3 = nn.LayerNorm(cfg.hidden)
        self.ff = FeedForward(cfg.hidden, cfg.ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, mask):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, mask))
        y = y + self.drop(self.cross_attn(self.norm2(y), memory))
        return y + self.drop(self.ff(self.norm3(y)))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.hidden)

    def forward(self, seq, keep_weights=False):
        for layer in self.layers:
            seq = layer(seq, keep_weights)
        return self.norm(seq)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, nb_class: int):
        super().__init__()
        self.hidden = cfg.hidden
        self.max_len = cfg.max_len
        self.embed = nn.Embedding(nb_class, cfg.hidden)
        nn.init.normal_(self.embed.weight, std=cfg.hidden**-0.5)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.hidden)
        self.drop = nn.Dropout(cfg.dropout)
        self.mask_fn = causal_mask

    def forward(self, tokens: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        t = tokens.shape[1]
        if t > self.max_len:
            raise ValueError(f"target length {t} exceeds max_len {self.max_len}")
        y = self.drop(pe_1d(self.embed(tokens) * math.sqrt(self.hidden)))
        mask = self.mask_fn(t, tokens.device)
        for layer in self.layers:
            y = layer(y, memory, mask)
        return self.norm(y)


class HTRNERModel(nn.Module):
    """Backbone -> 1x1 compress -> positional encoding -> flatten -> transformer."""

    def __init__(self, cfg: ModelConfig, nb_class: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.nb_class = nb_class
        self.backbone = ResidualBackbone(cfg.backbone, tuple(cfg.backbone_widths))
        self.compress = ChannelCompress(self.backbone.out_channels, cfg.hidden)
        self.a2dpe = A2DPE(cfg.hidden) if cfg.positional_encoding == "a2dpe" else None
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg, nb_class)
        self.project = nn.Linear(cfg.hidden, nb_class)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` -> channels-last ``(B, H/32, W/32, hidden)``."""
        f = self.compress(self.backbone(images)).permute(0, 2, 3, 1)
        if self.a2dpe is not None:
            f = self.a2dpe(f)
        return f

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        seq = flatten(self.features(images))
        if self.a2dpe is None:
            seq = pe_1d(seq)
        return self.encoder(seq)

    def decode(self, memory: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return self.project(self.decoder(tokens, memory))

    def forward(self, images: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits; ``logits[:, t]`` predicts ``tokens[:, t + 1]``."""
        return self.decode(self.encode(images), tokens[:, :-1])

    @torch.no_grad()
    def greedy_decode(self, memory: torch.Tensor, sop: int, eop: int, max_len: int | None = None):
        """Batched argmax decoding; returns token lists and truncation flags."""
        limit = min(max_len or self.cfg.max_len, self.cfg.max_len)
        b = memory.shape[0]
        tokens = torch.full((b, 1), sop, dtype=torch.long, device=memory.device)
        done = torch.zeros(b, dtype=torch.bool, device=memory.device)
        while tokens.shape[1] < limit and not bool(done.all()):
            logits = self.decode(memory, tokens)[:, -1]
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, eop), nxt)
            tokens = torch.cat([tokens, nxt[:, None]], dim=1)
            done |= nxt == eop
        out, truncated = [], []
        for row in tokens.tolist():
            if eop in row:
                out.append(row[: row.index(eop) + 1])
                truncated.append(False)
            else:
                out.append(row[: limit - 1] + [eop])
                truncated.append(True)
        return out, truncated


def param_groups(model: HTRNERModel) -> dict[str, list[tuple[str, nn.Parameter]]]:
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        if name.startswith("backbone."):
            key = "backbone"
        elif name.startswith("compress."):
            key = "compress"
        elif name.startswith("a2dpe."):
            key = "a2dpe"
        elif name.startswith("encoder."):
            key = "encoder"
        elif name.startswith("decoder.embed"):
            key = "embedding"
        elif name.startswith("decoder."):
            key = "decoder"
        else:
            key = "projection"
        groups.setdefault(key, []).append((name, p))
    return groups
