"""Sinusoidal tables, adaptive 2-D positional encoding and flattening.

Feature maps here are channels-last: ``(B, H', W', D)``.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def sinusoid_table(length: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """``table[p, 2i] = sin(p / 10000**(2i/dim))``, ``table[p, 2i+1] = cos(...)``."""
    if dim % 2:
        raise ValueError(f"encoding dimension must be even, got {dim}")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    inv = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    phase = pos * inv[None, :]
    table = torch.empty(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(phase)
    table[:, 1::2] = torch.cos(phase)
    return table.to(dtype)


def pe_1d(seq: torch.Tensor) -> torch.Tensor:
    """Add the 1-D sinusoid table along the second-to-last axis."""
    length, dim = seq.shape[-2], seq.shape[-1]
    return seq + sinusoid_table(length, dim, seq.dtype).to(seq.device)


def a2dpe(
    feat: torch.Tensor,
    w1_h: torch.Tensor,
    w2_h: torch.Tensor,
    w1_w: torch.Tensor,
    w2_w: torch.Tensor,
    scales: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Adaptive 2-D positional encoding on a ``(B, H, W, D)`` feature map.

    alpha and beta are per-sample scalars gating the height and width tables.
    ``scales`` overrides them directly (used by tests).
    """
    if feat.dim() == 3:
        return a2dpe(feat[None], w1_h, w2_h, w1_w, w2_w, scales)[0]
    b, h, w, d = feat.shape
    if w1_h.shape != (d, d) or w1_w.shape != (d, d) or w2_h.shape != (d, 1) or w2_w.shape != (d, 1):
        raise ValueError(f"A2DPE weights do not match feature width {d}")
    if scales is None:
        g = feat.mean(dim=(1, 2))
        alpha = torch.sigmoid(torch.relu(g @ w1_h) @ w2_h)
        beta = torch.sigmoid(torch.relu(g @ w1_w) @ w2_w)
    else:
        alpha, beta = (torch.as_tensor(s, dtype=feat.dtype).reshape(-1, 1).expand(b, 1) for s in scales)
    p_h = sinusoid_table(h, d, feat.dtype).to(feat.device)
    p_w = sinusoid_table(w, d, feat.dtype).to(feat.device)
    pos = alpha[:, None, None, :] * p_h[None, :, None, :] + beta[:, None, None, :] * p_w[None, None, :, :]
    return feat + pos


class A2DPE(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        std = math.sqrt(2.0 / dim)
        self.w1_h = nn.Parameter(torch.randn(dim, dim) * std)
        self.w2_h = nn.Parameter(torch.randn(dim, 1) * std)
        self.w1_w = nn.Parameter(torch.randn(dim, dim) * std)
        self.w2_w = nn.Parameter(torch.randn(dim, 1) * std)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return a2dpe(feat, self.w1_h, self.w2_h, self.w1_w, self.w2_w)


def flatten(feat: torch.Tensor) -> torch.Tensor:
    """``(..., H, W, D) -> (..., H*W, D)``, row-major: index ``h*W + w``."""
    *lead, h, w, d = feat.shape
    return feat.reshape(*lead, h * w, d)


def unflatten(seq: torch.Tensor, h: int, w: int) -> torch.Tensor:
    *lead, s, d = seq.shape
    if s != h * w:
        raise ValueError(f"sequence of length {s} cannot be unflattened to {h}x{w}")
    return seq.reshape(*lead, h, w, d)
