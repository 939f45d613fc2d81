"""Image preprocessing and the residual CNN that downsamples by 32."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .records import GrayImage

STRIDE = 32


def fit_size(h: int, w: int, target_h: int, target_w: int) -> tuple[int, int, float]:
    s = min(target_h / h, target_w / w)
    return max(1, int(math.floor(s * h))), max(1, int(math.floor(s * w))), s


def preprocess(img: GrayImage | np.ndarray, target_h: int, target_w: int) -> torch.Tensor:
    """Gray image -> ``(3, target_h, target_w)`` float tensor, ink near 1.

    Aspect-preserving bilinear resize, then right/bottom padding with
    background (0 after inversion).
    """
    if target_h % STRIDE or target_w % STRIDE:
        raise ValueError(f"target size {target_h}x{target_w} must be a multiple of {STRIDE}")
    pixels = img.pixels if isinstance(img, GrayImage) else np.asarray(img)
    if pixels.size == 0:
        raise ValueError("empty image")
    h, w = pixels.shape
    x = (255.0 - torch.from_numpy(pixels.astype(np.float32))) / 255.0
    nh, nw, _ = fit_size(h, w, target_h, target_w)
    if (nh, nw) != (h, w):
        x = F.interpolate(x[None, None], size=(nh, nw), mode="bilinear", align_corners=False)[0, 0]
        x = x.clamp_(0.0, 1.0)
    out = torch.zeros(target_h, target_w, dtype=torch.float32)
    out[:nh, :nw] = x
    return out.expand(3, target_h, target_w).contiguous()


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


def _he_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin: int, width: int, stride: int):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.norm1 = _norm(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.norm2 = _norm(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.norm3 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = F.relu(self.norm2(self.conv2(y)))
        y = self.norm3(self.conv3(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class ResidualBackbone(nn.Module):
    """Five stride-2 stages: a conv stem then four residual stages.

    ``kind="toy"`` uses one basic block per stage with ``widths``;
    ``kind="resnet50"`` uses the 3-4-6-3 bottleneck layout (2048 channels)
    with a stride-2 max-pool standing in for the stem's second halving.
    """

    def __init__(self, kind: str = "toy", widths=(16, 32, 64, 128, 256)):
        super().__init__()
        self.kind = kind
        if kind == "toy":
            if len(widths) != 5:
                raise ValueError("toy backbone needs five stage widths")
            self.stem = nn.Sequential(nn.Conv2d(3, widths[0], 3, 2, 1, bias=False), _norm(widths[0]), nn.ReLU())
            self.stages = nn.Sequential(*(BasicBlock(widths[i], widths[i + 1], 2) for i in range(4)))
            self.out_channels = widths[4]
        elif kind == "resnet50":
            self.stem = nn.Sequential(
                nn.Conv2d(3, 64, 7, 2, 3, bias=False), _norm(64), nn.ReLU(), nn.MaxPool2d(3, 2, 1)
            )
            stages, cin = [], 64
            for i, (width, depth) in enumerate(zip((64, 128, 256, 512), (3, 4, 6, 3))):
                blocks = []
                for j in range(depth):
                    blocks.append(Bottleneck(cin, width, 2 if (j == 0 and i > 0) else 1))
                    cin = width * Bottleneck.expansion
                stages.append(nn.Sequential(*blocks))
            self.stages = nn.Sequential(*stages)
            self.out_channels = cin
        else:
            raise ValueError(f"unknown backbone {kind!r}")
        _he_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % STRIDE or x.shape[-1] % STRIDE:
            raise ValueError(f"input {tuple(x.shape[-2:])} not divisible by {STRIDE}")
        return self.stages(self.stem(x))


class ChannelCompress(nn.Module):
    """1x1 convolution mapping backbone channels to the transformer width."""

    def __init__(self, cin: int, hidden: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, hidden, 1)
        _he_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)
