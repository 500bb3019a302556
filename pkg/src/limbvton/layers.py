"""Convolutional building blocks shared by the stage networks."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _norm(c):
    return nn.InstanceNorm2d(c, affine=True)


class SEBlock(nn.Module):
    """Squeeze-and-excitation: rescale channels by a learned gate in ``(0, 1)``."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 2)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def gate(self, x):
        return self.fc(F.adaptive_avg_pool2d(x, 1))

    def forward(self, x):
        return x * self.gate(x)


class ConvAct(nn.Module):
    def __init__(self, cin, cout, stride=1, se=False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = _norm(cout)
        self.se = SEBlock(cout) if se else nn.Identity()

    def forward(self, x):
        return self.se(F.leaky_relu(self.norm(self.conv(x)), 0.2))


class ResBlock(nn.Module):
    """Basic residual block (two 3x3 convs), ResNet-34 style."""

    def __init__(self, channels, se=False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm(channels)
        self.se1 = SEBlock(channels) if se else nn.Identity()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.se2 = SEBlock(channels) if se else nn.Identity()

    def forward(self, x):
        y = self.se1(F.relu(self.norm1(self.conv1(x))))
        y = self.se2(self.norm2(self.conv2(y)))
        return F.relu(x + y)


class DownStage(nn.Sequential):
    """Stride-2 conv followed by a residual block."""

    def __init__(self, cin, cout, se=False):
        super().__init__(ConvAct(cin, cout, stride=2, se=se), ResBlock(cout, se=se))


class UpStage(nn.Module):
    """Upsample x2, concatenate the skip, fuse with a conv."""

    def __init__(self, cin, cskip, cout, se=False):
        super().__init__()
        self.fuse = ConvAct(cin + cskip, cout, se=se)

    def forward(self, x, skip=None):
        size = skip.shape[-2:] if skip is not None else (x.shape[-2] * 2, x.shape[-1] * 2)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.fuse(x)


def widths(base, depth=5, cap=8):
    return [base * min(2**i, cap) for i in range(depth)]


class ResEncoder(nn.Module):
    """Stem at full resolution plus ``depth`` stride-2 residual stages.

    Returns ``[stem, stage1 (/2), ..., stage_depth (/2**depth)]``; without a stem
    the first entry is the input itself.
    """

    def __init__(self, cin, base=16, depth=5, se=False, stem=True):
        super().__init__()
        ws = widths(base, depth)
        self.stem = ConvAct(cin, base, se=se) if stem else nn.Identity()
        self.stages = nn.ModuleList()
        prev = base if stem else cin
        for w in ws:
            self.stages.append(DownStage(prev, w, se=se))
            prev = w
        self.channels = [base if stem else cin] + ws

    def forward(self, x):
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class UNetDecoder(nn.Module):
    """Decoder mirroring :class:`ResEncoder`, one up stage per encoder stage.

    ``head_extra`` channels (e.g. the raw input) are concatenated before the
    output conv; normalized features alone lose absolute intensities.
    """

    def __init__(self, channels, cout, se=False, bottleneck_extra=0, head_extra=0):
        super().__init__()
        self.ups = nn.ModuleList()
        prev = channels[-1] + bottleneck_extra
        for skip in reversed(channels[:-1]):
            self.ups.append(UpStage(prev, skip, skip, se=se))
            prev = skip
        self.head = nn.Conv2d(prev + head_extra, cout, 3, padding=1)

    def forward(self, feats, bottleneck=None, extra=None):
        x = feats[-1] if bottleneck is None else bottleneck
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            x = up(x, skip)
        if extra is not None:
            x = torch.cat([x, extra], dim=1)
        return self.head(x)
